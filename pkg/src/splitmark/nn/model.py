"""Sequential model container, loss head, SGD and the finite-difference check."""

from __future__ import annotations

import copy
from typing import Callable, Iterator, Sequence

import numpy as np

from ..errors import ConfigError, DataError, NumericError, ShapeError, StateError
from .layers import Layer

TRAIN, EVAL = "train", "eval"


class Model:
    """An ordered stack of layers bound to a per-sample ``input_shape``.

    Parameters are initialised from ``seed`` in layer order, so two models
    built from the same layer list and seed are bitwise identical.
    """

    def __init__(
        self,
        layers: Sequence[Layer],
        input_shape: Sequence[int],
        seed: int | None = 0,
        dtype=np.float32,
        init: bool = True,
    ) -> None:
        self.layers = list(layers)
        self.input_shape = tuple(int(d) for d in input_shape)
        self.dtype = np.dtype(dtype)
        shape = self.input_shape
        for i, layer in enumerate(self.layers):
            if layer.input_shape is not None and layer.input_shape != shape:
                raise ShapeError(f"layer {i} ({layer.kind}) bound to {layer.input_shape}, receives {shape}")
            shape = layer.bind(shape)
        self.output_shape = shape
        if init:
            rng = np.random.default_rng(seed)
            for layer in self.layers:
                layer.init(rng, self.dtype)
        self._mode: str | None = None

    # -- introspection ------------------------------------------------------
    def parameters(self) -> Iterator[tuple[int, str, Layer]]:
        """Yield ``(layer_index, name, layer)`` in the stable enumeration order."""
        for i, layer in enumerate(self.layers):
            for name in layer.param_names:
                yield i, name, layer

    def num_parameters(self) -> int:
        return sum(layer.params[name].size for _, name, layer in self.parameters())

    def architecture(self) -> list[tuple[int, tuple[int, ...]]]:
        return [(layer.tag, layer.signature()) for layer in self.layers]

    def zero_grad(self) -> None:
        for _, name, layer in self.parameters():
            layer.grads[name][...] = 0

    def clone(self) -> "Model":
        out = copy.deepcopy(self)
        out._mode = None
        out.__dict__.pop("_split_state", None)
        for layer in out.layers:
            layer._cache = None
        return out

    def astype(self, dtype) -> "Model":
        out = self.clone()
        out.dtype = np.dtype(dtype)
        for layer in out.layers:
            for store in (layer.params, layer.grads, layer.buffers):
                for key in store:
                    store[key] = store[key].astype(dtype)
        return out

    def __len__(self) -> int:
        return len(self.layers)

    def __repr__(self) -> str:
        kinds = ", ".join(layer.kind for layer in self.layers)
        return f"Model(input_shape={self.input_shape}, layers=[{kinds}])"

    # -- computation --------------------------------------------------------
    def forward(self, batch: np.ndarray, mode: str = TRAIN) -> np.ndarray:
        if mode not in (TRAIN, EVAL):
            raise ConfigError(f"mode must be 'train' or 'eval', got {mode!r}")
        x = np.asarray(batch)
        if x.shape[1:] != self.input_shape:
            raise ShapeError(f"batch shape {x.shape} does not match (n,) + {self.input_shape}")
        if not np.all(np.isfinite(x)):
            raise NumericError("non-finite values in forward input")
        x = x.astype(self.dtype, copy=False)
        train = mode == TRAIN
        for layer in self.layers:
            x = layer.forward(x, train)
        self._mode = mode
        return x

    def backward(
        self, upstream_grad: np.ndarray, param_grads: bool = True, input_grad: bool = True
    ) -> np.ndarray | None:
        """Backprop through every layer; ``input_grad=False`` skips the final
        (unused) input gradient."""
        if self._mode is None:
            raise StateError("backward called before forward")
        g = np.asarray(upstream_grad, dtype=self.dtype)
        if g.shape[1:] != self.output_shape:
            raise ShapeError(f"upstream grad {g.shape} does not match output (n,) + {self.output_shape}")
        for i in range(len(self.layers) - 1, -1, -1):
            g = self.layers[i].backward(g, param_grads, input_grad or i > 0)
        return g

    def predict(self, batch: np.ndarray) -> np.ndarray:
        return self.forward(batch, EVAL).argmax(axis=1)


def forward(model: Model, batch: np.ndarray, mode: str = TRAIN) -> np.ndarray:
    return model.forward(batch, mode)


def backward(model: Model, upstream_grad: np.ndarray) -> np.ndarray:
    return model.backward(upstream_grad)


def sgd_step(model: Model, lr: float) -> None:
    """Plain SGD on trainable parameters, then reset every gradient to zero."""
    if not lr > 0:
        raise ConfigError(f"learning rate must be positive, got {lr}")
    for _, name, layer in model.parameters():
        if layer.trainable[name]:
            layer.params[name] -= np.asarray(lr, dtype=layer.params[name].dtype) * layer.grads[name]
        layer.grads[name][...] = 0


def softmax_cross_entropy(logits: np.ndarray, labels) -> tuple[float, np.ndarray]:
    """Mean cross-entropy over the batch and its gradient wrt the logits."""
    labels = np.asarray(labels, dtype=np.int64)
    n, c = logits.shape
    if labels.shape != (n,):
        raise DataError(f"expected {n} labels, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise DataError(f"label outside [0, {c})")
    shifted = logits - logits.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - logsum
    loss = -logp[np.arange(n), labels].mean()
    grad = np.exp(logp)
    grad[np.arange(n), labels] -= 1
    return float(loss), grad / n


def mse_loss(output: np.ndarray, target) -> tuple[float, np.ndarray]:
    """Half sum of squared errors, averaged over the batch."""
    diff = output - np.asarray(target, dtype=output.dtype).reshape(output.shape)
    n = output.shape[0]
    return float(0.5 * (diff**2).sum() / n), diff / n


LossFn = Callable[[np.ndarray, np.ndarray], tuple[float, np.ndarray]]


def grad_check(
    model: Model,
    batch: np.ndarray,
    labels,
    eps: float = 1e-4,
    loss_fn: LossFn = softmax_cross_entropy,
) -> float:
    """Max relative error between backprop and central differences.

    Runs on a float64 copy in train mode; ``model`` itself is untouched.
    """
    if not eps > 0:
        raise ConfigError(f"finite-difference step must be positive, got {eps}")
    m = model.astype(np.float64)
    if m.num_parameters() > 10_000:
        raise ConfigError("grad_check is limited to models with at most 10^4 parameters")
    x = np.asarray(batch, dtype=np.float64)

    def loss_at() -> float:
        return loss_fn(m.forward(x, TRAIN), labels)[0]

    m.zero_grad()
    _, g = loss_fn(m.forward(x, TRAIN), labels)
    m.backward(g)
    worst = 0.0
    for _, name, layer in m.parameters():
        p, analytic = layer.params[name], layer.grads[name].copy()
        flat = p.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + eps
            up = loss_at()
            flat[j] = orig - eps
            down = loss_at()
            flat[j] = orig
            numeric = (up - down) / (2 * eps)
            a = analytic.reshape(-1)[j]
            err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            worst = max(worst, err)
    return worst
