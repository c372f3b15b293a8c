"""Layer kinds for the minimal numpy engine.

Each layer is bound to a fixed per-sample input shape when its model is
built.  ``forward`` caches what ``backward`` needs; ``backward`` returns the
input gradient and *accumulates* parameter gradients.
"""

from __future__ import annotations

import math

import numpy as np

from ..errors import ShapeError, StateError

NORM_EPS = 1e-5
NORM_MOMENTUM = 0.1


class Layer:
    kind: str = ""
    tag: int = 0
    param_names: tuple[str, ...] = ()
    buffer_names: tuple[str, ...] = ()

    def __init__(self) -> None:
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self.trainable: dict[str, bool] = {}
        self.buffers: dict[str, np.ndarray] = {}
        self.input_shape: tuple[int, ...] | None = None
        self.output_shape: tuple[int, ...] | None = None
        self._cache = None

    # -- construction -------------------------------------------------------
    def bind(self, input_shape: tuple[int, ...]) -> tuple[int, ...]:
        """Fix the input shape, validate it and return the output shape."""
        self.input_shape = tuple(int(d) for d in input_shape)
        self.output_shape = self._infer(self.input_shape)
        return self.output_shape

    def _infer(self, shape):
        return shape

    def init(self, rng: np.random.Generator, dtype) -> None:
        """Allocate parameters (overridden by parametric layers)."""

    def _add_param(self, name: str, value: np.ndarray, dtype) -> None:
        self.params[name] = np.asarray(value, dtype=dtype)
        self.grads[name] = np.zeros_like(self.params[name])
        self.trainable[name] = True

    def signature(self) -> tuple[int, ...]:
        """Dims stored in checkpoints; enough to rebuild the layer."""
        return self.input_shape

    @classmethod
    def from_signature(cls, dims):
        return cls()

    def arrays(self):
        """Parameters then buffers, in deterministic storage order."""
        for name in self.param_names:
            yield name, self.params[name]
        for name in self.buffer_names:
            yield name, self.buffers[name]

    def _need_cache(self):
        if self._cache is None:
            raise StateError(f"{self.kind}: backward called without a cached forward")
        return self._cache

    def forward(self, x: np.ndarray, train: bool) -> np.ndarray:
        raise NotImplementedError

    def backward(self, g: np.ndarray, param_grads: bool = True, input_grad: bool = True) -> np.ndarray | None:
        raise NotImplementedError


class Dense(Layer):
    kind, tag = "dense", 1
    param_names = ("weight", "bias")

    def __init__(self, in_features: int, out_features: int) -> None:
        super().__init__()
        self.in_features = int(in_features)
        self.out_features = int(out_features)

    def _infer(self, shape):
        if shape != (self.in_features,):
            raise ShapeError(f"dense expects input ({self.in_features},), got {shape}")
        return (self.out_features,)

    def init(self, rng, dtype):
        bound = math.sqrt(6.0 / self.in_features)
        self._add_param("weight", rng.uniform(-bound, bound, (self.out_features, self.in_features)), dtype)
        self._add_param("bias", np.zeros(self.out_features), dtype)

    def signature(self):
        return (self.in_features, self.out_features)

    @classmethod
    def from_signature(cls, dims):
        return cls(*dims)

    def forward(self, x, train):
        self._cache = x
        return x @ self.params["weight"].T + self.params["bias"]

    def backward(self, g, param_grads=True, input_grad=True):
        x = self._need_cache()
        if param_grads:
            self.grads["weight"] += g.T @ x
            self.grads["bias"] += g.sum(axis=0)
        return g @ self.params["weight"] if input_grad else None


class Conv2d(Layer):
    """3x3-style convolution, stride 1, zero 'same' padding."""

    kind, tag = "conv2d", 2
    param_names = ("weight", "bias")

    def __init__(self, in_channels: int, out_channels: int, kernel_size: int = 3) -> None:
        super().__init__()
        if kernel_size % 2 != 1:
            raise ShapeError("conv2d 'same' padding needs an odd kernel size")
        self.in_channels = int(in_channels)
        self.out_channels = int(out_channels)
        self.kernel_size = int(kernel_size)

    def _infer(self, shape):
        if len(shape) != 3 or shape[0] != self.in_channels:
            raise ShapeError(f"conv2d expects ({self.in_channels}, h, w), got {shape}")
        return (self.out_channels, shape[1], shape[2])

    def init(self, rng, dtype):
        k = self.kernel_size
        fan_in = self.in_channels * k * k
        bound = math.sqrt(6.0 / fan_in)
        self._add_param("weight", rng.uniform(-bound, bound, (self.out_channels, self.in_channels, k, k)), dtype)
        self._add_param("bias", np.zeros(self.out_channels), dtype)

    def signature(self):
        return (self.in_channels, self.out_channels, self.kernel_size) + self.input_shape[1:]

    @classmethod
    def from_signature(cls, dims):
        return cls(dims[0], dims[1], dims[2])

    def forward(self, x, train):
        # Channel-first im2col: cols[(c, i, j), (n, y, x)] keeps both matmul operands contiguous.
        n, c, h, w = x.shape
        k, p = self.kernel_size, self.kernel_size // 2
        xc = np.zeros((c, n, h + 2 * p, w + 2 * p), dtype=x.dtype)
        xc[:, :, p : p + h, p : p + w] = x.transpose(1, 0, 2, 3)
        cols = np.empty((c, k, k, n, h, w), dtype=x.dtype)
        for i in range(k):
            for j in range(k):
                cols[:, i, j] = xc[:, :, i : i + h, j : j + w]
        cols = cols.reshape(c * k * k, -1)
        out = self.params["weight"].reshape(self.out_channels, -1) @ cols
        out += self.params["bias"][:, None]
        self._cache = (cols, x.shape)
        return np.ascontiguousarray(out.reshape(self.out_channels, n, h, w).transpose(1, 0, 2, 3))

    def backward(self, g, param_grads=True, input_grad=True):
        cols, (n, c, h, w) = self._need_cache()
        k, p = self.kernel_size, self.kernel_size // 2
        gt = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(self.out_channels, -1)
        if param_grads:
            self.grads["weight"] += (cols @ gt.T).T.reshape(self.params["weight"].shape)
            self.grads["bias"] += gt.sum(axis=1)
        if not input_grad:
            return None
        wt = np.ascontiguousarray(self.params["weight"].reshape(self.out_channels, -1).T)
        dcols = (wt @ gt).reshape(c, k, k, n, h, w)
        dxc = np.zeros((c, n, h + 2 * p, w + 2 * p), dtype=g.dtype)
        for i in range(k):
            for j in range(k):
                dxc[:, :, i : i + h, j : j + w] += dcols[:, i, j]
        return np.ascontiguousarray(dxc[:, :, p : p + h, p : p + w].transpose(1, 0, 2, 3))


class ReLU(Layer):
    kind, tag = "relu", 3

    def forward(self, x, train):
        mask = x > 0
        self._cache = mask
        return x * mask

    def backward(self, g, param_grads=True, input_grad=True):
        return g * self._need_cache()


class Flatten(Layer):
    kind, tag = "flatten", 4

    def _infer(self, shape):
        return (int(np.prod(shape)),)

    def forward(self, x, train):
        self._cache = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, g, param_grads=True, input_grad=True):
        return g.reshape(self._need_cache())


class ScaleNorm(Layer):
    """Per-channel batch normalisation with learnable scale and shift.

    Accepts ``(n, c)`` or ``(n, c, h, w)`` batches.  Train mode normalises with
    batch statistics and updates the running ones; eval mode uses the running
    statistics.
    """

    kind, tag = "scalenorm", 5
    param_names = ("gamma", "beta")
    buffer_names = ("running_mean", "running_var")

    def __init__(self, channels: int) -> None:
        super().__init__()
        self.channels = int(channels)

    def _infer(self, shape):
        if len(shape) not in (1, 3) or shape[0] != self.channels:
            raise ShapeError(f"scalenorm expects ({self.channels},) or ({self.channels}, h, w), got {shape}")
        return shape

    def init(self, rng, dtype):
        self._add_param("gamma", np.ones(self.channels), dtype)
        self._add_param("beta", np.zeros(self.channels), dtype)
        self.buffers["running_mean"] = np.zeros(self.channels, dtype=dtype)
        self.buffers["running_var"] = np.ones(self.channels, dtype=dtype)

    @classmethod
    def from_signature(cls, dims):
        return cls(dims[0])

    def _view(self, v, ndim):
        return v.reshape((1, -1) + (1,) * (ndim - 2))

    def forward(self, x, train):
        axes = (0,) if x.ndim == 2 else (0, 2, 3)
        gamma = self._view(self.params["gamma"], x.ndim)
        beta = self._view(self.params["beta"], x.ndim)
        if train:
            mean = x.mean(axis=axes)
            var = x.var(axis=axes)
            m = NORM_MOMENTUM
            rm, rv = self.buffers["running_mean"], self.buffers["running_var"]
            rm[...] = (1 - m) * rm + m * mean
            rv[...] = (1 - m) * rv + m * var
        else:
            mean = self.buffers["running_mean"]
            var = self.buffers["running_var"]
        inv_std = 1.0 / np.sqrt(var + NORM_EPS)
        xhat = (x - self._view(mean, x.ndim)) * self._view(inv_std, x.ndim)
        self._cache = (xhat, inv_std.astype(x.dtype), axes, train)
        return gamma * xhat + beta

    def backward(self, g, param_grads=True, input_grad=True):
        xhat, inv_std, axes, train = self._need_cache()
        if param_grads:
            self.grads["gamma"] += (g * xhat).sum(axis=axes)
            self.grads["beta"] += g.sum(axis=axes)
        dxhat = g * self._view(self.params["gamma"], g.ndim)
        inv = self._view(inv_std, g.ndim)
        if not train:
            return dxhat * inv
        count = g.size // self.channels
        s1 = self._view(dxhat.sum(axis=axes), g.ndim)
        s2 = self._view((dxhat * xhat).sum(axis=axes), g.ndim)
        return inv * (dxhat - s1 / count - xhat * s2 / count)


LAYER_KINDS: dict[int, type[Layer]] = {cls.tag: cls for cls in (Dense, Conv2d, ReLU, Flatten, ScaleNorm)}
