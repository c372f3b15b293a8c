"""Split federated learning: client/server message protocol, FedAvg and training.

Each round the server hands the global bottom model to every client.  A
client pushes smashed data (and plaintext labels) through ``client_forward``,
the server runs ``server_step`` on the top model and returns the split-layer
gradient, and the client finishes backprop with ``client_backward``.  After
serving a client the server takes one watermark step on the top model; the
round ends with FedAvg over the client bottoms.
"""

from __future__ import annotations

import math
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .binfmt import Writer, frame, unframe
from .data import LabeledDataset
from .errors import AggregationError, ConfigError, FormatError, ShapeError, StateError
from .nn import Conv2d, Dense, Flatten, Model, ReLU, ScaleNorm, sgd_step, softmax_cross_entropy
from .watermark import FeatureWatermark, watermark_step

MSG_MAGIC = b"SMK1"
TAG_FORWARD, TAG_BACKWARD = 1, 2


# -- models -------------------------------------------------------------------


def build_reference_model(
    input_shape: Sequence[int] = (1, 16, 16),
    num_classes: int = 4,
    bottom_channels: int = 16,
    top_channels: int = 4,
    hidden: int = 256,
    seed: int = 0,
) -> Model:
    """conv/scalenorm/relu stem, conv/scalenorm/relu, then a scalenormed dense head."""
    c, h, w = input_shape
    layers = [
        Conv2d(c, bottom_channels), ScaleNorm(bottom_channels), ReLU(),
        Conv2d(bottom_channels, top_channels), ScaleNorm(top_channels), ReLU(),
        Flatten(),
        Dense(top_channels * h * w, hidden), ScaleNorm(hidden), ReLU(),
        Dense(hidden, num_classes),
    ]
    return Model(layers, input_shape, seed=seed)


DEFAULT_SPLIT = 3


@dataclass
class SplitModelPair:
    bottom: Model
    top: Model
    split_index: int

    def __post_init__(self) -> None:
        if self.bottom.output_shape != self.top.input_shape:
            raise ShapeError(f"bottom output {self.bottom.output_shape} != top input {self.top.input_shape}")
        if self.split_index != len(self.bottom.layers):
            raise ShapeError(f"split index {self.split_index} but bottom has {len(self.bottom.layers)} layers")

    def monolithic(self) -> Model:
        """A model view whose layers are the very objects of bottom then top."""
        return Model(self.bottom.layers + self.top.layers, self.bottom.input_shape, init=False, dtype=self.bottom.dtype)

    def clone(self) -> "SplitModelPair":
        return SplitModelPair(self.bottom.clone(), self.top.clone(), self.split_index)

    def predict(self, x: np.ndarray, batch_size: int = 256) -> np.ndarray:
        from .watermark import predict

        return predict(self.bottom, self.top, x, batch_size)

    def accuracy(self, ds: LabeledDataset) -> float:
        return float(np.mean(self.predict(ds.samples) == ds.labels))


def split_model(model: Model, split_index: int = DEFAULT_SPLIT) -> SplitModelPair:
    if not 0 < split_index < len(model.layers):
        raise ConfigError(f"split index must be in (0, {len(model.layers)})")
    full = model.clone()
    bottom = Model(full.layers[:split_index], full.input_shape, init=False, dtype=full.dtype)
    top = Model(full.layers[split_index:], bottom.output_shape, init=False, dtype=full.dtype)
    return SplitModelPair(bottom, top, split_index)


# -- messages -----------------------------------------------------------------


@dataclass
class ForwardMsg:
    client_id: int
    round: int
    activations: np.ndarray
    labels: np.ndarray

    def __post_init__(self) -> None:
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.activations) != len(self.labels):
            raise ShapeError(f"{len(self.activations)} activations but {len(self.labels)} labels")


@dataclass
class BackwardMsg:
    client_id: int
    round: int
    split_grad: np.ndarray
    loss_value: float


def _write_tensor(w: Writer, arr: np.ndarray) -> None:
    w.dims(arr.shape).array_f32(arr)


def encode_message(msg: ForwardMsg | BackwardMsg) -> bytes:
    """SMK1-framed message: tag u8, client u16, round u32, then the tensor(s)."""
    w = Writer()
    if isinstance(msg, ForwardMsg):
        w.u8(TAG_FORWARD).u16(msg.client_id).u32(msg.round)
        _write_tensor(w, msg.activations)
        w.u32(len(msg.labels)).array_u16(msg.labels)
    else:
        w.u8(TAG_BACKWARD).u16(msg.client_id).u32(msg.round)
        _write_tensor(w, msg.split_grad)
        w.pack("d", msg.loss_value)
    return frame(MSG_MAGIC, w.payload())


def decode_message(blob: bytes) -> ForwardMsg | BackwardMsg:
    r = unframe(MSG_MAGIC, blob)
    tag, client, rnd = r.u8(), r.u16(), r.u32()
    if tag == TAG_FORWARD:
        z = r.array_f32(r.dims())
        labels = r.array_u16(r.u32())
        r.done()
        return ForwardMsg(client, rnd, z, labels)
    if tag == TAG_BACKWARD:
        g = r.array_f32(r.dims())
        (loss,) = r.unpack("d")
        r.done()
        return BackwardMsg(client, rnd, g, loss)
    raise FormatError(f"unknown message tag {tag}")


# -- protocol -----------------------------------------------------------------


def client_forward(
    bottom: Model,
    batch: np.ndarray,
    labels,
    dp: tuple[float, float] | None = None,
    rng: np.random.Generator | None = None,
    client_id: int = 0,
    round: int = 0,
) -> ForwardMsg:
    """Smashed data for one batch; with ``dp=(sigma, C)`` and sigma > 0 it is
    clipped to [-C, C] elementwise and then perturbed with N(0, sigma^2)."""
    z = bottom.forward(batch, "train")
    clip_mask = None
    if dp is not None and dp[0] > 0:
        sigma, bound = dp
        if bound <= 0:
            raise ConfigError("DP clip bound must be positive")
        rng = rng if rng is not None else np.random.default_rng()
        clip_mask = np.abs(z) <= bound
        z = np.clip(z, -bound, bound) + rng.normal(0.0, sigma, size=z.shape).astype(z.dtype)
    bottom._split_state = (client_id, round, z.shape, clip_mask)
    return ForwardMsg(client_id, round, z, labels)


def server_step(top: Model, msg: ForwardMsg) -> BackwardMsg:
    """Forward the smashed data, backprop the cross-entropy and return dL/dz."""
    logits = top.forward(msg.activations, "train")
    loss, g = softmax_cross_entropy(logits, msg.labels)
    split_grad = top.backward(g)
    return BackwardMsg(msg.client_id, msg.round, split_grad, loss)


def client_backward(bottom: Model, msg: BackwardMsg) -> None:
    state = getattr(bottom, "_split_state", None)
    if state is None:
        raise StateError("client_backward without a cached client_forward")
    client, rnd, shape, clip_mask = state
    if (client, rnd) != (msg.client_id, msg.round):
        raise StateError(f"gradient for client {msg.client_id} round {msg.round} does not match cached forward")
    if msg.split_grad.shape != shape:
        raise ShapeError(f"split gradient {msg.split_grad.shape} != activations {shape}")
    g = msg.split_grad if clip_mask is None else msg.split_grad * clip_mask
    bottom.backward(g, input_grad=False)


def fedavg(models: Sequence[Model], weights: Sequence[float] | None = None) -> Model:
    """Weight-normalised average of every parameter and running statistic."""
    if not models:
        raise AggregationError("nothing to aggregate")
    arch = models[0].architecture()
    for m in models[1:]:
        if m.architecture() != arch:
            raise AggregationError("models differ in architecture")
    w = np.ones(len(models)) if weights is None else np.asarray(weights, dtype=np.float64)
    if w.shape != (len(models),) or np.any(w < 0) or w.sum() <= 0:
        raise AggregationError("weights must be non-negative, one per model, not all zero")
    w = w / w.sum()
    out = models[0].clone()
    for li, layer in enumerate(out.layers):
        for name, arr in layer.arrays():
            acc = np.zeros(arr.shape, dtype=np.float64)
            for wk, m in zip(w, models):
                acc += wk * dict(m.layers[li].arrays())[name]
            arr[...] = acc
    out.zero_grad()
    return out


# -- training -----------------------------------------------------------------


@dataclass
class TrainConfig:
    num_clients: int = 4
    rounds: int = 60
    batch_size: int = 16
    lr: float = 0.2
    lr_min_ratio: float = 0.1  # final-round lr as a fraction of lr (cosine); 1.0 keeps it constant
    alpha: float = 0.1
    feature_wm: bool = True
    client_triggers: bool = True
    rho: float = 0.1
    dp_sigma: float = 0.0
    dp_clip: float = 3.0
    seed: int = 0
    wm_per_round: bool = False
    parallel: bool = False
    split_index: int = DEFAULT_SPLIT
    bottom_channels: int = 16
    top_channels: int = 4
    hidden: int = 256

    def __post_init__(self) -> None:
        if self.num_clients < 1:
            raise ConfigError("num_clients must be >= 1")
        if self.rounds < 0 or self.batch_size < 1:
            raise ConfigError("rounds must be >= 0 and batch_size >= 1")
        if self.lr <= 0:
            raise ConfigError("lr must be positive")
        if not 0 < self.lr_min_ratio <= 1:
            raise ConfigError("lr_min_ratio must lie in (0, 1]")
        if self.alpha < 0 or self.dp_sigma < 0:
            raise ConfigError("alpha and dp_sigma must be non-negative")
        if not 0 <= self.rho <= 1:
            raise ConfigError("rho must lie in [0, 1]")
        if self.dp_sigma > 0 and self.dp_clip <= 0:
            raise ConfigError("dp_clip must be positive when DP noise is on")

    def round_lr(self, rnd: int) -> float:
        """Cosine-annealed step size: ``lr`` in round 0, ``lr * lr_min_ratio`` in the last round."""
        if self.rounds <= 1:
            return self.lr
        cos = 0.5 * (1.0 + math.cos(math.pi * rnd / (self.rounds - 1)))
        return self.lr * (self.lr_min_ratio + (1.0 - self.lr_min_ratio) * cos)

    def build_pair(self, input_shape, num_classes: int) -> SplitModelPair:
        model = build_reference_model(
            input_shape, num_classes, self.bottom_channels, self.top_channels, self.hidden, self.seed
        )
        return split_model(model, self.split_index)


@dataclass
class RoundRecord:
    round: int
    client_losses: list[float]
    wm_loss: float
    metrics: dict = field(default_factory=dict)


class RoundHistory(list):
    """One ``RoundRecord`` per completed round."""


def _serve_client(
    cfg: TrainConfig,
    local: Model,
    top: Model,
    data: LabeledDataset,
    client_id: int,
    rnd: int,
    server_lock: threading.Lock | None,
    lr: float,
) -> float:
    order = np.random.default_rng([cfg.seed, rnd, client_id]).permutation(len(data))
    noise_rng = np.random.default_rng([cfg.seed, rnd, client_id, 1])
    dp = (cfg.dp_sigma, cfg.dp_clip) if cfg.dp_sigma > 0 else None
    losses = []
    for start in range(0, len(order), cfg.batch_size):
        idx = order[start : start + cfg.batch_size]
        msg = client_forward(local, data.samples[idx], data.labels[idx], dp, noise_rng, client_id, rnd)
        if server_lock is None:
            reply = server_step(top, msg)
            sgd_step(top, lr)
        else:
            with server_lock:
                reply = server_step(top, msg)
                sgd_step(top, lr)
        client_backward(local, reply)
        sgd_step(local, lr)
        losses.append(reply.loss_value)
    return float(np.mean(losses)) if losses else float("nan")


def train(
    cfg: TrainConfig,
    data: Sequence[LabeledDataset],
    fw: FeatureWatermark | None = None,
    pair: SplitModelPair | None = None,
    evaluate: Callable[[SplitModelPair, int], dict] | None = None,
    passive_clients: Sequence[int] = (),
) -> tuple[SplitModelPair, RoundHistory]:
    """Run ``cfg.rounds`` rounds of split federated training.

    ``data[k]`` is client k's (already poisoned, if applicable) dataset.
    ``passive_clients`` never train and hand the distributed bottom straight
    back (a passive free-rider).  ``evaluate`` is called after each FedAvg.
    """
    if len(data) != cfg.num_clients:
        raise ConfigError(f"{len(data)} client datasets for {cfg.num_clients} clients")
    if pair is None:
        pair = cfg.build_pair(data[0].shape, data[0].num_classes)
    bottom, top = pair.bottom.clone(), pair.top.clone()
    use_wm = fw is not None and cfg.feature_wm and cfg.alpha > 0
    if use_wm and fw.alpha != cfg.alpha:
        fw = FeatureWatermark(fw.M, fw.bits, fw.target_layer_ids, cfg.alpha, fw.seed)
    sizes = [len(d) for d in data]
    passive = set(passive_clients)
    history = RoundHistory()
    lock = threading.Lock() if cfg.parallel else None

    for rnd in range(cfg.rounds):
        lr = cfg.round_lr(rnd)
        locals_ = [bottom.clone() for _ in range(cfg.num_clients)]
        losses = [float("nan")] * cfg.num_clients
        wm_losses: list[float] = []

        def serve(k: int) -> None:
            if k in passive or sizes[k] == 0:
                return
            losses[k] = _serve_client(cfg, locals_[k], top, data[k], k, rnd, lock, lr)
            if use_wm and not cfg.wm_per_round:
                if lock is None:
                    wm_losses.append(watermark_step(top, fw, lr))
                else:
                    with lock:
                        wm_losses.append(watermark_step(top, fw, lr))

        if cfg.parallel:
            with ThreadPoolExecutor(max_workers=cfg.num_clients) as pool:
                list(pool.map(serve, range(cfg.num_clients)))
        else:
            for k in range(cfg.num_clients):
                serve(k)
        if use_wm and cfg.wm_per_round:
            wm_losses.append(watermark_step(top, fw, lr))

        bottom = fedavg(locals_, sizes if sum(sizes) > 0 else None)
        current = SplitModelPair(bottom, top, pair.split_index)
        metrics = evaluate(current, rnd) if evaluate is not None else {}
        history.append(RoundRecord(rnd, losses, float(np.mean(wm_losses)) if wm_losses else 0.0, metrics))

    top.zero_grad()
    return SplitModelPair(bottom, top, pair.split_index), history
