"""Server-side feature watermark and client-side backdoor verification.

The server hides an N-bit signature in the signs of ``w @ M`` where ``w`` is
the concatenation of the scale vectors (gamma) of secretly chosen scalenorm
layers in the top model.  Bits ``b`` in {0, 1} are used in signed form
``s = 2b - 1`` everywhere.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .binfmt import Writer, frame, unframe
from .data import LabeledDataset, apply_trigger, poison_count
from .errors import ConfigError, FormatError, ShapeError, VerificationError
from .nn import Model, sgd_step
from .nn.layers import ScaleNorm

WM_MAGIC = b"SMW1"
DEFAULT_TAU = 0.8


@dataclass
class FeatureWatermark:
    M: np.ndarray
    bits: np.ndarray
    target_layer_ids: tuple[int, ...]
    alpha: float = 0.1
    seed: int = 0

    def __post_init__(self) -> None:
        self.M = np.asarray(self.M, dtype=np.float32)
        self.bits = np.asarray(self.bits, dtype=np.uint8)
        self.target_layer_ids = tuple(int(i) for i in self.target_layer_ids)
        if self.M.ndim != 2 or self.bits.shape != (self.M.shape[1],) or self.n_bits < 1:
            raise ShapeError(f"embedding matrix {self.M.shape} does not match {self.bits.shape} bits")
        if not np.all((self.bits == 0) | (self.bits == 1)):
            raise ConfigError("signature bits must be 0 or 1")
        if np.any(np.all(self.M == 0, axis=0)):
            raise ConfigError("embedding matrix has an all-zero column")
        if self.alpha < 0:
            raise ConfigError("watermark strength alpha must be non-negative")

    @property
    def n_bits(self) -> int:
        return int(self.M.shape[1])

    @property
    def dim(self) -> int:
        return int(self.M.shape[0])

    @property
    def signs(self) -> np.ndarray:
        return 2.0 * self.bits.astype(np.float64) - 1.0


def _target_layers(model: Model, ids: Sequence[int]) -> list[ScaleNorm]:
    layers = []
    for i in ids:
        if not 0 <= i < len(model.layers):
            raise VerificationError(f"target layer {i} missing from a {len(model.layers)}-layer model")
        layer = model.layers[i]
        if not isinstance(layer, ScaleNorm):
            raise ConfigError(f"target layer {i} is {layer.kind}, not scalenorm")
        layers.append(layer)
    return layers


def scalenorm_ids(model: Model) -> list[int]:
    return [i for i, layer in enumerate(model.layers) if isinstance(layer, ScaleNorm)]


def target_weights(model: Model, ids: Sequence[int]) -> np.ndarray:
    """Concatenated gamma vectors of the target layers, in ``ids`` order."""
    return np.concatenate([layer.params["gamma"].astype(np.float64) for layer in _target_layers(model, ids)])


def gen_feature_wm(
    seed: int,
    n_bits: int,
    target_layer_ids: Sequence[int],
    model: Model,
    alpha: float = 0.1,
) -> FeatureWatermark:
    if n_bits < 1:
        raise ConfigError("signature needs at least one bit")
    ids = tuple(target_layer_ids)
    if not ids:
        raise ConfigError("no target layers given")
    d = sum(layer.channels for layer in _target_layers(model, ids))
    if d < n_bits / 4:
        warnings.warn(f"{n_bits} bits in {d} scale weights exceeds the d >= N/4 capacity heuristic", stacklevel=2)
    rng = np.random.default_rng(seed)
    M = rng.standard_normal((d, n_bits)).astype(np.float32)
    bits = rng.integers(0, 2, size=n_bits)
    return FeatureWatermark(M, bits, ids, alpha, seed)


def wm_response(w: np.ndarray, M: np.ndarray) -> np.ndarray:
    """``y_i = w . M[:, i]``."""
    w = np.asarray(w, dtype=np.float64)
    M = np.asarray(M, dtype=np.float64)
    if w.shape != (M.shape[0],):
        raise ShapeError(f"weight vector {w.shape} does not match embedding matrix {M.shape}")
    return w @ M


def wm_loss(w: np.ndarray, M: np.ndarray, s: np.ndarray) -> tuple[float, np.ndarray]:
    """Hinge loss ``sum_i max(1 - s_i y_i, 0)`` and its (sub)gradient wrt ``w``."""
    y = wm_response(w, M)
    margin = 1.0 - np.asarray(s, dtype=np.float64) * y
    active = margin > 0
    grad = np.asarray(M, dtype=np.float64)[:, active] @ (-np.asarray(s, dtype=np.float64)[active])
    return float(margin[active].sum()), grad


def watermark_step(top: Model, fw: FeatureWatermark, lr: float) -> float:
    """One SGD step on ``alpha * L_WM`` restricted to the target gammas.

    Returns the watermark loss before the step.  Other gradients in ``top``
    are assumed already consumed (zero).
    """
    layers = _target_layers(top, fw.target_layer_ids)
    loss, grad = wm_loss(target_weights(top, fw.target_layer_ids), fw.M, fw.signs)
    if fw.alpha > 0 and loss > 0:
        offset = 0
        for layer in layers:
            n = layer.channels
            layer.grads["gamma"] += (fw.alpha * grad[offset : offset + n]).astype(layer.grads["gamma"].dtype)
            offset += n
        sgd_step(top, lr)
    return loss


def theta_f(w: np.ndarray, fw: FeatureWatermark) -> float:
    y = wm_response(w, fw.M)
    failed = np.heaviside(-fw.signs * y, 1.0)
    # (N - sum H) / N rather than 1 - mean(H): same value, exact for every count
    return float((failed.size - failed.sum()) / failed.size)


def verify_top(top: Model, fw: FeatureWatermark) -> float:
    """Fraction of signature bits whose response sign matches (H(0) counts as failure)."""
    return theta_f(target_weights(top, fw.target_layer_ids), fw)


# -- client side --------------------------------------------------------------


@dataclass
class BottomVerification:
    theta_B: float
    decision: bool
    tau: float
    n_triggered: int
    clean_acc: float
    n_clean: int


def predict(bottom: Model, top: Model, x: np.ndarray, batch_size: int = 256) -> np.ndarray:
    out = [top.forward(bottom.forward(x[i : i + batch_size], "eval"), "eval").argmax(axis=1)
           for i in range(0, len(x), batch_size)]
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


def triggered_rate(bottom: Model, top: Model, trig, samples: np.ndarray, target: int) -> float:
    if len(samples) == 0:
        raise VerificationError("no samples left to trigger")
    preds = predict(bottom, top, apply_trigger(samples, trig))
    return float(np.mean(preds == target))


def verify_bottom(
    bottom_sus: Model,
    top: Model,
    trig,
    test: LabeledDataset,
    rho: float = 0.5,
    tau: float = DEFAULT_TAU,
    seed: int = 0,
) -> BottomVerification:
    """Trigger a random ``rho`` share of the test set and measure the target-class hit rate.

    Samples whose true label already is the target never enter the triggered
    subset; the untouched remainder gives the clean accuracy.
    """
    target = int(trig.target_class)
    eligible = np.flatnonzero(test.labels != target)
    count = min(poison_count(rho, len(test)), len(eligible))
    if count == 0:
        raise VerificationError("triggered subset is empty")
    chosen = np.random.default_rng(seed).choice(eligible, size=count, replace=False)
    rest = np.setdiff1d(np.arange(len(test)), chosen)
    theta = triggered_rate(bottom_sus, top, trig, test.samples[chosen], target)
    clean_acc = float(np.mean(predict(bottom_sus, top, test.samples[rest]) == test.labels[rest])) if rest.size else float("nan")
    return BottomVerification(theta, theta >= tau, tau, int(count), clean_acc, int(rest.size))


@dataclass
class VerificationReport:
    theta_F: float | None
    theta_B: dict[int, float] = field(default_factory=dict)
    tau: float = DEFAULT_TAU
    decision: dict[int, bool] = field(default_factory=dict)
    n_triggered: dict[int, int] = field(default_factory=dict)

    def __post_init__(self) -> None:
        for k, theta in self.theta_B.items():
            self.decision.setdefault(k, theta >= self.tau)
            if self.decision[k] != (theta >= self.tau):
                raise VerificationError(f"decision for client {k} contradicts theta_B >= tau")

    def to_json(self) -> str:
        return json.dumps(
            {
                "theta_F": None if self.theta_F is None else round(self.theta_F, 4),
                "theta_B": {str(k): round(v, 4) for k, v in self.theta_B.items()},
                "tau": self.tau,
                "decision": {str(k): v for k, v in self.decision.items()},
                "n_triggered": {str(k): v for k, v in self.n_triggered.items()},
            },
            indent=2,
        )


@dataclass
class AuditResult:
    passed: bool
    triggered_rate: float
    clean_rate: float
    declared_class: int
    n_probes: int


def free_rider_audit(
    claims: dict[int, tuple[object, int]],
    pair,
    probe: LabeledDataset,
    tau: float = DEFAULT_TAU,
) -> dict[int, AuditResult]:
    """Check each client's disclosed ``(trigger, declared class)`` against the model.

    A claim passes when triggered probes hit the declared class at rate
    ``>= tau`` while the same clean probes do not.
    """
    out = {}
    for client, (trig, declared) in claims.items():
        declared = int(declared)
        probes = probe.samples[probe.labels != declared]
        if len(probes) == 0:
            out[client] = AuditResult(False, 0.0, 0.0, declared, 0)
            continue
        hit = triggered_rate(pair.bottom, pair.top, trig, probes, declared)
        clean = float(np.mean(predict(pair.bottom, pair.top, probes) == declared))
        out[client] = AuditResult(hit >= tau and clean < tau, hit, clean, declared, len(probes))
    return out


# -- SMW1 -----------------------------------------------------------------------


def wm_to_bytes(fw: FeatureWatermark) -> bytes:
    w = Writer().u64(fw.seed).u32(fw.n_bits).u32(fw.dim).pack("d", fw.alpha)
    w.u16(len(fw.target_layer_ids))
    for i in fw.target_layer_ids:
        w.u16(i)
    w.array_f32(fw.M).raw(np.packbits(fw.bits, bitorder="little").tobytes())
    return frame(WM_MAGIC, w.payload())


def wm_from_bytes(blob: bytes) -> FeatureWatermark:
    r = unframe(WM_MAGIC, blob)
    seed, n_bits, d = r.u64(), r.u32(), r.u32()
    (alpha,) = r.unpack("d")
    ids = tuple(r.u16() for _ in range(r.u16()))
    M = r.array_f32((d, n_bits))
    packed = np.frombuffer(r.raw((n_bits + 7) // 8), dtype=np.uint8)
    r.done()
    bits = np.unpackbits(packed, bitorder="little")[:n_bits]
    try:
        return FeatureWatermark(M, bits, ids, alpha, seed)
    except (ConfigError, ShapeError) as exc:
        raise FormatError(f"SMW1 content invalid: {exc}") from exc


def save_wm(fw: FeatureWatermark, path) -> None:
    Path(path).write_bytes(wm_to_bytes(fw))


def load_wm(path) -> FeatureWatermark:
    return wm_from_bytes(Path(path).read_bytes())


__all__ = [
    "FeatureWatermark", "gen_feature_wm", "wm_response", "wm_loss", "watermark_step",
    "verify_top", "verify_bottom", "free_rider_audit", "VerificationReport",
    "BottomVerification", "AuditResult", "save_wm", "load_wm", "wm_to_bytes", "wm_from_bytes",
    "scalenorm_ids", "target_weights", "predict",
]
