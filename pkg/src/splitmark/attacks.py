"""Watermark-removal attacks and Neural-Cleanse-style trigger reverse engineering.

Every attack works on private copies; the inputs are never mutated.  Reversed
triggers share the SMT1 layout with client trigger files::

    "SMT1" | version u16 | class u16 | rank u8 | dims u32[rank] (c, h, w)
           | mask f32[h*w] | pattern f32[c*h*w] | asr f32 | crc32 u32
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .binfmt import Writer, frame, unframe
from .data import STEALTH_BUDGET, LabeledDataset, TriggerPattern, apply_trigger
from .errors import ConfigError, FormatError
from .nn import Model, sgd_step, softmax_cross_entropy
from .sfl import SplitModelPair, client_backward, client_forward, server_step

TRIGGER_MAGIC = b"SMT1"
_INT_SCHEME = re.compile(r"^int(\d+)$")


@dataclass
class AttackConfig:
    finetune_epochs: int | None = None  # None: a quarter of the training rounds
    finetune_lr: float = 0.05
    finetune_fraction: float = 0.25
    batch_size: int = 32
    prune_rates: tuple[float, ...] = (0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9)
    quant_schemes: tuple[str, ...] = ("fp16", "int32", "int8")
    nc_iterations: int = 500
    nc_lambda: float = 0.01
    nc_step: float = 0.5
    nc_probe_size: int = 128
    anomaly_threshold: float = 2.0
    attacker_fraction: float = 0.2
    unlearn_fraction: float = 0.2

    def __post_init__(self) -> None:
        self.prune_rates = tuple(float(r) for r in self.prune_rates)
        self.quant_schemes = tuple(str(s) for s in self.quant_schemes)
        for name in ("finetune_fraction", "attacker_fraction", "unlearn_fraction"):
            if not 0 <= getattr(self, name) <= 1:
                raise ConfigError(f"{name} must lie in [0, 1]")
        if any(not 0 <= r <= 1 for r in self.prune_rates):
            raise ConfigError("pruning rates must lie in [0, 1]")
        for scheme in self.quant_schemes:
            quant_bits(scheme)
        if self.finetune_epochs is not None and self.finetune_epochs < 0:
            raise ConfigError("finetune_epochs must be non-negative")
        if self.finetune_lr < 0 or self.nc_lambda < 0 or self.nc_step <= 0:
            raise ConfigError("finetune_lr and nc_lambda must be >= 0, nc_step > 0")
        if self.nc_iterations < 1 or self.batch_size < 1 or self.nc_probe_size < 1:
            raise ConfigError("nc_iterations, batch_size and nc_probe_size must be positive")

    def epochs_for(self, rounds: int) -> int:
        if self.finetune_epochs is not None:
            return self.finetune_epochs
        return int(math.floor(self.finetune_fraction * rounds + 0.5))


# -- fine-tuning ----------------------------------------------------------------


def _supervised_epochs(
    pair: SplitModelPair, data: LabeledDataset, epochs: int, lr: float, batch_size: int, seed: int
) -> SplitModelPair:
    if lr < 0 or epochs < 0:
        raise ConfigError("epochs and lr must be non-negative")
    out = pair.clone()
    if epochs == 0 or lr == 0 or len(data) == 0:
        return out
    for epoch in range(epochs):
        order = np.random.default_rng([seed, epoch]).permutation(len(data))
        for start in range(0, len(order), batch_size):
            idx = order[start : start + batch_size]
            msg = client_forward(out.bottom, data.samples[idx], data.labels[idx], round=epoch)
            reply = server_step(out.top, msg)
            sgd_step(out.top, lr)
            client_backward(out.bottom, reply)
            sgd_step(out.bottom, lr)
    return out


def finetune(
    pair: SplitModelPair,
    clean: LabeledDataset,
    epochs: int,
    lr: float,
    batch_size: int = 32,
    seed: int = 0,
) -> SplitModelPair:
    """Plain supervised retraining through the split protocol (no watermark loss)."""
    return _supervised_epochs(pair, clean, epochs, lr, batch_size, seed)


# -- pruning and quantization -----------------------------------------------------


def prune(model: Model, rate: float) -> Model:
    """Zero the ``ceil(rate * n)`` smallest-magnitude parameters, pooled over every tensor."""
    if not 0 <= rate <= 1:
        raise ConfigError(f"pruning rate must lie in [0, 1], got {rate}")
    out = model.clone()
    params = [layer.params[name] for _, name, layer in out.parameters()]
    flat = np.concatenate([p.reshape(-1) for p in params]) if params else np.zeros(0)
    count = int(math.ceil(rate * flat.size - 1e-9))
    if count == 0:
        return out
    order = np.argsort(np.abs(flat), kind="stable")
    keep = np.ones(flat.size, dtype=bool)
    keep[order[:count]] = False
    offset = 0
    for p in params:
        n = p.size
        p.reshape(-1)[~keep[offset : offset + n]] = 0
        offset += n
    return out


def prune_pair(pair: SplitModelPair, rate: float) -> SplitModelPair:
    return SplitModelPair(prune(pair.bottom, rate), prune(pair.top, rate), pair.split_index)


def quant_bits(scheme: str) -> int | None:
    """``None`` for fp16, else the integer width k in [2, 32]."""
    if scheme == "fp16":
        return None
    match = _INT_SCHEME.match(scheme)
    if not match:
        raise ConfigError(f"unknown quantization scheme {scheme!r}")
    k = int(match.group(1))
    if not 2 <= k <= 32:
        raise ConfigError(f"int-k needs k in [2, 32], got {k}")
    return k


def quantize_array(arr: np.ndarray, scheme: str) -> np.ndarray:
    k = quant_bits(scheme)
    if k is None:
        return arr.astype(np.float16).astype(arr.dtype)
    peak = float(np.max(np.abs(arr))) if arr.size else 0.0
    if peak == 0:
        return arr.copy()
    levels = 2 ** (k - 1) - 1
    step = peak / levels
    q = np.clip(np.rint(arr.astype(np.float64) / step), -levels, levels)
    return (q * step).astype(arr.dtype)


def quantize(model: Model, scheme: str) -> Model:
    """Quantize-dequantize every parameter tensor (buffers are left as they are)."""
    out = model.clone()
    for _, name, layer in out.parameters():
        layer.params[name] = quantize_array(layer.params[name], scheme)
    return out


def quantize_pair(pair: SplitModelPair, scheme: str) -> SplitModelPair:
    return SplitModelPair(quantize(pair.bottom, scheme), quantize(pair.top, scheme), pair.split_index)


# -- Neural Cleanse ----------------------------------------------------------------


@dataclass
class ReversedTrigger:
    target_class: int
    mask: np.ndarray
    pattern: np.ndarray
    asr: float = float("nan")
    mask_l1: float = field(init=False)

    def __post_init__(self) -> None:
        self.mask = np.asarray(self.mask, dtype=np.float32)
        self.pattern = np.asarray(self.pattern, dtype=np.float32)
        if self.mask.ndim != 2 or self.pattern.ndim != 3 or self.pattern.shape[1:] != self.mask.shape:
            raise ConfigError(f"mask {self.mask.shape} and pattern {self.pattern.shape} disagree")
        self.mask_l1 = float(self.mask.sum())


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _logits(pair: SplitModelPair, x: np.ndarray) -> np.ndarray:
    return pair.top.forward(pair.bottom.forward(x, "eval"), "eval")


def stamped_hit_rate(pair: SplitModelPair, trig, samples: np.ndarray, target: int) -> float:
    if len(samples) == 0:
        return float("nan")
    return float(np.mean(pair.predict(apply_trigger(samples, trig)) == target))


def reverse_trigger(
    pair: SplitModelPair,
    target: int,
    probe: LabeledDataset,
    cfg: AttackConfig | None = None,
    seed: int = 0,
) -> ReversedTrigger:
    """Smallest mask (with pattern) that flips probe samples to ``target``.

    Minimises ``CE + lambda * |mask|_1`` over sigmoid-parameterised mask and
    pattern by plain gradient descent on one half of the non-target probe
    samples; the attack success rate is measured on the other half.  The
    iterate with the lowest objective is returned.
    """
    cfg = cfg or AttackConfig()
    pool = probe.samples[probe.labels != target]
    if len(pool) < 2:
        raise ConfigError(f"probe needs at least two samples outside class {target}")
    rng = np.random.default_rng([seed, target])
    pool = pool[rng.permutation(len(pool))]
    half = len(pool) // 2
    fit, held = pool[: min(half, cfg.nc_probe_size)].astype(np.float64), pool[half:]
    c, h, w = probe.shape
    m_raw = rng.normal(0.0, 0.1, size=(h, w)) - 2.0
    p_raw = rng.normal(0.0, 0.1, size=(c, h, w))
    labels = np.full(len(fit), target)
    best = (np.inf, None, None)
    for _ in range(cfg.nc_iterations):
        mask, pattern = _sigmoid(m_raw), _sigmoid(p_raw)
        x = (1 - mask) * fit + mask * pattern
        z = pair.bottom.forward(x, "eval")
        ce, g = softmax_cross_entropy(pair.top.forward(z, "eval"), labels)
        objective = ce + cfg.nc_lambda * mask.sum()
        if objective < best[0]:
            best = (objective, mask.copy(), pattern.copy())
        gz = pair.top.backward(g, param_grads=False)
        gx = pair.bottom.backward(gz, param_grads=False).astype(np.float64)
        g_mask = (gx * (pattern - fit)).sum(axis=(0, 1)) + cfg.nc_lambda
        g_pattern = (gx * mask).sum(axis=0)
        m_raw -= cfg.nc_step * g_mask * mask * (1 - mask)
        p_raw -= cfg.nc_step * g_pattern * pattern * (1 - pattern)
    _, mask, pattern = best
    trig = ReversedTrigger(target, mask, pattern)
    trig.asr = stamped_hit_rate(pair, trig, held, target)
    return trig


def anomaly_index(norms: Sequence[float], threshold: float = 2.0) -> tuple[np.ndarray, list[int]]:
    """MAD outlier score per class; small-norm outliers above ``threshold`` are flagged."""
    x = np.asarray(norms, dtype=np.float64)
    if x.size < 3:
        raise ConfigError("anomaly index needs at least three classes")
    med = float(np.median(x))
    mad = float(np.median(np.abs(x - med)))
    if mad == 0:
        return np.zeros_like(x), []
    index = np.abs(x - med) / (1.4826 * mad)
    flagged = [int(i) for i in np.flatnonzero((index > threshold) & (x < med))]
    return index, flagged


@dataclass
class CleanseReport:
    triggers: list[ReversedTrigger]
    index: np.ndarray
    flagged: list[int]


def neural_cleanse(
    pair: SplitModelPair, probe: LabeledDataset, cfg: AttackConfig | None = None, seed: int = 0
) -> CleanseReport:
    cfg = cfg or AttackConfig()
    triggers = [reverse_trigger(pair, k, probe, cfg, seed) for k in range(probe.num_classes)]
    index, flagged = anomaly_index([t.mask_l1 for t in triggers], cfg.anomaly_threshold)
    return CleanseReport(triggers, index, flagged)


def unlearn(
    pair: SplitModelPair,
    triggers: Sequence,
    clean: LabeledDataset,
    epochs: int,
    lr: float,
    fraction: float = 0.2,
    batch_size: int = 32,
    seed: int = 0,
) -> SplitModelPair:
    """Fine-tune on clean data plus trigger-stamped copies that keep their true labels.

    For each trigger a ``fraction`` share of the clean samples is stamped and
    appended.  Works with reversed triggers and, as a sanity oracle, with a
    client's real trigger.
    """
    rng = np.random.default_rng([seed, 0x5EED])
    data = clean
    for trig in triggers:
        idx = np.sort(rng.choice(len(clean), size=int(round(fraction * len(clean))), replace=False))
        stamped = LabeledDataset(apply_trigger(clean.samples[idx], trig), clean.labels[idx], clean.num_classes)
        data = data.concat(stamped)
    return _supervised_epochs(pair, data, epochs, lr, batch_size, seed)


def project_to_budget(trig: ReversedTrigger, owner_id: int = 0, seed: int = 0) -> TriggerPattern:
    """Binarise a reversed trigger into a valid client trigger within the stealth budget."""
    h, w = trig.mask.shape
    keep = int(math.floor(STEALTH_BUDGET * h * w))
    order = np.argsort(-trig.mask.reshape(-1), kind="stable")[:keep]
    mask = np.zeros(h * w, dtype=np.float32)
    mask[order] = 1
    mask = mask.reshape(h, w)
    pattern = np.clip(trig.pattern, 0, 1) * mask[None]
    return TriggerPattern(mask, pattern, trig.target_class, owner_id, seed)


# -- SMT1 -------------------------------------------------------------------------


def trigger_to_bytes(trig) -> bytes:
    asr = getattr(trig, "asr", float("nan"))
    w = Writer().u16(int(trig.target_class)).dims(trig.pattern.shape)
    w.array_f32(trig.mask).array_f32(trig.pattern).f32(asr)
    return frame(TRIGGER_MAGIC, w.payload())


def trigger_from_bytes(blob: bytes) -> ReversedTrigger:
    r = unframe(TRIGGER_MAGIC, blob)
    target = r.u16()
    dims = r.dims()
    if len(dims) != 3:
        raise FormatError(f"SMT1 expects a rank-3 pattern, got rank {len(dims)}")
    mask = r.array_f32(dims[1:])
    pattern = r.array_f32(dims)
    asr = r.f32()
    r.done()
    if mask.min(initial=0) < 0 or mask.max(initial=0) > 1 or pattern.min(initial=0) < 0 or pattern.max(initial=0) > 1:
        raise FormatError("SMT1 mask and pattern must lie in [0, 1]")
    return ReversedTrigger(target, mask, pattern, asr)


def save_trigger(trig, path) -> None:
    Path(path).write_bytes(trigger_to_bytes(trig))


def load_trigger(path) -> ReversedTrigger:
    return trigger_from_bytes(Path(path).read_bytes())


__all__ = [
    "AttackConfig", "ReversedTrigger", "CleanseReport", "finetune", "prune", "prune_pair",
    "quantize", "quantize_pair", "quantize_array", "quant_bits", "reverse_trigger",
    "anomaly_index", "neural_cleanse", "unlearn", "project_to_budget", "stamped_hit_rate",
    "trigger_to_bytes", "trigger_from_bytes", "save_trigger", "load_trigger",
]
