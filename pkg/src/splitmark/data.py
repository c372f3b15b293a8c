"""Synthetic datasets, client trigger patterns and poisoning.

Also owns the SMD1 dataset format::

    "SMD1" | version u16 | num_classes u16 | rank u8 | dims u32[rank] (n, c, h, w)
           | samples f32[n*c*h*w] | labels u16[n] | crc32 u32
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .binfmt import Writer, frame, unframe
from .errors import ConfigError, DataError, FormatError, ShapeError

STEALTH_BUDGET = 0.05
DATASET_MAGIC = b"SMD1"


@dataclass
class LabeledDataset:
    samples: np.ndarray
    labels: np.ndarray
    num_classes: int

    def __post_init__(self) -> None:
        self.samples = np.asarray(self.samples, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.samples.ndim != 4:
            raise ShapeError(f"samples must be (n, c, h, w), got {self.samples.shape}")
        if len(self.samples) != len(self.labels):
            raise DataError(f"{len(self.samples)} samples but {len(self.labels)} labels")
        if self.num_classes < 1:
            raise DataError("num_classes must be positive")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise DataError(f"labels must lie in [0, {self.num_classes})")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(self.samples.shape[1:])

    def subset(self, indices) -> "LabeledDataset":
        idx = np.asarray(indices, dtype=np.int64)
        return LabeledDataset(self.samples[idx], self.labels[idx], self.num_classes)

    def concat(self, other: "LabeledDataset") -> "LabeledDataset":
        return LabeledDataset(
            np.concatenate([self.samples, other.samples]),
            np.concatenate([self.labels, other.labels]),
            self.num_classes,
        )


@dataclass(frozen=True)
class DatasetSpec:
    num_classes: int = 4
    samples_per_class: int = 200
    channels: int = 1
    height: int = 16
    width: int = 16
    separation: float = 0.02
    noise: float = 0.04
    seed: int = 0
    patch: int = 3

    def __post_init__(self) -> None:
        for name in ("num_classes", "samples_per_class", "channels", "height", "width", "patch"):
            if getattr(self, name) < 1:
                raise ConfigError(f"dataset {name} must be positive")
        if min(self.height, self.width) < self.patch:
            raise ConfigError("image dims must be at least the trigger patch size")
        if self.separation <= 0 or self.noise < 0:
            raise ConfigError("separation must be positive and noise non-negative")


def _class_template(rng: np.random.Generator, c: int, h: int, w: int, components: int = 6) -> np.ndarray:
    yy, xx = np.meshgrid(np.arange(h) / h, np.arange(w) / w, indexing="ij")
    out = np.zeros((c, h, w))
    for ch in range(c):
        for _ in range(components):
            fy, fx = rng.uniform(0.0, 2.0, size=2)
            phase = rng.uniform(0, 2 * np.pi)
            out[ch] += rng.normal() * np.cos(2 * np.pi * (fy * yy + fx * xx) + phase)
        out[ch] -= out[ch].mean()
        out[ch] /= out[ch].std() + 1e-12
    return out


def gen_synthetic(spec: DatasetSpec) -> LabeledDataset:
    """Per-class low-frequency templates plus i.i.d. Gaussian pixel noise, in [0, 1]."""
    rng = np.random.default_rng(spec.seed)
    c, h, w = spec.channels, spec.height, spec.width
    templates = np.stack([_class_template(rng, c, h, w) for _ in range(spec.num_classes)])
    labels = np.repeat(np.arange(spec.num_classes), spec.samples_per_class)
    labels = labels[rng.permutation(labels.size)]
    noise = rng.normal(size=(labels.size, c, h, w))
    samples = 0.5 + spec.separation * templates[labels] + spec.noise * noise
    return LabeledDataset(np.clip(samples, 0.0, 1.0), labels, spec.num_classes)


def split_dataset(ds: LabeledDataset, fractions: Sequence[float], seed: int) -> list[LabeledDataset]:
    """Disjoint random split; the last part takes whatever the fractions leave."""
    perm = np.random.default_rng(seed).permutation(len(ds))
    parts, start = [], 0
    for frac in fractions:
        size = int(round(frac * len(ds)))
        parts.append(ds.subset(np.sort(perm[start : start + size])))
        start += size
    parts.append(ds.subset(np.sort(perm[start:])))
    return parts


def partition(ds: LabeledDataset, num_clients: int, seed: int) -> list[LabeledDataset]:
    """Uniform random (IID) partition into ``num_clients`` near-equal shards."""
    if num_clients < 1:
        raise ConfigError("need at least one client")
    perm = np.random.default_rng(seed).permutation(len(ds))
    return [ds.subset(np.sort(chunk)) for chunk in np.array_split(perm, num_clients)]


# -- triggers -----------------------------------------------------------------


@dataclass
class TriggerPattern:
    mask: np.ndarray
    pattern: np.ndarray
    target_class: int
    owner_id: int = 0
    seed: int = 0
    num_classes: int | None = field(default=None, repr=False)

    def __post_init__(self) -> None:
        self.mask = np.asarray(self.mask, dtype=np.float32)
        self.pattern = np.asarray(self.pattern, dtype=np.float32)
        if self.mask.ndim != 2 or self.pattern.ndim != 3 or self.pattern.shape[1:] != self.mask.shape:
            raise ShapeError(f"mask {self.mask.shape} and pattern {self.pattern.shape} disagree")
        if not np.all((self.mask == 0) | (self.mask == 1)):
            raise DataError("trigger mask must be binary")
        if self.pattern.min() < 0 or self.pattern.max() > 1:
            raise DataError("trigger pattern must lie in [0, 1]")
        if self.area_fraction > STEALTH_BUDGET + 1e-12:
            raise DataError(f"trigger covers {self.area_fraction:.3%} of pixels, budget is {STEALTH_BUDGET:.0%}")
        if self.target_class < 0 or (self.num_classes is not None and self.target_class >= self.num_classes):
            raise DataError(f"target class {self.target_class} outside the label space")

    @property
    def area_fraction(self) -> float:
        return float(self.mask.sum() / self.mask.size)


def gen_trigger(
    owner_id: int,
    seed: int,
    shape: tuple[int, int, int],
    num_classes: int,
    patch: int = 3,
    attempt: int = 0,
    corner: int | None = None,
    slot: int = 0,
) -> TriggerPattern:
    """A ``patch x patch`` random binary block in an image corner.

    Corners are numbered 0..3 row-major (top-left, top-right, bottom-left,
    bottom-right); ``None`` draws one from the trigger's own seed.  Each
    corner region is ``2*patch`` wide and holds four non-overlapping slots
    (row-major, mirrored with the corner); slot 0 touches the image corner.
    """
    c, h, w = shape
    if patch * patch > STEALTH_BUDGET * h * w:
        raise ConfigError(f"{patch}x{patch} patch exceeds the stealth budget on {h}x{w} images")
    rng = np.random.default_rng([seed, owner_id, attempt])
    drawn = int(rng.integers(4))
    corner = drawn if corner is None else int(corner)
    if not 0 <= corner < 4 or not 0 <= slot < 4:
        raise ConfigError(f"corner and slot must be 0..3, got {corner} and {slot}")
    if slot and 4 * patch > min(h, w):
        raise ConfigError(f"{h}x{w} images have no room for inner {patch}x{patch} corner slots")
    dy, dx = divmod(slot, 2)
    top = dy * patch if corner < 2 else h - patch - dy * patch
    left = dx * patch if corner % 2 == 0 else w - patch - dx * patch
    mask = np.zeros((h, w), dtype=np.float32)
    mask[top : top + patch, left : left + patch] = 1
    pattern = np.zeros((c, h, w), dtype=np.float32)
    pattern[:, top : top + patch, left : left + patch] = rng.integers(0, 2, size=(c, patch, patch))
    target = int(rng.integers(num_classes))
    return TriggerPattern(mask, pattern, target, owner_id, seed, num_classes)


def _balanced(trig: TriggerPattern) -> bool:
    """At least a third of the patch pixels on and a third off (no near-uniform blocks)."""
    sel = trig.mask.astype(bool)
    on = int(trig.pattern[:, sel].sum())
    size = trig.pattern[:, sel].size
    return 3 * on >= size and 3 * (size - on) >= size


def _too_close(a: TriggerPattern, b: TriggerPattern, min_hamming: int) -> bool:
    if not np.array_equal(a.mask, b.mask):
        return False
    sel = a.mask.astype(bool)
    return int((a.pattern[:, sel] != b.pattern[:, sel]).sum()) < min_hamming


def gen_client_triggers(
    num_clients: int,
    seed: int,
    shape: tuple[int, int, int],
    num_classes: int,
    patch: int = 3,
    min_hamming: int = 5,
) -> list[TriggerPattern]:
    """One trigger per client.

    Clients fill a seeded permutation of the four corners first, then the
    inner corner slots, so no two of the first 16 clients overlap (the first
    four sit at the extreme corners).  A draw is rejected when its pattern is
    nearly uniform or when it occupies the same location as an earlier
    client's trigger and differs from it in fewer than ``min_hamming`` pixels.
    """
    rng = np.random.default_rng([seed, 0xC0])
    corners = rng.permutation(4)
    inner = 1 + rng.permutation(3)
    _, h, w = shape
    slots = [0] + ([int(i) for i in inner] if 4 * patch <= min(h, w) else [])
    out: list[TriggerPattern] = []
    for k in range(num_clients):
        corner, slot = int(corners[k % 4]), slots[(k // 4) % len(slots)]
        for attempt in range(1000):
            trig = gen_trigger(k, seed, shape, num_classes, patch, attempt, corner, slot)
            if _balanced(trig) and not any(_too_close(trig, prev, min_hamming) for prev in out):
                break
        else:
            raise ConfigError("could not draw distinct triggers; use a larger patch or fewer clients")
        out.append(trig)
    return out


def apply_trigger(sample: np.ndarray, trig) -> np.ndarray:
    """Blend ``trig`` into one ``(c, h, w)`` sample or an ``(n, c, h, w)`` batch."""
    x = np.asarray(sample, dtype=np.float32)
    if x.shape[-3:] != trig.pattern.shape:
        raise ShapeError(f"sample {x.shape} does not match trigger {trig.pattern.shape}")
    mask = trig.mask[None, :, :]
    return (1 - mask) * x + mask * trig.pattern


def poison_count(rho: float, n: int) -> int:
    return int(math.floor(rho * n + 0.5))


def _stratified_pick(labels: np.ndarray, target: int, count: int, rng: np.random.Generator) -> np.ndarray:
    pools = [rng.permutation(np.flatnonzero(labels == c)) for c in rng.permutation(int(labels.max(initial=-1)) + 1)
             if c != target]
    # round r of the interleave takes the r-th sample of every pool that still has one
    depth = max((len(p) for p in pools), default=0)
    order = [p[r] for r in range(depth) for p in pools if r < len(p)]
    order += list(rng.permutation(np.flatnonzero(labels == target)))
    return np.asarray(order[:count], dtype=np.int64)


def poison(ds: LabeledDataset, trig: TriggerPattern, rho: float, seed: int) -> tuple[LabeledDataset, np.ndarray]:
    """Trigger and relabel ``round(rho * n)`` samples (ties up); return the chosen indices.

    Picks are spread round-robin over the non-target classes so every source
    class carries the trigger; samples already labelled with the target are
    used only when the other classes run out.
    """
    if not 0 <= rho <= 1:
        raise ConfigError(f"rho must lie in [0, 1], got {rho}")
    count = poison_count(rho, len(ds))
    idx = np.sort(_stratified_pick(ds.labels, trig.target_class, count, np.random.default_rng(seed)))
    samples, labels = ds.samples.copy(), ds.labels.copy()
    if count:
        samples[idx] = apply_trigger(samples[idx], trig)
        labels[idx] = trig.target_class
    return LabeledDataset(samples, labels, ds.num_classes), idx


# -- SMD1 I/O -------------------------------------------------------------------


def dataset_to_bytes(ds: LabeledDataset) -> bytes:
    if ds.num_classes > 0xFFFF:
        raise FormatError("SMD1 stores labels as u16")
    w = Writer().u16(ds.num_classes).dims(ds.samples.shape).array_f32(ds.samples).array_u16(ds.labels)
    return frame(DATASET_MAGIC, w.payload())


def dataset_from_bytes(blob: bytes) -> LabeledDataset:
    r = unframe(DATASET_MAGIC, blob)
    num_classes = r.u16()
    dims = r.dims()
    if len(dims) != 4:
        raise FormatError(f"SMD1 expects rank-4 samples, got rank {len(dims)}")
    samples = r.array_f32(dims)
    labels = r.array_u16(dims[0])
    r.done()
    try:
        return LabeledDataset(samples, labels, num_classes)
    except (DataError, ShapeError) as exc:
        raise FormatError(f"SMD1 content invalid: {exc}") from exc


def save_dataset(ds: LabeledDataset, path) -> None:
    Path(path).write_bytes(dataset_to_bytes(ds))


def load_dataset(path) -> LabeledDataset:
    return dataset_from_bytes(Path(path).read_bytes())
