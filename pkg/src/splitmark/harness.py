"""Experiment orchestration: config files, staged runs, attack grid and metrics output.

A run trains up to four variants per seed from the same initial weights:
``clean`` (no watermark), ``rise`` (feature and backdoor watermarks),
``c_only`` (client backdoors only) and ``s_only`` (server feature watermark
only).  The attack grid is then applied to the ``rise`` pair and every cell
is re-verified.
"""

from __future__ import annotations

import configparser
import csv
import dataclasses
import json
import math
import os
import time
import types
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .attacks import (
    AttackConfig,
    finetune,
    neural_cleanse,
    project_to_budget,
    prune_pair,
    quantize_pair,
    save_trigger,
    unlearn,
)
from .data import (
    DatasetSpec,
    LabeledDataset,
    gen_client_triggers,
    gen_synthetic,
    partition,
    poison,
    save_dataset,
)
from .errors import ConfigError, SplitmarkError
from .nn import load_model, save_model
from .sfl import SplitModelPair, TrainConfig, train
from .stats import mann_whitney_u
from .watermark import (
    DEFAULT_TAU,
    FeatureWatermark,
    free_rider_audit,
    gen_feature_wm,
    save_wm,
    scalenorm_ids,
    verify_bottom,
    verify_top,
)

STAGES = ("clean", "rise", "c_only", "s_only")
ATTACKS = ("finetune", "prune", "quantize", "unlearn", "unlearn-oracle")
# Activation-noise grid; the top end is meant to cost visible accuracy.
DP_SIGMAS = (0.0, 0.2, 0.8, 1.6, 3.2, 6.4, 12.8, 25.6, 51.2)
CSV_COLUMNS = (
    "seed", "stage", "round", "acc_main", "theta_F", "theta_B_mean", "theta_B_min",
    "loss_main", "loss_wm", "attack", "attack_param",
)
HISTORY_COLUMNS = ("round", "acc_main", "theta_F", "theta_B_mean", "theta_B_min", "loss_main", "loss_wm")
SEED_ENV = "SPLITMARK_SEED"


# -- configuration ----------------------------------------------------------------


@dataclass
class WatermarkConfig:
    n_bits: int = 128
    alpha: float = 0.1
    tau: float = DEFAULT_TAU
    target_layers: tuple[int, ...] | None = None  # None: every scalenorm in the top model
    verify_rho: float = 0.5

    def __post_init__(self) -> None:
        if self.n_bits < 1:
            raise ConfigError("n_bits must be positive")
        if self.alpha < 0:
            raise ConfigError("alpha must be non-negative")
        if not 0 < self.tau <= 1 or not 0 < self.verify_rho <= 1:
            raise ConfigError("tau and verify_rho must lie in (0, 1]")


@dataclass
class ExperimentConfig:
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    train: TrainConfig = field(default_factory=TrainConfig)
    watermark: WatermarkConfig = field(default_factory=WatermarkConfig)
    attacks: AttackConfig = field(default_factory=AttackConfig)
    attack_grid: tuple[str, ...] = ATTACKS
    stages: tuple[str, ...] = STAGES
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    test_per_class: int = 100
    output_dir: str = "splitmark-out"
    history: bool = True

    def __post_init__(self) -> None:
        self.seeds = tuple(int(s) for s in self.seeds)
        self.stages = tuple(self.stages)
        self.attack_grid = tuple(self.attack_grid)
        if not self.seeds:
            raise ConfigError("at least one seed is required")
        if any(s < 0 for s in self.seeds):
            raise ConfigError("seeds must be non-negative")
        for stage in self.stages:
            if stage not in STAGES:
                raise ConfigError(f"unknown stage {stage!r}; choose from {', '.join(STAGES)}")
        if len(set(self.stages)) != len(self.stages):
            raise ConfigError("stages must not repeat")
        for kind in self.attack_grid:
            if kind not in ATTACKS:
                raise ConfigError(f"unknown attack {kind!r}; choose from {', '.join(ATTACKS)}")
        if self.attack_grid and "rise" not in self.stages:
            raise ConfigError("the attack grid runs on the rise stage, which is not configured")
        if self.test_per_class < 1:
            raise ConfigError("test_per_class must be positive")
        if self.train.alpha != self.watermark.alpha:
            self.train = dataclasses.replace(self.train, alpha=self.watermark.alpha)

    def with_seeds(self, seeds: Sequence[int]) -> "ExperimentConfig":
        return dataclasses.replace(self, seeds=tuple(seeds))


# Section -> (dataclass whose fields it accepts, extra ExperimentConfig keys).
_SECTION_FIELDS = {
    "dataset": (DatasetSpec, ("test_per_class",)),
    "train": (TrainConfig, ()),
    "watermark": (WatermarkConfig, ()),
    "attacks": (AttackConfig, ("attack_grid",)),
    "output": (None, ("output_dir", "seeds", "stages", "history")),
}
_SKIP = {"dataset": {"seed"}, "train": {"seed", "alpha"}}


def _coerce(raw: str, hint, key: str):
    origin = typing.get_origin(hint)
    args = typing.get_args(hint)
    if origin in (typing.Union, types.UnionType):
        if raw.strip().lower() in ("", "none"):
            return None
        inner = [a for a in args if a is not type(None)]
        return _coerce(raw, inner[0], key)
    if origin is tuple:
        items = [p.strip() for p in raw.replace(",", " ").split()]
        return tuple(_coerce(p, args[0], key) for p in items)
    try:
        if hint is bool:
            low = raw.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if hint is int:
            return int(raw, 0)
        if hint is float:
            return float(raw)
        if hint is str:
            return raw.strip()
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {getattr(hint, '__name__', hint)}") from None
    raise ConfigError(f"{key}: unsupported field type {hint}")


def parse_config(text: str, source: str = "<config>") -> ExperimentConfig:
    """Build an ``ExperimentConfig`` from INI text; unknown sections or keys are errors."""
    parser = configparser.ConfigParser(interpolation=None, default_section="__none__")
    parser.optionxform = str
    try:
        parser.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(f"{source}: {exc}") from exc
    exp_hints = typing.get_type_hints(ExperimentConfig)
    sub: dict[str, dict] = {"dataset": {}, "train": {}, "watermark": {}, "attacks": {}}
    top: dict[str, object] = {}
    for section in parser.sections():
        if section not in _SECTION_FIELDS:
            raise ConfigError(f"{source}: unknown section [{section}]")
        cls, extra = _SECTION_FIELDS[section]
        hints = typing.get_type_hints(cls) if cls is not None else {}
        allowed = {f.name for f in dataclasses.fields(cls)} - _SKIP.get(section, set()) if cls else set()
        for key, raw in parser.items(section):
            where = f"{source}: [{section}] {key}"
            if key in extra:
                top[key] = _coerce(raw, exp_hints[key], where)
            elif key in allowed:
                sub[section][key] = _coerce(raw, hints[key], where)
            else:
                raise ConfigError(f"{source}: unknown key {key!r} in [{section}]")
    try:
        return ExperimentConfig(
            dataset=DatasetSpec(**sub["dataset"]),
            train=TrainConfig(**sub["train"]),
            watermark=WatermarkConfig(**sub["watermark"]),
            attacks=AttackConfig(**sub["attacks"]),
            **top,
        )
    except TypeError as exc:
        raise ConfigError(f"{source}: {exc}") from exc


def load_config(path, env: dict | None = None) -> ExperimentConfig:
    """Read an INI config; ``SPLITMARK_SEED`` in the environment replaces the seed list."""
    p = Path(path)
    try:
        text = p.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {p}: {exc}") from exc
    cfg = parse_config(text, str(p))
    return apply_seed_override(cfg, os.environ if env is None else env)


def apply_seed_override(cfg: ExperimentConfig, env) -> ExperimentConfig:
    raw = env.get(SEED_ENV)
    if raw is None or raw.strip() == "":
        return cfg
    try:
        seeds = tuple(int(s) for s in raw.replace(",", " ").split())
    except ValueError:
        raise ConfigError(f"{SEED_ENV} must be an integer or a list of integers, got {raw!r}") from None
    return cfg.with_seeds(seeds)


# -- per-seed data ------------------------------------------------------------------


@dataclass
class SeedData:
    """Everything derived from one seed before training starts."""

    seed: int
    train: LabeledDataset
    test: LabeledDataset
    attacker: LabeledDataset
    clients: list[LabeledDataset]
    poisoned: list[LabeledDataset]
    triggers: list
    fw: FeatureWatermark
    init_pair: SplitModelPair
    train_cfg: TrainConfig


def prepare_seed(cfg: ExperimentConfig, seed: int, num_clients: int | None = None) -> SeedData:
    """Generate data, splits, triggers, the feature watermark and the shared initial pair.

    ``samples_per_class`` sizes the training pool; the attacker pool
    (``attacker_fraction`` of the training pool) and the test set
    (``test_per_class`` per class) are drawn from the same distribution on top.
    """
    k = cfg.train.num_clients if num_clients is None else num_clients
    spc = cfg.dataset.samples_per_class
    n_attack = int(math.floor(cfg.attacks.attacker_fraction * spc + 0.5))
    spec = dataclasses.replace(cfg.dataset, seed=seed, samples_per_class=spc + n_attack + cfg.test_per_class)
    full = gen_synthetic(spec)
    c = spec.num_classes
    perm = np.random.default_rng([seed, 0xDA7A]).permutation(len(full))
    n_test, n_att = cfg.test_per_class * c, n_attack * c
    test = full.subset(np.sort(perm[:n_test]))
    attacker = full.subset(np.sort(perm[n_test : n_test + n_att]))
    train_ds = full.subset(np.sort(perm[n_test + n_att :]))
    clients = partition(train_ds, k, seed)
    triggers = gen_client_triggers(k, seed, full.shape, c, cfg.dataset.patch)
    rho = cfg.train.rho
    poisoned = [poison(d, t, rho, seed * 1000 + i)[0] for i, (d, t) in enumerate(zip(clients, triggers))]
    train_cfg = dataclasses.replace(cfg.train, seed=seed, num_clients=k)
    pair = train_cfg.build_pair(full.shape, c)
    ids = cfg.watermark.target_layers
    ids = tuple(scalenorm_ids(pair.top)) if ids is None else ids
    fw = gen_feature_wm(seed, cfg.watermark.n_bits, ids, pair.top, cfg.watermark.alpha)
    return SeedData(seed, train_ds, test, attacker, clients, poisoned, triggers, fw, pair, train_cfg)


# -- evaluation ---------------------------------------------------------------------


@dataclass
class MetricsRow:
    seed: int
    stage: str
    round: int
    acc_main: float
    theta_F: float
    theta_B: dict[int, float]
    loss_main: float
    loss_wm: float
    attack: str = ""
    attack_param: str = ""
    wall_time: float = 0.0
    error: str | None = None
    extra: dict = field(default_factory=dict)

    @property
    def theta_B_mean(self) -> float:
        return float(np.mean(list(self.theta_B.values()))) if self.theta_B else float("nan")

    @property
    def theta_B_min(self) -> float:
        return float(min(self.theta_B.values())) if self.theta_B else float("nan")

    def csv_record(self) -> dict:
        return {
            "seed": self.seed,
            "stage": self.stage,
            "round": self.round,
            "acc_main": _fmt(self.acc_main),
            "theta_F": _fmt(self.theta_F),
            "theta_B_mean": _fmt(self.theta_B_mean),
            "theta_B_min": _fmt(self.theta_B_min),
            "loss_main": _fmt(self.loss_main),
            "loss_wm": _fmt(self.loss_wm),
            "attack": self.attack,
            "attack_param": self.attack_param,
        }

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        out["theta_B"] = {str(k): v for k, v in self.theta_B.items()}
        out["theta_B_mean"] = self.theta_B_mean
        out["theta_B_min"] = self.theta_B_min
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsRow":
        d = {k: v for k, v in d.items() if k not in ("theta_B_mean", "theta_B_min")}
        d["theta_B"] = {int(k): v for k, v in d["theta_B"].items()}
        return cls(**d)


def _fmt(x: float) -> str:
    return "nan" if x is None or not math.isfinite(x) else f"{x:.4f}"


def evaluate(pair: SplitModelPair, sd: SeedData, wm: WatermarkConfig) -> tuple[float, float, dict[int, float]]:
    acc = pair.accuracy(sd.test)
    theta_f = verify_top(pair.top, sd.fw)
    theta_b = {
        i: verify_bottom(pair.bottom, pair.top, t, sd.test, wm.verify_rho, wm.tau, seed=sd.seed).theta_B
        for i, t in enumerate(sd.triggers)
    }
    return acc, theta_f, theta_b


def _stage_setup(stage: str, sd: SeedData) -> tuple[TrainConfig, list[LabeledDataset]]:
    feature = stage in ("rise", "s_only")
    backdoor = stage in ("rise", "c_only")
    tc = dataclasses.replace(sd.train_cfg, feature_wm=feature, client_triggers=backdoor)
    return tc, sd.poisoned if backdoor else sd.clients


@dataclass
class StageResult:
    row: MetricsRow
    pair: SplitModelPair | None
    history: list[dict]


def run_stage(stage: str, sd: SeedData, cfg: ExperimentConfig, dp_sigma: float | None = None) -> StageResult:
    tc, data = _stage_setup(stage, sd)
    if dp_sigma is not None:
        tc = dataclasses.replace(tc, dp_sigma=dp_sigma)
    history: list[dict] = []

    def on_round(pair: SplitModelPair, rnd: int) -> dict:
        if not cfg.history:
            return {}
        acc, tf, tb = evaluate(pair, sd, cfg.watermark)
        vals = list(tb.values())
        return {"acc_main": acc, "theta_F": tf, "theta_B_mean": float(np.mean(vals)), "theta_B_min": float(min(vals))}

    t0 = time.perf_counter()
    pair, hist = train(tc, data, sd.fw if tc.feature_wm else None, sd.init_pair, on_round)
    for rec in hist:
        entry = {"round": rec.round + 1, "loss_main": float(np.nanmean(rec.client_losses)), "loss_wm": rec.wm_loss}
        entry.update(rec.metrics)
        history.append(entry)
    acc, tf, tb = evaluate(pair, sd, cfg.watermark)
    last = hist[-1] if hist else None
    row = MetricsRow(
        seed=sd.seed,
        stage=stage,
        round=len(hist),
        acc_main=acc,
        theta_F=tf,
        theta_B=tb,
        loss_main=float(np.nanmean(last.client_losses)) if last else float("nan"),
        loss_wm=last.wm_loss if last else float("nan"),
        wall_time=time.perf_counter() - t0,
    )
    if dp_sigma is not None:
        row.extra["dp_sigma"] = dp_sigma
    return StageResult(row, pair, history)


def _attack_cells(cfg: ExperimentConfig) -> list[tuple[str, str]]:
    cells = []
    for kind in cfg.attack_grid:
        if kind == "prune":
            cells += [("prune", f"{r:g}") for r in cfg.attacks.prune_rates]
        elif kind == "quantize":
            cells += [("quantize", s) for s in cfg.attacks.quant_schemes]
        elif kind in ("finetune", "unlearn", "unlearn-oracle"):
            cells.append((kind, str(cfg.attacks.epochs_for(cfg.train.rounds))))
    return cells


def run_attack(kind: str, param: str, pair: SplitModelPair, sd: SeedData, cfg: ExperimentConfig) -> tuple[SplitModelPair, dict]:
    ac = cfg.attacks
    extra: dict = {}
    if kind == "finetune":
        out = finetune(pair, sd.attacker, int(param), ac.finetune_lr, ac.batch_size, sd.seed)
    elif kind == "prune":
        out = prune_pair(pair, float(param))
    elif kind == "quantize":
        out = quantize_pair(pair, param)
    elif kind == "unlearn":
        report = neural_cleanse(pair, sd.attacker, ac, sd.seed)
        extra["nc_flagged"] = report.flagged
        extra["nc_index"] = [round(float(v), 4) for v in report.index]
        extra["nc_mask_l1"] = [round(t.mask_l1, 4) for t in report.triggers]
        extra["nc_asr"] = [round(t.asr, 4) for t in report.triggers]
        extra["nc_true_targets"] = sorted({int(t.target_class) for t in sd.triggers})
        out = unlearn(pair, report.triggers, sd.attacker, int(param), ac.finetune_lr, ac.unlearn_fraction, ac.batch_size, sd.seed)
    elif kind == "unlearn-oracle":
        out = unlearn(pair, sd.triggers, sd.attacker, int(param), ac.finetune_lr, ac.unlearn_fraction, ac.batch_size, sd.seed)
    else:
        raise ConfigError(f"unknown attack {kind!r}")
    return out, extra


# -- experiment -----------------------------------------------------------------------


@dataclass
class RunReport:
    config: dict
    rows: list[MetricsRow] = field(default_factory=list)
    histories: dict[str, list[dict]] = field(default_factory=dict)

    def select(self, stage: str, attack: str = "", attack_param: str = "") -> list[MetricsRow]:
        return [r for r in self.rows if r.stage == stage and r.attack == attack and r.attack_param == attack_param]

    def summary(self) -> dict:
        """Mean and std per stage/attack cell, plus Mann-Whitney tests across seeds."""
        cells: dict[tuple[str, str, str], list[MetricsRow]] = {}
        for r in self.rows:
            if r.error is None:
                cells.setdefault((r.stage, r.attack, r.attack_param), []).append(r)
        stats = {}
        for (stage, attack, param), rows in cells.items():
            key = stage if not attack else f"{stage}[{param}]"
            stats[key] = {
                name: {"mean": float(np.mean(v)), "std": float(np.std(v)), "n": len(v)}
                for name, v in (
                    ("acc_main", [r.acc_main for r in rows]),
                    ("theta_F", [r.theta_F for r in rows]),
                    ("theta_B_mean", [r.theta_B_mean for r in rows]),
                    ("theta_B_min", [r.theta_B_min for r in rows]),
                )
            }
        return {"cells": stats, "tests": significance(self)}

    def to_dict(self) -> dict:
        return {
            "config": self.config,
            "rows": [r.to_dict() for r in self.rows],
            "summary": self.summary(),
        }


def significance(report: RunReport) -> dict:
    """One-sided Mann-Whitney p-values over per-seed values.

    ``*_vs_null`` tests the watermarked stage against the clean stage as a
    chance-level null sample; ``*_interference`` tests whether the single-
    watermark stage exceeds the dual one.
    """
    def values(stage: str, attr: str) -> list[float]:
        return [getattr(r, attr) for r in report.select(stage) if r.error is None]

    out = {}
    pairs = {
        "theta_F_vs_null": ("rise", "clean", "theta_F"),
        "theta_B_vs_null": ("rise", "clean", "theta_B_mean"),
        "theta_B_interference": ("c_only", "rise", "theta_B_mean"),
        "theta_F_interference": ("s_only", "rise", "theta_F"),
    }
    for name, (a, b, attr) in pairs.items():
        va, vb = values(a, attr), values(b, attr)
        if va and vb:
            u, p = mann_whitney_u(va, vb, "greater")
            out[name] = {"U": u, "p": p, "a": a, "b": b, "metric": attr}
    return out


def save_seed_artifacts(sd: SeedData, out_dir) -> Path:
    """Feature watermark, client triggers and the test/attacker sets of one seed."""
    d = Path(out_dir) / f"seed{sd.seed}"
    d.mkdir(parents=True, exist_ok=True)
    save_wm(sd.fw, d / "wm.smw")
    for i, trig in enumerate(sd.triggers):
        save_trigger(trig, d / f"trigger_{i}.smt")
    save_dataset(sd.test, d / "test.smd")
    save_dataset(sd.attacker, d / "attacker.smd")
    return d


def save_pair(pair: SplitModelPair, out_dir, seed: int, stage: str) -> None:
    d = Path(out_dir) / f"seed{seed}"
    d.mkdir(parents=True, exist_ok=True)
    save_model(pair.bottom, d / f"{stage}_bottom.smk")
    save_model(pair.top, d / f"{stage}_top.smk")


def load_pair(out_dir, seed: int, stage: str, split_index: int) -> SplitModelPair:
    d = Path(out_dir) / f"seed{seed}"
    return SplitModelPair(load_model(d / f"{stage}_bottom.smk"), load_model(d / f"{stage}_top.smk"), split_index)


def run_seed(
    cfg: ExperimentConfig,
    seed: int,
    report: RunReport,
    save_dir=None,
    pretrained: dict[str, SplitModelPair] | None = None,
) -> None:
    """Run every configured stage and then the attack grid for one seed.

    ``pretrained`` maps stage names to already trained pairs, which are
    evaluated instead of retrained.  With ``save_dir`` the seed's artifacts
    and each stage's checkpoints are written below it.
    """
    try:
        sd = prepare_seed(cfg, seed)
        if save_dir is not None:
            save_seed_artifacts(sd, save_dir)
    except SplitmarkError as exc:
        report.rows.append(_error_row(seed, "setup", exc))
        return
    pretrained = pretrained or {}
    rise_pair = None
    for stage in cfg.stages:
        if stage in pretrained:
            pair = pretrained[stage]
            acc, tf, tb = evaluate(pair, sd, cfg.watermark)
            report.rows.append(MetricsRow(seed, stage, cfg.train.rounds, acc, tf, tb, float("nan"), float("nan")))
            if stage == "rise":
                rise_pair = pair
            continue
        try:
            res = run_stage(stage, sd, cfg)
        except SplitmarkError as exc:
            report.rows.append(_error_row(seed, stage, exc))
            return
        report.rows.append(res.row)
        report.histories[f"seed{seed}_{stage}"] = res.history
        if save_dir is not None:
            save_pair(res.pair, save_dir, seed, stage)
        if stage == "rise":
            rise_pair = res.pair
    if rise_pair is None:
        return
    for kind, param in _attack_cells(cfg):
        t0 = time.perf_counter()
        try:
            attacked, extra = run_attack(kind, param, rise_pair, sd, cfg)
            acc, tf, tb = evaluate(attacked, sd, cfg.watermark)
        except SplitmarkError as exc:
            report.rows.append(_error_row(seed, f"post-attack:{kind}", exc, kind, param))
            return
        report.rows.append(
            MetricsRow(seed, f"post-attack:{kind}", cfg.train.rounds, acc, tf, tb, float("nan"), float("nan"),
                       kind, param, time.perf_counter() - t0, extra=extra)
        )


def _error_row(seed: int, stage: str, exc: Exception, attack: str = "", param: str = "") -> MetricsRow:
    nan = float("nan")
    return MetricsRow(seed, stage, 0, nan, nan, {}, nan, nan, attack, param, error=f"{type(exc).__name__}: {exc}")


def config_dict(cfg: ExperimentConfig) -> dict:
    return json.loads(json.dumps(dataclasses.asdict(cfg), default=list))


def run_experiment(cfg: ExperimentConfig, save_dir=None) -> RunReport:
    report = RunReport(config_dict(cfg))
    for seed in cfg.seeds:
        run_seed(cfg, seed, report, save_dir)
    return report


# -- free-rider audit and DP sweep ---------------------------------------------------


@dataclass
class FreeRiderOutcome:
    seed: int
    roles: dict[int, str]
    results: dict
    acc_main: float


def audit_freeriders(cfg: ExperimentConfig, seed: int, benign: int = 3) -> FreeRiderOutcome:
    """Train with ``benign`` honest clients plus one Type I and one Type II free-rider.

    Both free-riders skip local training.  Type I discloses a trigger it drew
    but never embedded; Type II reverse-engineers the finished model with
    Neural Cleanse, projects the smallest reversed trigger onto the stealth
    budget and discloses that instead.
    """
    k = benign + 2
    sd = prepare_seed(cfg, seed, num_clients=k)
    type1, type2 = benign, benign + 1
    tc = dataclasses.replace(sd.train_cfg, feature_wm=True, client_triggers=True)
    pair, _ = train(tc, sd.poisoned, sd.fw, sd.init_pair, passive_clients=(type1, type2))
    claims = {i: (sd.triggers[i], sd.triggers[i].target_class) for i in range(benign)}
    claims[type1] = (sd.triggers[type1], sd.triggers[type1].target_class)
    nc = neural_cleanse(pair, sd.attacker, cfg.attacks, seed)
    best = min(nc.triggers, key=lambda t: t.mask_l1)
    forged = project_to_budget(best, owner_id=type2, seed=seed)
    claims[type2] = (forged, forged.target_class)
    results = {}
    for client, audit in free_rider_audit(claims, pair, sd.test, cfg.watermark.tau).items():
        trig = claims[client][0]
        theta = verify_bottom(pair.bottom, pair.top, trig, sd.test, cfg.watermark.verify_rho, cfg.watermark.tau, seed).theta_B
        results[client] = {"theta_B": theta, "passed": audit.passed, "clean_rate": audit.clean_rate,
                           "declared_class": audit.declared_class}
    roles = {i: "benign" for i in range(benign)}
    roles[type1], roles[type2] = "type1", "type2"
    return FreeRiderOutcome(seed, roles, results, pair.accuracy(sd.test))


def dp_sweep(cfg: ExperimentConfig, seed: int, sigmas: Sequence[float] = DP_SIGMAS) -> list[MetricsRow]:
    """Dual-watermark training under each activation-noise level; ``sigma=0`` is the baseline."""
    sd = prepare_seed(cfg, seed)
    rows = []
    quiet = dataclasses.replace(cfg, history=False)
    for sigma in sigmas:
        rows.append(run_stage("rise", sd, quiet, dp_sigma=float(sigma)).row)
    return rows


# -- output ----------------------------------------------------------------------------


def emit_metrics(report: RunReport, out_dir) -> list[Path]:
    """Write metrics.csv, report.json and one history CSV per (seed, stage)."""
    d = Path(out_dir)
    written = []
    try:
        d.mkdir(parents=True, exist_ok=True)
        path = d / "metrics.csv"
        with path.open("w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=CSV_COLUMNS)
            writer.writeheader()
            for row in report.rows:
                writer.writerow(row.csv_record())
        written.append(path)
        path = d / "report.json"
        path.write_text(json.dumps(report.to_dict(), indent=2, default=_json_default))
        written.append(path)
        for key, hist in report.histories.items():
            if not hist:
                continue
            path = d / f"history_{key}.csv"
            cols = [c for c in HISTORY_COLUMNS if c in hist[0]]
            with path.open("w", newline="") as fh:
                writer = csv.writer(fh)
                writer.writerow(cols)
                for entry in hist:
                    writer.writerow([entry[c] if c == "round" else _fmt(entry[c]) for c in cols])
            written.append(path)
    except OSError as exc:
        raise OSError(f"writing metrics to {d}: {exc}") from exc
    return written


def _json_default(obj):
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"cannot serialise {type(obj).__name__}")


def load_report(out_dir) -> RunReport:
    path = Path(out_dir) / "report.json"
    try:
        data = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read report {path}: {exc}") from exc
    return RunReport(data["config"], [MetricsRow.from_dict(r) for r in data["rows"]])


__all__ = [
    "ExperimentConfig", "WatermarkConfig", "RunReport", "MetricsRow", "SeedData", "StageResult",
    "FreeRiderOutcome", "parse_config", "load_config", "apply_seed_override", "prepare_seed",
    "run_stage", "run_seed", "save_seed_artifacts", "save_pair", "load_pair", "run_experiment", "run_attack", "evaluate", "significance",
    "audit_freeriders", "dp_sweep", "emit_metrics", "load_report", "STAGES", "ATTACKS", "CSV_COLUMNS",
]
