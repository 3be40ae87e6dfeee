"""Experiment configuration: YAML sections per stage, strictly validated.

Every section maps onto a dataclass; unknown keys, wrong types and missing
sections with bad values are errors rather than silently ignored.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, Optional

import yaml

from .attention import LossWeights
from .data import SyntheticSpec
from .degrade import DegradeConfig
from .training import TrainConfig


DESK_WIDTHS = (8, 16, 32, 64)


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class TrainSection:
    """Optimiser / schedule settings of one training stage (seed comes from the top level).

    Defaults are the desk-scale recipe: the warm-up / step-decay shape of the
    full-scale schedule with a larger base rate, smaller batches and a
    narrower backbone, plus norm clipping against early blow-ups.
    """

    epochs: int = 40
    batch_size: int = 16
    momentum: float = 0.9
    base_lr: float = 0.02
    warmup_epochs: int = 5
    lr_decay_every: int = 20
    lr_decay_factor: float = 10.0
    segments: int = 4
    clip_grad: bool = True
    clip_threshold: float = 1.0
    val_fraction: float = 0.2
    select_best: bool = True
    widths: tuple[int, ...] = DESK_WIDTHS

    def train_config(self, seed: int, **extra) -> TrainConfig:
        kw = {f.name: getattr(self, f.name) for f in fields(self) if f.name != "widths"}
        return TrainConfig(seed=seed, **kw, **extra)


@dataclass(frozen=True)
class StatSection:
    """Transfer-loss weighting for the attention-transfer student."""

    weight_mode: str = "fixed"
    w_ce: float = 1.0 / 3.0
    w_sat: float = 1.0 / 3.0
    w_tat: float = 1.0 / 3.0
    sat_block_weights: tuple[float, ...] = (0.25, 0.25, 0.25, 0.25)
    tat_layer_weights: tuple[float, ...] = (0.5, 0.5)
    distance: str = "squared"

    def loss_weights(self) -> LossWeights:
        return LossWeights(self.w_ce, self.w_sat, self.w_tat, self.sat_block_weights, self.tat_layer_weights)


@dataclass(frozen=True)
class PretrainSection:
    enabled: bool = False
    epochs: int = 10
    batch_size: int = 32
    base_lr: float = 0.001
    warmup_epochs: int = 1
    include_test: bool = False  # also use the (unlabelled) test clips; off keeps evaluation clean


@dataclass(frozen=True)
class ReportSection:
    visualize_clips: int = 2
    figures: bool = True


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0  # teacher seed, and the student seed unless student_seeds is given
    student_seeds: tuple[int, ...] = ()
    data: SyntheticSpec = field(default_factory=SyntheticSpec)
    degrade: DegradeConfig = field(default_factory=DegradeConfig)
    teacher: TrainSection = field(default_factory=TrainSection)
    student: TrainSection = field(default_factory=TrainSection)
    stat: StatSection = field(default_factory=StatSection)
    pretrain: PretrainSection = field(default_factory=PretrainSection)
    report: ReportSection = field(default_factory=ReportSection)

    def with_seed(self, seed: int) -> "ExperimentConfig":
        return dataclasses.replace(self, seed=int(seed))

    def to_dict(self) -> dict:
        return _plain(dataclasses.asdict(self))


SECTIONS = {
    "data": SyntheticSpec,
    "degrade": DegradeConfig,
    "teacher": TrainSection,
    "student": TrainSection,
    "stat": StatSection,
    "pretrain": PretrainSection,
    "report": ReportSection,
}


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def _coerce(value: Any, default: Any, where: str) -> Any:
    """Match ``value`` to the type of the field default (tuples from lists, ints to floats)."""
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected true/false, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number, got {value!r}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{where}: expected a string, got {value!r}")
        return value
    if isinstance(default, tuple):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{where}: expected a list, got {value!r}")
        proto = default[0] if default else 0.0
        return tuple(_coerce(v, proto, f"{where}[{i}]") for i, v in enumerate(value))
    raise ConfigError(f"{where}: unsupported field type {type(default).__name__}")


def _build(cls, raw: Optional[dict], section: str):
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError(f"[{section}] must be a mapping, got {type(raw).__name__}")
    base = cls()
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ConfigError(f"[{section}] unknown key(s): {', '.join(unknown)}")
    kw = {k: _coerce(v, getattr(base, k), f"{section}.{k}") for k, v in raw.items()}
    try:
        return dataclasses.replace(base, **kw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{section}] {exc}") from exc


def config_from_dict(doc: Optional[dict]) -> ExperimentConfig:
    doc = dict(doc or {})
    unknown = sorted(set(doc) - set(SECTIONS) - {"seed", "student_seeds"})
    if unknown:
        raise ConfigError(f"unknown top-level key(s): {', '.join(unknown)}")
    seed = doc.get("seed", 0)
    if isinstance(seed, bool) or not isinstance(seed, int) or seed < 0:
        raise ConfigError(f"seed must be a non-negative integer, got {seed!r}")
    seeds = _coerce(doc.get("student_seeds", []), (0,), "student_seeds")
    if any(s < 0 for s in seeds) or len(set(seeds)) != len(seeds):
        raise ConfigError(f"student_seeds must be distinct non-negative integers, got {list(seeds)}")
    parts = {name: _build(cls, doc.get(name), name) for name, cls in SECTIONS.items()}
    cfg = ExperimentConfig(seed=seed, student_seeds=seeds, **parts)
    try:
        cfg.stat.loss_weights()
    except ValueError as exc:
        raise ConfigError(f"[stat] {exc}") from exc
    if cfg.stat.weight_mode not in ("fixed", "rolling"):
        raise ConfigError(f"[stat] weight_mode must be 'fixed' or 'rolling', got {cfg.stat.weight_mode!r}")
    if cfg.stat.distance not in ("squared", "l2"):
        raise ConfigError(f"[stat] distance must be 'squared' or 'l2', got {cfg.stat.distance!r}")
    if len(cfg.teacher.widths) != len(cfg.student.widths):
        raise ConfigError("teacher and student need the same number of blocks")
    if len(cfg.stat.sat_block_weights) != len(cfg.student.widths):
        raise ConfigError("[stat] need one SAT weight per block")
    if cfg.teacher.segments != cfg.student.segments:
        raise ConfigError("teacher and student must sample the same number of segments")
    for name in ("teacher", "student"):
        try:
            getattr(cfg, name).train_config(seed)
        except ValueError as exc:
            raise ConfigError(f"[{name}] {exc}") from exc
    return cfg


def load_config(path: Optional[str | Path]) -> ExperimentConfig:
    if path is None:
        return ExperimentConfig()
    text = Path(path).read_text()
    try:
        doc = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    if doc is not None and not isinstance(doc, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return config_from_dict(doc)


def dump_config(cfg: ExperimentConfig) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=True)


def stable_hash(*parts: Any) -> str:
    """sha256 over canonical JSON; used to decide whether a pipeline stage is stale."""
    blob = json.dumps(_plain(list(parts)), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


def section_dict(obj) -> dict:
    return _plain(dataclasses.asdict(obj))

