"""Training regimes: supervised (teacher / baseline student), unsupervised
soft-label pretraining, and attention-transfer student training.

All three share one loop (:func:`_fit`) so that a student trained with
weights (1, 0, 0) follows exactly the trajectory of the plain supervised
student under the same seed.
"""

from __future__ import annotations

import csv
import io
import logging
import math
import time
from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Sequence

import numpy as np

from . import autodiff as ad
from .attention import (
    LossWeights,
    cross_entropy,
    sat_terms,
    tat_terms,
    teacher_attention_vectors,
    total_loss,
)
from .backbone import (
    TEST_CENTER,
    TRAIN_RANDOM,
    Model,
    backbone_forward,
    init_model,
    model_forward,
    output_extents,
    segment_indices,
)
from .degrade import VideoClip

log = logging.getLogger(__name__)

ROLLING_SPATIAL = (
    (0.40, 0.30, 0.20, 0.10),
    (0.30, 0.40, 0.20, 0.10),
    (0.20, 0.30, 0.40, 0.10),
    (0.10, 0.20, 0.30, 0.40),
)
# 66/33 split, renormalised to sum to one
ROLLING_TEMPORAL = ((2.0 / 3.0, 1.0 / 3.0), (1.0 / 3.0, 2.0 / 3.0))

EVAL_CHUNK = 64


@dataclass(frozen=True)
class RollingSchedule:
    spatial: tuple[tuple[float, ...], ...] = ROLLING_SPATIAL
    temporal: tuple[tuple[float, ...], ...] = ROLLING_TEMPORAL
    period: int = 10

    def __post_init__(self):
        if self.period < 1:
            raise ValueError("period must be >= 1")
        for vec in (*self.spatial, *self.temporal):
            if abs(sum(vec) - 1.0) > 1e-12:
                raise ValueError(f"rolling weight vector {vec} does not sum to 1")


def rolling_weights_at(epoch: int, sched: RollingSchedule = RollingSchedule()) -> tuple[tuple[float, ...], tuple[float, ...]]:
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    phase = epoch // sched.period
    return sched.spatial[phase % len(sched.spatial)], sched.temporal[phase % len(sched.temporal)]


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 50
    batch_size: int = 32
    momentum: float = 0.9
    base_lr: float = 0.001
    warmup_epochs: int = 5
    lr_decay_every: int = 20
    lr_decay_factor: float = 10.0
    segments: int = 4
    weight_mode: str = "fixed"  # fixed | rolling
    weights: LossWeights = field(default_factory=LossWeights)
    rolling: RollingSchedule = field(default_factory=RollingSchedule)
    distance: str = "squared"
    clip_grad: bool = False
    clip_threshold: float = 10.0
    val_fraction: float = 0.2
    select_best: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1 or self.segments < 2:
            raise ValueError("epochs, batch_size must be >= 1 and segments >= 2")
        if not 0 <= self.warmup_epochs < self.epochs:
            raise ValueError(f"warmup_epochs ({self.warmup_epochs}) must be in [0, epochs)")
        if self.base_lr <= 0 or self.lr_decay_every < 1 or self.lr_decay_factor <= 0:
            raise ValueError("learning-rate settings must be positive")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must be in [0, 1)")
        if self.weight_mode not in ("fixed", "rolling"):
            raise ValueError(f"weight_mode must be 'fixed' or 'rolling', got {self.weight_mode!r}")
        if not 0 <= self.val_fraction < 1:
            raise ValueError("val_fraction must be in [0, 1)")


def lr_at(epoch: int, cfg: TrainConfig) -> float:
    """Linear warm-up to ``base_lr`` then step decay; the decay clock starts after warm-up."""
    if not 0 <= epoch < cfg.epochs:
        raise ValueError(f"epoch {epoch} outside [0, {cfg.epochs})")
    if epoch < cfg.warmup_epochs:
        return cfg.base_lr * (epoch + 1) / cfg.warmup_epochs
    steps = (epoch - cfg.warmup_epochs) // cfg.lr_decay_every
    return cfg.base_lr / cfg.lr_decay_factor**steps


def weights_at(epoch: int, cfg: TrainConfig) -> LossWeights:
    if cfg.weight_mode == "fixed":
        return cfg.weights
    sat, tat = rolling_weights_at(epoch, cfg.rolling)
    return cfg.weights.with_inner(sat, tat)


def sgd_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    lr: float,
    momentum: float,
    velocity: dict[str, np.ndarray],
) -> tuple[dict[str, np.ndarray], dict[str, np.ndarray]]:
    """Classical momentum: ``v <- m v + g``; ``p <- p - lr v``."""
    new_p, new_v = {}, {}
    for name, p in params.items():
        g = grads[name]
        v = velocity.get(name)
        if v is None:
            v = np.zeros_like(p)
        if g.shape != p.shape or v.shape != p.shape:
            raise ValueError(f"sgd_step: shape mismatch for {name}: p{p.shape} g{g.shape} v{v.shape}")
        v = momentum * v + g
        new_v[name] = v
        new_p[name] = p - lr * v
    return new_p, new_v


def clip_by_global_norm(grads: dict[str, np.ndarray], threshold: float) -> dict[str, np.ndarray]:
    norm = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    if norm <= threshold:
        return grads
    s = threshold / norm
    return {k: g * s for k, g in grads.items()}


# -- metrics ----------------------------------------------------------------


@dataclass
class EvalResult:
    prec1: float
    prec5: float
    count: int

    def __post_init__(self):
        if not 0 <= self.prec1 <= self.prec5 <= 1:
            raise ValueError(f"inconsistent precision: prec@1={self.prec1} prec@5={self.prec5}")


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    loss_total: float
    loss_ce: float
    loss_sat: float
    loss_tat: float
    weights: LossWeights
    val_prec1: float
    val_prec5: float
    wall_time: float = 0.0


@dataclass
class StepRecord:
    epoch: int
    step: int
    total: float
    ce: float
    sat: float
    tat: float
    weights: LossWeights


CSV_HEADER = (
    "epoch",
    "lr",
    "loss_total",
    "loss_ce",
    "loss_sat",
    "loss_tat",
    "w_ce",
    "w_sat",
    "w_tat",
    "sat_block_weights",
    "tat_layer_weights",
    "val_prec1",
    "val_prec5",
)


def _fmt(x: float) -> str:
    return "" if x is None or (isinstance(x, float) and math.isnan(x)) else repr(float(x))


@dataclass
class Metrics:
    regime: str
    epochs: list[EpochRecord] = field(default_factory=list)
    steps: list[StepRecord] = field(default_factory=list)
    best_epoch: int = -1
    test: Optional[EvalResult] = None

    def to_csv(self) -> str:
        """One row per epoch. Wall time is deliberately excluded to keep the file reproducible."""
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(CSV_HEADER)
        for r in self.epochs:
            w = r.weights
            writer.writerow(
                [
                    r.epoch,
                    _fmt(r.lr),
                    _fmt(r.loss_total),
                    _fmt(r.loss_ce),
                    _fmt(r.loss_sat),
                    _fmt(r.loss_tat),
                    _fmt(w.w_ce),
                    _fmt(w.w_sat),
                    _fmt(w.w_tat),
                    ";".join(_fmt(x) for x in w.sat_block_weights),
                    ";".join(_fmt(x) for x in w.tat_layer_weights),
                    _fmt(r.val_prec1),
                    _fmt(r.val_prec5),
                ]
            )
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str, regime: str) -> "Metrics":
        """Inverse of :meth:`to_csv` (step records and test results are not stored there)."""
        rows = list(csv.reader(io.StringIO(text)))
        if not rows or tuple(rows[0]) != CSV_HEADER:
            raise ValueError(f"{regime}: not a metrics CSV (header {rows[0] if rows else None})")

        def num(x: str) -> float:
            return float(x) if x else float("nan")

        out = cls(regime)
        for r in rows[1:]:
            rec = dict(zip(CSV_HEADER, r))
            w = LossWeights(
                num(rec["w_ce"]),
                num(rec["w_sat"]),
                num(rec["w_tat"]),
                tuple(num(x) for x in rec["sat_block_weights"].split(";")),
                tuple(num(x) for x in rec["tat_layer_weights"].split(";")),
            )
            out.epochs.append(
                EpochRecord(
                    int(rec["epoch"]),
                    num(rec["lr"]),
                    num(rec["loss_total"]),
                    num(rec["loss_ce"]),
                    num(rec["loss_sat"]),
                    num(rec["loss_tat"]),
                    w,
                    num(rec["val_prec1"]),
                    num(rec["val_prec5"]),
                )
            )
        return out

    def summary(self) -> dict:
        out = {"regime": self.regime, "epochs": len(self.epochs), "best_epoch": self.best_epoch}
        if self.epochs:
            last = self.epochs[-1]
            out["final_loss_total"] = last.loss_total
        if self.test is not None:
            out["test_prec1"] = self.test.prec1
            out["test_prec5"] = self.test.prec5
            out["test_count"] = self.test.count
        return out


def topn_hits(logits: np.ndarray, labels: np.ndarray, n: int) -> np.ndarray:
    """True where the label ranks within the top ``n``; ties go to the lower class index."""
    logits = np.asarray(logits)
    labels = np.asarray(labels, dtype=np.intp)
    true = logits[np.arange(len(labels)), labels][:, None]
    idx = np.arange(logits.shape[1])[None, :]
    rank = (logits > true).sum(axis=1) + ((logits == true) & (idx < labels[:, None])).sum(axis=1)
    return rank < n


def predict_logits(model: Model, clips: Sequence[VideoClip], segments: int) -> np.ndarray:
    out = []
    with ad.no_grad():
        for start in range(0, len(clips), EVAL_CHUNK):
            chunk = clips[start : start + EVAL_CHUNK]
            frames = np.stack([c.frames[segment_indices(c.num_frames, segments, TEST_CENTER)] for c in chunk])
            out.append(model_forward(frames, model).logits.value)
    return np.concatenate(out) if out else np.zeros((0, model.backbone.num_classes))


def evaluate(model: Model, clips: Sequence[VideoClip], segments: Optional[int] = None) -> EvalResult:
    """prec@1 / prec@5 under test-centre segment sampling."""
    if not clips:
        raise ValueError("evaluate: empty dataset")
    if any(c.label is None for c in clips):
        raise ValueError("evaluate: every clip needs a label")
    k = segments or model.segments
    logits = predict_logits(model, clips, k)
    labels = np.array([c.label for c in clips])
    p1 = float(topn_hits(logits, labels, 1).mean())
    p5 = float(topn_hits(logits, labels, 5).mean())
    return EvalResult(p1, p5, len(clips))


# -- teacher soft targets ---------------------------------------------------


class TeacherCache:
    """Frozen teacher outputs for every frame of the paired clips.

    Per frame: aligned, normalised attention vectors for each block and the
    backbone feature.  The teacher's temporal module is replayed per sampled
    segment combination (cheap) via :meth:`tam_layers`.
    """

    def __init__(self, teacher: Model, hr_clips: Sequence[VideoClip], student_hw: tuple[int, int], chunk: int = 64):
        self.teacher = teacher
        blocks = teacher.backbone.num_blocks
        self.student_extents = output_extents(student_hw[0], student_hw[1], blocks)
        self.vectors: list[list[np.ndarray]] = []  # clip -> block -> [T, H_s*W_s]
        self.features: list[np.ndarray] = []  # clip -> [T, D]
        with ad.no_grad():
            for clip in hr_clips:
                per_block = [[] for _ in range(blocks)]
                feats = []
                for start in range(0, clip.num_frames, chunk):
                    acts, f = backbone_forward(clip.frames[start : start + chunk], teacher.backbone)
                    for b, a in enumerate(acts):
                        per_block[b].append(teacher_attention_vectors(a.value, self.student_extents[b]))
                    feats.append(f.value)
                self.vectors.append([np.concatenate(v) for v in per_block])
                self.features.append(np.concatenate(feats))

    def block_vectors(self, items: Sequence[int], indices: Sequence[Sequence[int]]) -> list[np.ndarray]:
        blocks = len(self.vectors[0]) if self.vectors else 0
        return [np.concatenate([self.vectors[i][b][idx] for i, idx in zip(items, indices)]) for b in range(blocks)]

    def tam_layers(self, items: Sequence[int], indices: Sequence[Sequence[int]]) -> tuple[np.ndarray, np.ndarray]:
        seg = np.stack([self.features[i][idx] for i, idx in zip(items, indices)])
        tam = self.teacher.tam
        n, k, d = seg.shape
        hidden = np.maximum(seg.reshape(n, k * d) @ tam.w1.value + tam.b1.value, 0.0)
        logits = hidden @ tam.w2.value + tam.b2.value
        return hidden, logits


# -- the shared loop --------------------------------------------------------


@dataclass
class Batch:
    items: list[int]
    indices: list[list[int]]
    frames: np.ndarray  # [N, K, H, W, C]
    labels: Optional[np.ndarray]


LossFn = Callable[[Model, Batch, LossWeights], tuple[ad.Node, float, float, float]]


def split_validation(n: int, fraction: float, seed: int) -> tuple[list[int], list[int]]:
    """Seeded shuffle; the first ``round(fraction * n)`` indices become validation."""
    order = ad.make_rng([seed, 1]).permutation(n)
    n_val = int(round(fraction * n)) if n > 1 else 0
    return sorted(order[n_val:].tolist()), sorted(order[:n_val].tolist())


def _fit(
    model: Model,
    clips: Sequence[VideoClip],
    cfg: TrainConfig,
    loss_fn: LossFn,
    regime: str,
    val_clips: Optional[Sequence[VideoClip]] = None,
    frozen: Sequence[ad.Node] = (),
) -> Metrics:
    if not clips:
        raise ValueError(f"{regime}: empty dataset")
    k = cfg.segments
    if model.segments != k:
        raise ValueError(f"{regime}: model has K={model.segments}, config K={k}")
    if val_clips is None:
        train_idx, val_idx = split_validation(len(clips), cfg.val_fraction, cfg.seed)
        val_clips = [clips[i] for i in val_idx]
    else:
        train_idx = list(range(len(clips)))
    rng = ad.make_rng([cfg.seed, 2])
    params = model.nodes()
    velocity: dict[str, np.ndarray] = {}
    metrics = Metrics(regime)
    best: Optional[tuple[float, dict[str, np.ndarray]]] = None
    frozen_ids = {id(n) for n in frozen}
    trainable = {name: n for name, n in params.items() if id(n) not in frozen_ids}
    step = 0
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        lr = lr_at(epoch, cfg)
        weights = weights_at(epoch, cfg)
        order = rng.permutation(len(train_idx))
        sums = np.zeros(4)
        nsteps = 0
        for start in range(0, len(order), cfg.batch_size):
            items = [train_idx[j] for j in order[start : start + cfg.batch_size]]
            indices = [segment_indices(clips[i].num_frames, k, TRAIN_RANDOM, rng) for i in items]
            frames = np.stack([clips[i].frames[idx] for i, idx in zip(items, indices)])
            labels = None
            if clips[items[0]].label is not None:
                labels = np.array([clips[i].label for i in items])
            for node in params.values():
                node.zero_grad()
            loss, ce, sat, tat = loss_fn(model, Batch(items, indices, frames, labels), weights)
            loss.backward()
            grads = {name: n.grad for name, n in trainable.items()}
            if cfg.clip_grad:
                grads = clip_by_global_norm(grads, cfg.clip_threshold)
            values = {name: n.value for name, n in trainable.items()}
            values, velocity = sgd_step(values, grads, lr, cfg.momentum, velocity)
            for name, v in values.items():
                trainable[name].value = v
            total = float(loss.value)
            if not math.isfinite(total):
                raise FloatingPointError(f"{regime}: non-finite loss at epoch {epoch} step {step}")
            metrics.steps.append(StepRecord(epoch, step, total, ce, sat, tat, weights))
            sums += (total, ce, sat, tat)
            nsteps += 1
            step += 1
        for node in params.values():
            node.zero_grad()
        means = sums / max(nsteps, 1)
        if val_clips and all(c.label is not None for c in val_clips):
            ev = evaluate(model, val_clips, k)
            vp1, vp5 = ev.prec1, ev.prec5
        else:
            vp1 = vp5 = float("nan")
        metrics.epochs.append(
            EpochRecord(epoch, lr, *means, weights, vp1, vp5, wall_time=time.perf_counter() - t0)
        )
        log.info("%s epoch %d lr %.2e loss %.4f val@1 %.3f", regime, epoch, lr, means[0], vp1)
        if cfg.select_best and not math.isnan(vp1) and (best is None or vp1 > best[0]):
            best = (vp1, {name: n.value.copy() for name, n in params.items()})
            metrics.best_epoch = epoch
    if best is not None:
        for name, v in best[1].items():
            params[name].value = v
    else:
        metrics.best_epoch = cfg.epochs - 1
    return metrics


def _ce_loss(model: Model, batch: Batch, w: LossWeights):
    out = model_forward(batch.frames, model)
    ce = ad.mean(cross_entropy(out.logits, batch.labels), axis=0)
    return ce, float(ce.value), float("nan"), float("nan")


def train_supervised(
    clips: Sequence[VideoClip],
    cfg: TrainConfig,
    num_classes: int,
    model: Optional[Model] = None,
    widths: Sequence[int] = (16, 32, 64, 128),
    regime: str = "supervised",
) -> tuple[Model, Metrics]:
    """Cross-entropy-only training; used for the teacher and the baseline student."""
    if not clips:
        raise ValueError(f"{regime}: empty dataset")
    if any(c.label is None for c in clips):
        raise ValueError(f"{regime}: every clip needs a label")
    if model is None:
        model = init_model(ad.make_rng([cfg.seed, 0]), num_classes, cfg.segments, clips[0].frames.shape[-1], widths)
    # logged weights reflect what the loss actually uses
    cfg = replace(cfg, weight_mode="fixed", weights=LossWeights.supervised(model.backbone.num_blocks))
    metrics = _fit(model, clips, cfg, _ce_loss, regime)
    return model, metrics


def train_teacher(hr_clips: Sequence[VideoClip], cfg: TrainConfig, num_classes: int, widths=(16, 32, 64, 128)):
    return train_supervised(hr_clips, cfg, num_classes, widths=widths, regime="teacher")


def _check_pairs(hr_clips: Sequence[VideoClip], lr_clips: Sequence[VideoClip]) -> None:
    if len(hr_clips) != len(lr_clips):
        raise ValueError(f"unpaired data: {len(hr_clips)} HR clips vs {len(lr_clips)} LR clips")
    for h, l in zip(hr_clips, lr_clips):
        if h.id != l.id or h.num_frames != l.num_frames or h.label != l.label:
            raise ValueError(f"unpaired data: HR clip {h.id!r} does not match LR clip {l.id!r}")


def _transfer_loss(cache: TeacherCache, distance: str, use_labels: bool) -> LossFn:
    def fn(model: Model, batch: Batch, w: LossWeights):
        out = model_forward(batch.frames, model)
        # zero-weighted terms are not computed and log as nan, matching the CE-only baseline
        sat = tat = ad.constant(0.0)
        if w.w_sat:
            tq = cache.block_vectors(batch.items, batch.indices)
            # mean over every (clip, segment) pair
            sat = ad.mean(sat_terms(out.blocks, tq, w.sat_block_weights, distance), axis=0)
        if w.w_tat:
            hidden, logits = cache.tam_layers(batch.items, batch.indices)
            tat = ad.mean(tat_terms(out.tam, (hidden, logits), w.tat_layer_weights, distance), axis=0)
        if use_labels:
            ce = ad.mean(cross_entropy(out.logits, batch.labels), axis=0)
        else:
            ce = ad.constant(0.0)
        loss = total_loss(ce, sat, tat, w)

        def logged(used: bool, node: ad.Node) -> float:
            return float(node.value) if used else float("nan")

        return loss, logged(use_labels, ce), logged(bool(w.w_sat), sat), logged(bool(w.w_tat), tat)

    return fn


def train_student_stat(
    teacher: Model,
    hr_clips: Sequence[VideoClip],
    lr_clips: Sequence[VideoClip],
    cfg: TrainConfig,
    num_classes: int,
    student: Optional[Model] = None,
    widths: Sequence[int] = (16, 32, 64, 128),
    cache: Optional[TeacherCache] = None,
) -> tuple[Model, Metrics]:
    """Student on LR clips under ``w_ce*CE + w_sat*SAT + w_tat*TAT`` against a frozen teacher."""
    _check_pairs(hr_clips, lr_clips)
    if not lr_clips:
        raise ValueError("train_student_stat: empty dataset")
    if any(c.label is None for c in lr_clips):
        raise ValueError("train_student_stat: every clip needs a label")
    if student is None:
        student = init_model(
            ad.make_rng([cfg.seed, 0]), num_classes, cfg.segments, lr_clips[0].frames.shape[-1], widths
        )
    if student.backbone.num_blocks != teacher.backbone.num_blocks:
        raise ValueError("teacher and student must have the same number of blocks")
    if cache is None:
        cache = TeacherCache(teacher, hr_clips, lr_clips[0].resolution)
    checksum = teacher.checksum()
    metrics = _fit(student, lr_clips, cfg, _transfer_loss(cache, cfg.distance, True), "stat")
    if teacher.checksum() != checksum:
        raise RuntimeError("teacher parameters changed during student training")
    return student, metrics


def pretrain_unsupervised(
    teacher: Model,
    student: Model,
    hr_clips: Sequence[VideoClip],
    lr_clips: Sequence[VideoClip],
    cfg: TrainConfig,
    cache: Optional[TeacherCache] = None,
) -> tuple[Model, Metrics]:
    """Label-free SAT+TAT training against the frozen teacher (CE weight forced to 0).

    Labels, if present, are ignored; no validation split is held out.
    """
    _check_pairs(hr_clips, lr_clips)
    if not lr_clips:
        raise ValueError("pretrain_unsupervised: empty dataset")
    w = cfg.weights
    outer = w.w_sat + w.w_tat
    if outer <= 0:
        raise ValueError("pretraining needs a positive SAT or TAT weight")
    w = LossWeights(0.0, w.w_sat / outer, w.w_tat / outer, w.sat_block_weights, w.tat_layer_weights)
    cfg = replace(cfg, weights=w, select_best=False, val_fraction=0.0)
    unlabeled = [VideoClip(c.frames, None, c.id) for c in lr_clips]
    if cache is None:
        cache = TeacherCache(teacher, hr_clips, lr_clips[0].resolution)
    checksum = teacher.checksum()
    metrics = _fit(student, unlabeled, cfg, _transfer_loss(cache, cfg.distance, False), "pretrain", val_clips=[])
    if teacher.checksum() != checksum:
        raise RuntimeError("teacher parameters changed during pretraining")
    return student, metrics


def student_from_teacher(teacher: Model) -> Model:
    """Student initialised as an exact copy of the teacher."""
    return teacher.copy()

