"""Spatial/temporal attention and the transfer losses.

All functions accept either a single instance or a leading batch axis, so the
same code path serves the unit-level API and batched training.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import DegenerateInputError, Node, ShapeError

TAM_HIDDEN = 64
DISTANCES = ("squared", "l2")


@dataclass(frozen=True)
class LossWeights:
    """Outer (CE, SAT, TAT) weights plus the inner per-block / per-layer ratios."""

    w_ce: float = 1.0 / 3.0
    w_sat: float = 1.0 / 3.0
    w_tat: float = 1.0 / 3.0
    sat_block_weights: tuple[float, ...] = (0.25, 0.25, 0.25, 0.25)
    tat_layer_weights: tuple[float, ...] = (0.5, 0.5)

    def __post_init__(self):
        outer = (self.w_ce, self.w_sat, self.w_tat)
        if min(outer) < 0 or abs(sum(outer) - 1.0) > 1e-12:
            raise ValueError(f"outer loss weights must be non-negative and sum to 1: {outer}")
        for name in ("sat_block_weights", "tat_layer_weights"):
            ws = tuple(float(w) for w in getattr(self, name))
            object.__setattr__(self, name, ws)
            if not ws or min(ws) < 0 or abs(sum(ws) - 1.0) > 1e-12:
                raise ValueError(f"{name} must be non-negative and sum to 1: {ws}")

    @classmethod
    def supervised(cls, blocks: int = 4) -> "LossWeights":
        return cls(1.0, 0.0, 0.0, tuple([1.0 / blocks] * blocks))

    def with_inner(self, sat: Sequence[float], tat: Sequence[float]) -> "LossWeights":
        return LossWeights(self.w_ce, self.w_sat, self.w_tat, tuple(sat), tuple(tat))


@dataclass
class TemporalAttention:
    """State of the temporal attention module for one clip (or a batch of clips)."""

    hidden: Node  # [..., 64] after relu
    logits: Node  # [..., K]
    weights: Node  # [..., K], softmax of logits

    def layers(self) -> tuple[Node, Node]:
        return self.hidden, self.logits


@dataclass
class TamParams:
    w1: Node  # [K*D, 64]
    b1: Node  # [64]
    w2: Node  # [64, K]
    b2: Node  # [K]
    segments: int = field(init=False)

    def __post_init__(self):
        self.segments = self.w2.shape[1]

    def nodes(self) -> dict[str, Node]:
        return {"tam.w1": self.w1, "tam.b1": self.b1, "tam.w2": self.w2, "tam.b2": self.b2}


def spatial_attention(activation: Node) -> Node:
    """Per-position sum of absolute channel activations.

    ``[C, H, W] -> [H, W]`` or ``[N, C, H, W] -> [N, H, W]``.
    """
    if activation.value.ndim not in (3, 4):
        raise ShapeError(f"spatial_attention: expected rank 3 (or batched 4), got {activation.shape}")
    return ad.reduce_sum(ad.absolute(activation), axis=-3)


def attention_vector(att_map: Node) -> Node:
    """Row-major flatten of an ``[H, W]`` map (or ``[N, H, W]``), l2-normalised."""
    shape = att_map.shape
    if len(shape) not in (2, 3):
        raise ShapeError(f"attention_vector: expected [H, W] or [N, H, W], got {shape}")
    flat = ad.reshape(att_map, shape[:-2] + (shape[-2] * shape[-1],))
    return ad.l2_normalize(flat, axis=-1)


def _area_matrix(src: int, dst: int) -> np.ndarray:
    """``dst x src`` matrix whose rows are exact area weights of each footprint."""
    if dst > src:
        raise ShapeError(f"cannot area-pool {src} cells onto {dst}")
    ratio = Fraction(src, dst)
    m = np.zeros((dst, src))
    for i in range(dst):
        lo, hi = i * ratio, (i + 1) * ratio
        for j in range(int(lo), min(src, int(np.ceil(hi)))):
            overlap = min(hi, j + 1) - max(lo, j)
            if overlap > 0:
                m[i, j] = float(overlap / ratio)
    return m


def align_teacher_map(teacher_map: np.ndarray | Node, student_shape: tuple[int, int]) -> np.ndarray:
    """Area-average pool a teacher map (``[H_T, W_T]`` or ``[N, H_T, W_T]``) onto the student grid.

    The teacher side is always a constant, so this returns a plain array.
    """
    t = teacher_map.value if isinstance(teacher_map, Node) else np.asarray(teacher_map, dtype=np.float64)
    ht, wt = t.shape[-2:]
    hs, ws = student_shape
    if hs > ht or ws > wt:
        raise ShapeError(f"align_teacher_map: student grid {hs}x{ws} larger than teacher grid {ht}x{wt}")
    if (hs, ws) == (ht, wt):
        return t.copy()
    rows, cols = _area_matrix(ht, hs), _area_matrix(wt, ws)
    return np.maximum(rows @ t @ cols.T, 0.0)


def teacher_attention_vectors(teacher_activation: np.ndarray, student_shape: tuple[int, int]) -> np.ndarray:
    """Constant teacher attention vectors for one block, aligned to the student grid."""
    m = np.abs(teacher_activation).sum(axis=-3)
    m = align_teacher_map(m, student_shape)
    flat = m.reshape(m.shape[:-2] + (-1,))
    norm = np.sqrt((flat * flat).sum(axis=-1, keepdims=True))
    if np.any(norm <= ad.NORM_EPS):
        raise DegenerateInputError("teacher attention map has zero norm")
    return flat / norm


def _distance(a: Node, b: Node, distance: str) -> Node:
    """Per-row distance between unit vectors: squared L2 or plain L2."""
    sq = ad.reduce_sum(ad.square(ad.sub(a, b)), axis=-1)
    if distance == "squared":
        return sq
    if distance == "l2":
        return ad.sqrt(sq)
    raise ValueError(f"unknown distance {distance!r}; expected one of {DISTANCES}")


def sat_terms(
    student_blocks: Sequence[Node],
    teacher_vectors: Sequence[np.ndarray],
    block_weights: Sequence[float],
    distance: str = "squared",
) -> Node:
    """Weighted spatial-transfer loss per instance (shape ``[...]`` of the batch axes).

    ``teacher_vectors[i]`` holds the precomputed, aligned, normalised teacher
    attention for block ``i``.
    """
    if len(student_blocks) != len(teacher_vectors):
        raise ShapeError(
            f"sat_loss: {len(student_blocks)} student blocks vs {len(teacher_vectors)} teacher blocks"
        )
    if len(block_weights) != len(student_blocks):
        raise ShapeError(f"sat_loss: {len(block_weights)} weights for {len(student_blocks)} blocks")
    total = None
    for i, (act, tq, w) in enumerate(zip(student_blocks, teacher_vectors, block_weights)):
        try:
            q_s = attention_vector(spatial_attention(act))
        except DegenerateInputError as exc:
            raise DegenerateInputError(f"sat_loss: student block {i} attention map is all zero") from exc
        if q_s.shape != np.shape(tq):
            raise ShapeError(f"sat_loss: block {i} student {q_s.shape} vs teacher {np.shape(tq)}")
        term = ad.scale(_distance(q_s, ad.constant(tq), distance), w)
        total = term if total is None else ad.add(total, term)
    return total


def sat_loss(
    student_blocks: Sequence[Node],
    teacher_blocks: Sequence[Node | np.ndarray],
    block_weights: Sequence[float],
    distance: str = "squared",
) -> Node:
    """Spatial attention transfer loss between paired block outputs.

    Teacher activations are treated as constants and their maps aligned onto
    the student grid before normalisation.  With a batch axis the per-instance
    losses are averaged.
    """
    if len(student_blocks) != len(teacher_blocks):
        raise ShapeError(
            f"sat_loss: {len(student_blocks)} student blocks vs {len(teacher_blocks)} teacher blocks"
        )
    tvecs = []
    for i, (s, t) in enumerate(zip(student_blocks, teacher_blocks)):
        tv = t.value if isinstance(t, Node) else np.asarray(t, dtype=np.float64)
        try:
            tvecs.append(teacher_attention_vectors(tv, s.shape[-2:]))
        except DegenerateInputError as exc:
            raise DegenerateInputError(f"sat_loss: teacher block {i} attention map is all zero") from exc
    terms = sat_terms(student_blocks, tvecs, block_weights, distance)
    return terms if terms.value.ndim == 0 else ad.mean(terms, axis=0)


def tam_forward(segment_features: Node, params: TamParams) -> tuple[TemporalAttention, Node]:
    """Temporal attention over ``[K, D]`` (or ``[N, K, D]``) segment features.

    Returns the module state and the attention-weighted video feature.
    """
    shape = segment_features.shape
    if len(shape) not in (2, 3):
        raise ShapeError(f"tam_forward: expected [K, D] or [N, K, D], got {shape}")
    k, d = shape[-2:]
    if k < 2:
        raise ShapeError(f"tam_forward: need K >= 2 segments, got {k}")
    if params.w1.shape[0] != k * d or params.w2.shape[1] != k:
        raise ShapeError(
            f"tam_forward: params expect input {params.w1.shape[0]} and K={params.w2.shape[1]}, "
            f"got K={k}, D={d}"
        )
    batched = len(shape) == 3
    n = shape[0] if batched else 1
    flat = ad.reshape(segment_features, (n, k * d))
    hidden = ad.relu(ad.add(ad.matmul(flat, params.w1), ad.broadcast_to(params.b1, (n, params.b1.shape[0]))))
    logits = ad.add(ad.matmul(hidden, params.w2), ad.broadcast_to(params.b2, (n, k)))
    weights = ad.softmax(logits, axis=-1)
    feats = segment_features if batched else ad.reshape(segment_features, (1, k, d))
    wk = ad.broadcast_to(ad.reshape(weights, (n, k, 1)), (n, k, d))
    video = ad.reduce_sum(ad.mul(wk, feats), axis=1)
    if not batched:
        hidden, logits, weights = (ad.reshape(x, x.shape[1:]) for x in (hidden, logits, weights))
        video = ad.reshape(video, (d,))
    return TemporalAttention(hidden, logits, weights), video


def _as_const(x: Node | np.ndarray) -> Node:
    return ad.constant(x.value if isinstance(x, Node) else x)


def tat_terms(
    student: TemporalAttention,
    teacher_layers: Sequence[np.ndarray],
    layer_weights: Sequence[float],
    distance: str = "squared",
) -> Node:
    """Per-instance temporal transfer loss against constant teacher layer outputs."""
    s_layers = student.layers()
    if len(layer_weights) != len(s_layers) or len(teacher_layers) != len(s_layers):
        raise ShapeError(f"tat_loss: expected {len(s_layers)} layer weights and teacher layers")
    total = None
    for name, s, t, w in zip(("hidden", "logits"), s_layers, teacher_layers, layer_weights):
        if s.shape != np.shape(t):
            raise ShapeError(f"tat_loss: {name} width mismatch {s.shape} vs {np.shape(t)}")
        try:
            us = ad.l2_normalize(s, axis=-1)
            ut = ad.l2_normalize(ad.constant(t), axis=-1)
        except DegenerateInputError as exc:
            raise DegenerateInputError(f"tat_loss: {name} layer output has zero norm") from exc
        term = ad.scale(_distance(us, ut, distance), w)
        total = term if total is None else ad.add(total, term)
    return total


def tat_loss(
    student: TemporalAttention,
    teacher: TemporalAttention,
    layer_weights: Sequence[float],
    distance: str = "squared",
) -> Node:
    """Temporal attention transfer loss over the hidden and logit layers of the module."""
    teacher_layers = [_as_const(x).value for x in teacher.layers()]
    terms = tat_terms(student, teacher_layers, layer_weights, distance)
    return terms if terms.value.ndim == 0 else ad.mean(terms, axis=0)


def cross_entropy(logits: Node, label) -> Node:
    """``-log softmax(logits)[label]``; per-instance for batched ``[N, C]`` logits."""
    c = logits.shape[-1]
    lab = np.asarray(label)
    if np.any(lab < 0) or np.any(lab >= c):
        raise IndexError(f"cross_entropy: label {label} out of range for {c} classes")
    return ad.scale(ad.take_along_last(ad.log_softmax(logits, axis=-1), lab), -1.0)


def total_loss(l_ce: Node, l_sat: Node, l_tat: Node, w: LossWeights) -> Node:
    """Weighted sum ``w_ce*CE + w_sat*SAT + w_tat*TAT``."""
    out = ad.scale(l_ce, w.w_ce)
    out = ad.add(out, ad.scale(l_sat, w.w_sat))
    return ad.add(out, ad.scale(l_tat, w.w_tat))
