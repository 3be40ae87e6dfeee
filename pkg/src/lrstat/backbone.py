"""Block-structured conv feature extractor, segment sampling, checkpoints.

Each block is conv3x3 (pad 1) -> relu -> avgpool.  The 2x2 pool is applied
only when both spatial extents are even, otherwise the block keeps its
extent; a 12x16 input therefore yields 6x8, 3x4, 3x4, 3x4 block outputs and
never an empty map.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import autodiff as ad
from .attention import TAM_HIDDEN, TamParams, TemporalAttention, tam_forward
from .autodiff import Node, ShapeError
from .degrade import VideoClip

DEFAULT_WIDTHS = (16, 32, 64, 128)
CHECKPOINT_MAGIC = b"LRSTAT-CKPT"
CHECKPOINT_VERSION = 1

TRAIN_RANDOM = "train-random"
TEST_CENTER = "test-center"


def glorot(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def he_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    # layers followed by relu; glorot halves the signal at every block here
    limit = np.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, size=shape)


@dataclass
class BackboneParams:
    kernels: list[Node]  # [C_out, C_in, 3, 3]
    biases: list[Node]  # [C_out]
    head_w: Node  # [D, num_classes]
    head_b: Node  # [num_classes]

    @property
    def num_blocks(self) -> int:
        return len(self.kernels)

    @property
    def in_channels(self) -> int:
        return self.kernels[0].shape[1]

    @property
    def feature_dim(self) -> int:
        return self.head_w.shape[0]

    @property
    def num_classes(self) -> int:
        return self.head_w.shape[1]

    def nodes(self) -> dict[str, Node]:
        out = {}
        for i, (k, b) in enumerate(zip(self.kernels, self.biases)):
            out[f"block{i}.kernel"] = k
            out[f"block{i}.bias"] = b
        out["head.w"] = self.head_w
        out["head.b"] = self.head_b
        return out


@dataclass
class Model:
    """Backbone plus temporal attention module: one teacher or student network."""

    backbone: BackboneParams
    tam: TamParams

    def nodes(self) -> dict[str, Node]:
        return {**self.backbone.nodes(), **self.tam.nodes()}

    @property
    def segments(self) -> int:
        return self.tam.segments

    def copy(self) -> "Model":
        return model_from_arrays({k: v.value.copy() for k, v in self.nodes().items()})

    def checksum(self) -> str:
        h = hashlib.sha256()
        for name, node in sorted(self.nodes().items()):
            h.update(name.encode())
            h.update(np.ascontiguousarray(node.value, dtype="<f8").tobytes())
        return h.hexdigest()


def init_model(
    rng: np.random.Generator,
    num_classes: int,
    segments: int,
    in_channels: int = 3,
    widths: Sequence[int] = DEFAULT_WIDTHS,
    hidden: int = TAM_HIDDEN,
) -> Model:
    """He-uniform weights for layers feeding a relu, Glorot-uniform for the
    linear outputs (classifier head, attention logits); zero biases."""
    widths = tuple(int(w) for w in widths)
    if len(widths) < 2 or min(widths) < 1:
        raise ValueError(f"need >= 2 blocks with positive widths, got {widths}")
    if segments < 2:
        raise ValueError("need K >= 2 segments")
    kernels, biases = [], []
    c_in = in_channels
    for c_out in widths:
        k = he_uniform(rng, (c_out, c_in, 3, 3), c_in * 9)
        kernels.append(ad.variable(k))
        biases.append(ad.variable(np.zeros(c_out)))
        c_in = c_out
    d = widths[-1]
    backbone = BackboneParams(
        kernels,
        biases,
        ad.variable(glorot(rng, (d, num_classes), d, num_classes)),
        ad.variable(np.zeros(num_classes)),
    )
    tam = TamParams(
        ad.variable(he_uniform(rng, (segments * d, hidden), segments * d)),
        ad.variable(np.zeros(hidden)),
        ad.variable(glorot(rng, (hidden, segments), hidden, segments)),
        ad.variable(np.zeros(segments)),
    )
    return Model(backbone, tam)


def model_from_arrays(arrays: dict[str, np.ndarray]) -> Model:
    blocks = sorted({int(k[5:].split(".")[0]) for k in arrays if k.startswith("block")})
    if blocks != list(range(len(blocks))):
        raise ValueError(f"checkpoint blocks are not contiguous: {blocks}")
    backbone = BackboneParams(
        [ad.variable(arrays[f"block{i}.kernel"]) for i in blocks],
        [ad.variable(arrays[f"block{i}.bias"]) for i in blocks],
        ad.variable(arrays["head.w"]),
        ad.variable(arrays["head.b"]),
    )
    tam = TamParams(*(ad.variable(arrays[f"tam.{n}"]) for n in ("w1", "b1", "w2", "b2")))
    return Model(backbone, tam)


def output_extents(h: int, w: int, blocks: int) -> list[tuple[int, int]]:
    """Spatial extent after each block under the pooling rule."""
    out = []
    for _ in range(blocks):
        if h % 2 == 0 and w % 2 == 0:
            h, w = h // 2, w // 2
        out.append((h, w))
    return out


@dataclass
class SegmentSample:
    """One frame index per segment, and the frames themselves ``[K, H, W, C]``."""

    indices: list[int]
    frames: np.ndarray
    mode: str


def segment_bounds(num_frames: int, k: int) -> list[tuple[int, int]]:
    """Even partition into ``k`` [start, stop) ranges; the remainder goes to the earliest segments."""
    if num_frames < k:
        raise ValueError(f"segment_sample: {num_frames} frames cannot fill {k} segments")
    base, extra = divmod(num_frames, k)
    bounds, start = [], 0
    for i in range(k):
        stop = start + base + (1 if i < extra else 0)
        bounds.append((start, stop))
        start = stop
    return bounds


def segment_indices(num_frames: int, k: int, mode: str, rng: Optional[np.random.Generator] = None) -> list[int]:
    bounds = segment_bounds(num_frames, k)
    if mode == TEST_CENTER:
        return [(a + b) // 2 for a, b in bounds]
    if mode == TRAIN_RANDOM:
        if rng is None:
            raise ValueError("train-random sampling needs an rng")
        return [int(rng.integers(a, b)) for a, b in bounds]
    raise ValueError(f"unknown sampling mode {mode!r}")


def segment_sample(clip: VideoClip, k: int, mode: str, rng: Optional[np.random.Generator] = None) -> SegmentSample:
    idx = segment_indices(clip.num_frames, k, mode, rng)
    return SegmentSample(idx, clip.frames[idx], mode)


def _to_nchw(frames: np.ndarray) -> np.ndarray:
    # [..., H, W, C] -> [prod(...), C, H, W]
    f = np.asarray(frames, dtype=np.float64)
    return np.ascontiguousarray(f.reshape((-1,) + f.shape[-3:]).transpose(0, 3, 1, 2))


def backbone_forward(frames, params: BackboneParams) -> tuple[list[Node], Node]:
    """Run ``[..., H, W, C]`` frames independently through the blocks.

    Returns per-block activations ``[M, C_b, H_b, W_b]`` (``M`` = number of
    frames) and spatially mean-pooled features ``[M, D]``.
    """
    x = frames if isinstance(frames, Node) else ad.constant(_to_nchw(frames))
    if x.value.ndim != 4 or x.shape[1] != params.in_channels:
        raise ShapeError(f"backbone_forward: expected {params.in_channels}-channel frames, got {x.shape}")
    acts = []
    for k, b in zip(params.kernels, params.biases):
        y = ad.conv2d(x, k, stride=1, padding=1)
        y = ad.add(y, ad.broadcast_to(ad.reshape(b, (b.shape[0], 1, 1)), y.shape))
        y = ad.relu(y)
        h, w = y.shape[-2:]
        if h % 2 == 0 and w % 2 == 0:
            y = ad.avgpool2d(y, 2, 2)
        acts.append(y)
        x = y
    m, c, h, w = x.shape
    feats = ad.mean(ad.reshape(x, (m, c, h * w)), axis=2)
    return acts, feats


@dataclass
class ModelOutput:
    logits: Node  # [N, classes]
    tam: TemporalAttention  # batched over N
    video_feature: Node  # [N, D]
    blocks: list[Node]  # per block [N*K, C, H, W]
    segment_features: Node  # [N, K, D]


def model_forward(frames, model: Model) -> ModelOutput:
    """Frames ``[N, K, H, W, C]`` (or a single ``[K, H, W, C]`` sample) to class logits."""
    f = frames.frames if isinstance(frames, SegmentSample) else np.asarray(frames, dtype=np.float64)
    if f.ndim == 4:
        f = f[None]
    if f.ndim != 5:
        raise ShapeError(f"model_forward: expected [N, K, H, W, C] frames, got {f.shape}")
    n, k = f.shape[:2]
    if k != model.segments:
        raise ShapeError(f"model_forward: model expects K={model.segments}, got {k}")
    acts, feats = backbone_forward(f, model.backbone)
    seg = ad.reshape(feats, (n, k, feats.shape[-1]))
    tam, video = tam_forward(seg, model.tam)
    bp = model.backbone
    logits = ad.add(ad.matmul(video, bp.head_w), ad.broadcast_to(bp.head_b, (n, bp.num_classes)))
    return ModelOutput(logits, tam, video, acts, seg)


# -- checkpoints ------------------------------------------------------------


def save_checkpoint(path: str | Path, model: Model, meta: Optional[dict] = None) -> None:
    """Versioned binary record: magic line, JSON header line, raw little-endian float64."""
    arrays = {k: np.ascontiguousarray(v.value, dtype="<f8") for k, v in sorted(model.nodes().items())}
    entries, offset = [], 0
    for name, arr in arrays.items():
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += arr.nbytes
    header = {"version": CHECKPOINT_VERSION, "dtype": "<f8", "tensors": entries, "meta": meta or {}}
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC + b"\n")
        fh.write(json.dumps(header, sort_keys=True).encode("utf-8") + b"\n")
        for arr in arrays.values():
            fh.write(arr.tobytes())


def load_checkpoint(path: str | Path) -> tuple[Model, dict]:
    with open(path, "rb") as fh:
        magic = fh.readline().rstrip(b"\n")
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: not a checkpoint file")
        header = json.loads(fh.readline())
        if header.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {header.get('version')}")
        blob = fh.read()
    arrays = {}
    for e in header["tensors"]:
        count = int(np.prod(e["shape"])) if e["shape"] else 1
        arr = np.frombuffer(blob, dtype="<f8", count=count, offset=e["offset"])
        arrays[e["name"]] = arr.reshape(e["shape"]).astype(np.float64)
    return model_from_arrays(arrays), header.get("meta", {})
