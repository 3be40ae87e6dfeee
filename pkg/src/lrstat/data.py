"""Synthetic temporal-pattern clips and on-disk dataset I/O.

Clips live in per-clip directories of numbered 8-bit PNG frames, indexed by
a ``manifest.json`` at the dataset root.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np
from PIL import Image

from .autodiff import make_rng
from .degrade import VideoClip

MANIFEST_FORMAT = "lrstat-manifest"
MANIFEST_VERSION = 1

# Four attributes (size, hue, brightness, saturation), each changing in one of
# two directions.  Every frame of a class also occurs in its reversed partner,
# so the class is only recoverable from frame order.
CLASS_NAMES = (
    "grow",
    "shrink",
    "red-to-blue",
    "blue-to-red",
    "brighten",
    "dim",
    "saturate",
    "desaturate",
)
REVERSED_PAIRS = ((0, 1), (2, 3), (4, 5), (6, 7))

RED = np.array([1.0, 0.1, 0.05])
BLUE = np.array([0.05, 0.2, 1.0])
GREEN = np.array([0.1, 0.9, 0.15])  # only the saturation pair uses it


@dataclass(frozen=True)
class SyntheticSpec:
    num_classes: int = 8
    clips_per_class: int = 60
    frames: int = 16
    height: int = 64
    width: int = 64
    channels: int = 3
    test_fraction: float = 0.25
    unlabeled_per_class: int = 0
    distractors: int = 3
    radius_range: tuple[float, float] = (5.0, 20.0)
    speed: float = 1.5
    pixel_noise: float = 0.02
    seed: int = 0

    def __post_init__(self):
        if not 1 <= self.num_classes <= len(CLASS_NAMES):
            raise ValueError(f"num_classes must be in [1, {len(CLASS_NAMES)}]")
        if self.clips_per_class < 1 or self.frames < 1 or self.height < 4 or self.width < 4:
            raise ValueError("clips_per_class, frames must be >= 1 and frames at least 4x4")
        if self.channels not in (1, 3):
            raise ValueError("channels must be 1 or 3")
        if not 0 <= self.test_fraction < 1:
            raise ValueError("test_fraction must be in [0, 1)")


@dataclass
class ClipRecord:
    id: str
    path: str
    label: Optional[int]
    frames: int
    height: int
    width: int
    split: str = "train"


@dataclass
class Manifest:
    name: str
    classes: list[str]
    clips: list[ClipRecord] = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def split(self, name: str) -> list[ClipRecord]:
        return [c for c in self.clips if c.split == name]


def _disc(h: int, w: int, cy: float, cx: float, r: float) -> np.ndarray:
    """Anti-aliased disc coverage in [0, 1]."""
    yy, xx = np.mgrid[0:h, 0:w]
    d = np.sqrt((yy + 0.5 - cy) ** 2 + (xx + 0.5 - cx) ** 2)
    return np.clip(r + 0.5 - d, 0.0, 1.0)


def _square(h: int, w: int, cy: float, cx: float, r: float) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w]
    d = np.maximum(np.abs(yy + 0.5 - cy), np.abs(xx + 0.5 - cx))
    return np.clip(r + 0.5 - d, 0.0, 1.0)


def _class_track(label: int, t: np.ndarray, frames: int, rng: np.random.Generator, spec: SyntheticSpec):
    """Per-frame target radius and RGB colour for one class.

    Attributes that a class does not vary sit strictly inside the range the
    varying classes sweep, so the end states of each ramp are unique to its pair.
    """
    lo, hi = spec.radius_range
    u = t / max(frames - 1, 1)
    n = len(t)
    ramp = u if label % 2 == 0 else 1.0 - u
    attribute = CLASS_NAMES[label - label % 2]
    radius = np.full(n, rng.uniform(lo + 0.3 * (hi - lo), hi - 0.3 * (hi - lo)))
    mix = np.full(n, rng.uniform(0.3, 0.7))  # pure red / blue only at the ends of a hue ramp
    saturation = np.full(n, 0.6)
    brightness = np.full(n, rng.uniform(0.6, 0.75))
    if attribute == "grow":
        radius = lo + (hi - lo) * ramp
    elif attribute == "red-to-blue":
        mix, saturation = ramp, np.ones(n)
    elif attribute == "brighten":
        brightness = 0.3 + 0.7 * ramp
    pure = (1 - mix)[:, None] * RED + mix[:, None] * BLUE
    if attribute == "saturate":
        saturation = ramp
        pure = np.tile(GREEN, (n, 1))
    grey = pure.mean(axis=1, keepdims=True)
    colour = grey + saturation[:, None] * (pure - grey)
    return radius, colour * brightness[:, None]


def render_clip(label: int, rng: np.random.Generator, spec: SyntheticSpec, clip_id: str = "") -> VideoClip:
    """One clip: textured background, static distractors, one moving target whose
    size / brightness / colour follows the class pattern over time."""
    h, w, c = spec.height, spec.width, spec.channels
    t = np.arange(spec.frames)
    yy, xx = np.mgrid[0:h, 0:w] / max(h, w)
    base = rng.uniform(0.05, 0.2)
    gy, gx = rng.uniform(-0.1, 0.1, size=2)
    background = base + gy * yy + gx * xx
    background = np.repeat(background[:, :, None], 3, axis=2) * rng.uniform(0.7, 1.0, size=3)
    for _ in range(spec.distractors):
        cy, cx = rng.uniform(0.2, 0.8) * h, rng.uniform(0.1, 0.9) * w
        # static grey squares smaller than the target: clutter without hue or size cues
        r = rng.uniform(0.3, 0.6) * spec.radius_range[0]
        col = np.full(3, rng.uniform(0.2, 0.4))
        shape = _square(h, w, cy, cx, r)
        background = background * (1 - shape[:, :, None]) + shape[:, :, None] * col

    radius, colour = _class_track(label, t, spec.frames, rng, spec)
    # target drifts inside the central 3:4 band so the aspect crop keeps it
    margin_y = h / 8 + spec.radius_range[1]
    margin_x = spec.radius_range[1]
    cy, cx = rng.uniform(margin_y, h - margin_y), rng.uniform(margin_x, w - margin_x)
    angle = rng.uniform(0, 2 * np.pi)
    vy, vx = spec.speed * np.sin(angle), spec.speed * np.cos(angle)
    frames = np.empty((spec.frames, h, w, 3))
    for i in range(spec.frames):
        cover = _disc(h, w, cy, cx, radius[i])[:, :, None]
        frames[i] = background * (1 - cover) + cover * colour[i]
        cy, cx = cy + vy, cx + vx
        if not margin_y <= cy <= h - margin_y:
            vy, cy = -vy, float(np.clip(cy, margin_y, h - margin_y))
        if not margin_x <= cx <= w - margin_x:
            vx, cx = -vx, float(np.clip(cx, margin_x, w - margin_x))
    if spec.pixel_noise > 0:
        frames += spec.pixel_noise * rng.standard_normal(frames.shape)
    frames = np.clip(frames, 0.0, 1.0)
    if c == 1:
        frames = frames.mean(axis=3, keepdims=True)
    return VideoClip(quantize(frames), label, clip_id)


def quantize(frames: np.ndarray) -> np.ndarray:
    """Round to the 8-bit grid used on disk, so in-memory and stored data agree."""
    return np.round(np.clip(frames, 0.0, 1.0) * 255.0) / 255.0


def generate_clips(spec: SyntheticSpec) -> dict[str, list[VideoClip]]:
    """Synthetic dataset split into ``train`` / ``test`` (and ``unlabeled`` if requested).

    The per-class test share is the last ``round(test_fraction * clips_per_class)`` clips.
    """
    n_test = int(round(spec.test_fraction * spec.clips_per_class))
    out: dict[str, list[VideoClip]] = {"train": [], "test": []}
    if spec.unlabeled_per_class:
        out["unlabeled"] = []
    for label in range(spec.num_classes):
        for j in range(spec.clips_per_class + spec.unlabeled_per_class):
            rng = make_rng([spec.seed, label, j])
            if j < spec.clips_per_class:
                split = "test" if j >= spec.clips_per_class - n_test else "train"
                clip = render_clip(label, rng, spec, f"{CLASS_NAMES[label]}-{j:04d}")
            else:
                split = "unlabeled"
                clip = render_clip(label, rng, spec, f"unlabeled-{label}-{j:04d}")
                clip.label = None
            out[split].append(clip)
    return out


# -- disk format ------------------------------------------------------------


def write_clip(clip: VideoClip, directory: Path) -> None:
    directory.mkdir(parents=True, exist_ok=True)
    for t, frame in enumerate(clip.frames):
        arr = np.round(np.clip(frame, 0.0, 1.0) * 255.0).astype(np.uint8)
        img = Image.fromarray(arr[:, :, 0] if arr.shape[2] == 1 else arr, mode="L" if arr.shape[2] == 1 else "RGB")
        img.save(directory / f"frame_{t:04d}.png", format="PNG", optimize=False)


def read_clip(directory: Path, frames: Optional[int] = None) -> np.ndarray:
    paths = sorted(directory.glob("frame_*.png"))
    if frames is not None and len(paths) != frames:
        raise ValueError(f"{directory}: expected {frames} frames, found {len(paths)}")
    out = []
    for p in paths:
        arr = np.asarray(Image.open(p), dtype=np.float64) / 255.0
        out.append(arr[:, :, None] if arr.ndim == 2 else arr)
    return np.stack(out)


def write_dataset(
    root: str | Path,
    splits: dict[str, Sequence[VideoClip]],
    name: str,
    classes: Sequence[str],
    meta: Optional[dict] = None,
) -> Manifest:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    manifest = Manifest(name, list(classes), meta=dict(meta or {}))
    for split, clips in splits.items():
        for clip in clips:
            rel = f"{split}/{clip.id}"
            write_clip(clip, root / rel)
            h, w = clip.resolution
            manifest.clips.append(ClipRecord(clip.id, rel, clip.label, clip.num_frames, h, w, split))
    save_manifest(manifest, root)
    return manifest


def save_manifest(manifest: Manifest, root: str | Path) -> None:
    doc = {
        "format": MANIFEST_FORMAT,
        "version": MANIFEST_VERSION,
        "name": manifest.name,
        "classes": manifest.classes,
        "meta": manifest.meta,
        "clips": [asdict(c) for c in manifest.clips],
    }
    Path(root, "manifest.json").write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")


def load_manifest(root: str | Path) -> Manifest:
    root = Path(root)
    doc = json.loads((root / "manifest.json").read_text())
    if doc.get("format") != MANIFEST_FORMAT or doc.get("version") != MANIFEST_VERSION:
        raise ValueError(f"{root}: unsupported manifest {doc.get('format')} v{doc.get('version')}")
    classes = list(doc["classes"])
    clips = [ClipRecord(**c) for c in doc["clips"]]
    for c in clips:
        if c.label is not None and not 0 <= c.label < len(classes):
            raise ValueError(f"{root}: clip {c.id} label {c.label} outside {len(classes)} classes")
        if not (root / c.path).is_dir():
            raise FileNotFoundError(f"{root}: clip directory {c.path} missing")
    return Manifest(doc["name"], classes, clips, doc.get("meta", {}))


def load_split(root: str | Path, split: str, manifest: Optional[Manifest] = None) -> list[VideoClip]:
    root = Path(root)
    manifest = manifest or load_manifest(root)
    return [VideoClip(read_clip(root / r.path, r.frames), r.label, r.id) for r in manifest.split(split)]


def iter_records(manifest: Manifest, splits: Iterable[str]) -> list[ClipRecord]:
    wanted = set(splits)
    return [c for c in manifest.clips if c.split in wanted]


def gen_synthetic(spec: SyntheticSpec, out_dir: str | Path) -> Manifest:
    """Render the synthetic dataset and write it to ``out_dir``."""
    splits = generate_clips(spec)
    meta = {"generator": "synthetic", "spec": asdict(spec)}
    return write_dataset(out_dir, splits, "synthetic", CLASS_NAMES[: spec.num_classes], meta)
