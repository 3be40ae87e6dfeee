"""HR -> LR degradation: centre crop, lens blur, area downsampling, sensor noise.

The filters are written as explicit tap loops with elementwise arithmetic
(no BLAS, no FFT) so results are bit-reproducible.  Each weighted average is
evaluated as ``ref + sum(w_i * (x_i - ref))`` with weights summing to one,
which makes constant frames pass through exactly.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field, replace
from fractions import Fraction
from typing import Optional

import numpy as np

from .autodiff import make_rng

DEFAULT_BLUR_SIGMA = 1.0
DEFAULT_NOISE_SIGMA = 0.01
TABLE3_RESOLUTIONS = ((6, 8), (12, 16), (18, 24), (24, 32))


@dataclass
class VideoClip:
    """Ordered ``[H, W, C]`` frames in ``[0, 1]`` plus an optional label."""

    frames: np.ndarray  # [T, H, W, C]
    label: Optional[int] = None
    id: str = ""

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        if self.frames.ndim != 4 or self.frames.shape[0] < 1:
            raise ValueError(f"clip {self.id!r}: frames must be [T>=1, H, W, C], got {self.frames.shape}")

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def resolution(self) -> tuple[int, int]:
        return self.frames.shape[1], self.frames.shape[2]


@dataclass(frozen=True)
class DegradeConfig:
    target_h: int = 12
    target_w: int = 16
    blur_sigma: float = DEFAULT_BLUR_SIGMA
    noise_sigma: float = DEFAULT_NOISE_SIGMA
    seed: int = 0
    aspect: tuple[int, int] = field(default=(3, 4))

    def __post_init__(self):
        if self.target_h < 1 or self.target_w < 1:
            raise ValueError(f"target extents must be >= 1, got {self.target_h}x{self.target_w}")
        if self.blur_sigma < 0 or self.noise_sigma < 0:
            raise ValueError("blur_sigma and noise_sigma must be >= 0")
        if len(self.aspect) != 2 or min(self.aspect) < 1:
            raise ValueError(f"aspect must be a positive h:w pair, got {self.aspect}")


def crop_box(h: int, w: int, ratio: tuple[int, int]) -> tuple[int, int, int, int]:
    """(top, left, height, width) of the largest centred window with ``ratio``.

    Extents are floored to whole pixels; the offset is floored too, so odd
    slack leaves the extra pixel at the bottom/right.
    """
    rh, rw = ratio
    if h * rw <= w * rh:  # height is the binding extent
        ch, cw = h, (h * rw) // rh
    else:
        ch, cw = (w * rh) // rw, w
    if ch < 1 or cw < 1:
        raise ValueError(f"{h}x{w} frame cannot hold a {rh}:{rw} window")
    return (h - ch) // 2, (w - cw) // 2, ch, cw


def center_crop(frame: np.ndarray, ratio: tuple[int, int] = (3, 4)) -> np.ndarray:
    top, left, ch, cw = crop_box(frame.shape[0], frame.shape[1], ratio)
    return frame[top : top + ch, left : left + cw].copy()


def gaussian_kernel(sigma: float) -> np.ndarray:
    """1-D Gaussian taps of radius ``ceil(3 sigma)``, normalised to sum 1."""
    radius = math.ceil(3.0 * sigma)
    taps = [math.exp(-(i * i) / (2.0 * sigma * sigma)) for i in range(-radius, radius + 1)]
    s = math.fsum(taps)
    return np.array([t / s for t in taps])


def _reflect_index(i: int, n: int) -> int:
    # numpy 'reflect' (edge pixel not repeated), folded for radii beyond n
    if n == 1:
        return 0
    period = 2 * (n - 1)
    i %= period
    return period - i if i >= n else i


def _blur_axis(x: np.ndarray, kernel: np.ndarray, axis: int) -> np.ndarray:
    n = x.shape[axis]
    radius = len(kernel) // 2
    out = x.copy()
    base = np.arange(n)
    for t, k in enumerate(kernel):
        offset = t - radius
        if offset == 0:
            continue
        idx = [_reflect_index(i + offset, n) for i in base]
        out += k * (np.take(x, idx, axis=axis) - x)
    return out


def lens_blur(frame: np.ndarray, sigma: float) -> np.ndarray:
    """Separable truncated-Gaussian blur with reflect padding; sigma 0 is the identity."""
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    if sigma == 0:
        return frame.copy()
    kernel = gaussian_kernel(sigma)
    out = _blur_axis(frame, kernel, axis=0)
    out = _blur_axis(out, kernel, axis=1)
    return np.clip(out, 0.0, 1.0)


def area_weights(src: int, dst: int) -> list[list[tuple[int, float]]]:
    """For each output cell, the (source index, exact area fraction) pairs it covers."""
    if dst > src:
        raise ValueError(f"average_downsample: cannot upsample {src} -> {dst}")
    ratio = Fraction(src, dst)
    rows = []
    for i in range(dst):
        lo, hi = i * ratio, (i + 1) * ratio
        taps = []
        for j in range(math.floor(lo), math.ceil(hi)):
            overlap = min(hi, j + 1) - max(lo, j)
            if overlap > 0:
                taps.append((j, float(overlap / ratio)))
        rows.append(taps)
    return rows


def _downsample_axis(x: np.ndarray, dst: int, axis: int) -> np.ndarray:
    src = x.shape[axis]
    if src == dst:
        return x.copy()
    pieces = []
    for taps in area_weights(src, dst):
        ref = np.take(x, taps[0][0], axis=axis)
        acc = ref.copy()
        for j, w in taps:
            if j != taps[0][0]:
                acc += w * (np.take(x, j, axis=axis) - ref)
        pieces.append(acc)
    return np.stack(pieces, axis=axis)


def average_downsample(frame: np.ndarray, target_h: int, target_w: int) -> np.ndarray:
    """Area interpolation: each output pixel is the area-weighted mean of its footprint."""
    h, w = frame.shape[:2]
    if target_h > h or target_w > w:
        raise ValueError(f"average_downsample: target {target_h}x{target_w} exceeds source {h}x{w}")
    out = _downsample_axis(frame, target_h, axis=0)
    out = _downsample_axis(out, target_w, axis=1)
    return np.clip(out, 0.0, 1.0)


def gaussian_noise(frame: np.ndarray, sigma: float, rng: np.random.Generator) -> np.ndarray:
    """Add i.i.d. N(0, sigma^2) per pixel-channel (row-major draws) and clamp to [0, 1]."""
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    if sigma == 0:
        return frame.copy()
    noise = rng.standard_normal(frame.size).reshape(frame.shape)
    return np.clip(frame + sigma * noise, 0.0, 1.0)


def frame_seed(seed: int, clip_id: str, frame_index: int) -> list[int]:
    """Seed words for one frame's noise stream, independent of processing order."""
    digest = hashlib.sha256(clip_id.encode("utf-8")).digest()
    return [int(seed), int.from_bytes(digest[:8], "little"), int(frame_index)]


def degrade_frame(frame: np.ndarray, cfg: DegradeConfig, clip_id: str = "", index: int = 0) -> np.ndarray:
    out = center_crop(frame, cfg.aspect)
    out = lens_blur(out, cfg.blur_sigma)
    out = average_downsample(out, cfg.target_h, cfg.target_w)
    return gaussian_noise(out, cfg.noise_sigma, make_rng(frame_seed(cfg.seed, clip_id, index)))


def degrade_clip(clip: VideoClip, cfg: DegradeConfig) -> VideoClip:
    """Crop -> blur -> area downsample -> noise, applied to every frame."""
    frames = np.stack([degrade_frame(f, cfg, clip.id, t) for t, f in enumerate(clip.frames)])
    return VideoClip(frames, clip.label, clip.id)


def crop_clip(clip: VideoClip, aspect: tuple[int, int] = (3, 4)) -> VideoClip:
    """Aspect crop only, at native resolution (the teacher's view of an HR clip)."""
    return VideoClip(np.stack([center_crop(f, aspect) for f in clip.frames]), clip.label, clip.id)


def with_target(cfg: DegradeConfig, h: int, w: int) -> DegradeConfig:
    return replace(cfg, target_h=h, target_w=w)
