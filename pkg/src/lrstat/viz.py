"""Attention overlays, temporal-weight bars and video-feature export."""

from __future__ import annotations

import csv
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from matplotlib import colormaps
from PIL import Image

from . import autodiff as ad
from .attention import spatial_attention
from .backbone import TEST_CENTER, Model, model_forward, segment_indices
from .degrade import VideoClip

BAR_COLORMAP = "viridis"  # weight 0 -> dark purple, weight 1 -> yellow
BAR_CELL = 16
EMBEDDINGS_VERSION = 1


def bilinear_upsample(att_map: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Align-corners bilinear resize: output corners sample the input corners exactly."""
    h, w = att_map.shape
    if out_h < 1 or out_w < 1:
        raise ValueError(f"bad output size {out_h}x{out_w}")

    def coords(n_in: int, n_out: int):
        if n_in == 1 or n_out == 1:
            pos = np.zeros(n_out)
        else:
            pos = np.arange(n_out) * ((n_in - 1) / (n_out - 1))
        lo = np.minimum(np.floor(pos).astype(int), n_in - 1)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, pos - lo

    y0, y1, fy = coords(h, out_h)
    x0, x1, fx = coords(w, out_w)
    top = att_map[y0][:, x0] * (1 - fx) + att_map[y0][:, x1] * fx
    bottom = att_map[y1][:, x0] * (1 - fx) + att_map[y1][:, x1] * fx
    return top * (1 - fy)[:, None] + bottom * fy[:, None]


def normalize_map(att_map: np.ndarray) -> np.ndarray:
    """Scale by the map's own maximum into [0, 1]; an all-zero map stays zero."""
    peak = float(att_map.max())
    return att_map / peak if peak > 0 else np.zeros_like(att_map)


def overlay(frame: np.ndarray, att_map: np.ndarray) -> np.ndarray:
    """Frame ``[H, W, C]`` multiplied by the max-normalised, upsampled map."""
    h, w = frame.shape[:2]
    up = bilinear_upsample(normalize_map(att_map), h, w)
    return frame * up[:, :, None]


def temporal_bar(weights: Sequence[float], cell: int = BAR_CELL) -> np.ndarray:
    """RGB strip of K square cells coloured by weight on :data:`BAR_COLORMAP` (range [0, 1])."""
    cmap = colormaps[BAR_COLORMAP]
    rgb = np.array([cmap(float(np.clip(wk, 0.0, 1.0)))[:3] for wk in weights])
    return np.repeat(np.repeat(rgb[None, :, :], cell, axis=0), cell, axis=1)


def save_png(image: np.ndarray, path: Path) -> None:
    arr = np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)
    if arr.ndim == 3 and arr.shape[2] == 1:
        arr = arr[:, :, 0]
    Image.fromarray(arr).save(path, format="PNG", optimize=False)


def check_compatible(model: Model, clip: VideoClip, input_hw: Optional[Sequence[int]] = None) -> None:
    channels = clip.frames.shape[-1]
    if channels != model.backbone.in_channels:
        raise ValueError(f"clip {clip.id!r} has {channels} channels, checkpoint expects {model.backbone.in_channels}")
    if input_hw is not None and tuple(input_hw) != clip.resolution:
        raise ValueError(f"clip {clip.id!r} is {clip.resolution}, checkpoint was trained on {tuple(input_hw)}")
    if clip.num_frames < model.segments:
        raise ValueError(f"clip {clip.id!r} has {clip.num_frames} frames, fewer than K={model.segments}")


def visualize_attention(
    model: Model,
    clip: VideoClip,
    out_dir: str | Path,
    input_hw: Optional[Sequence[int]] = None,
) -> list[Path]:
    """Write ``block{b}_seg{k}.png`` overlays and ``temporal_bar.png`` for one clip."""
    check_compatible(model, clip, input_hw)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    idx = segment_indices(clip.num_frames, model.segments, TEST_CENTER)
    frames = clip.frames[idx]
    with ad.no_grad():
        res = model_forward(frames, model)
    written = []
    for b, act in enumerate(res.blocks):
        maps = spatial_attention(act).value  # [K, H_b, W_b]
        for k in range(len(idx)):
            path = out / f"block{b}_seg{k}.png"
            save_png(overlay(frames[k], maps[k]), path)
            written.append(path)
    path = out / "temporal_bar.png"
    save_png(temporal_bar(res.tam.weights.value[0]), path)
    written.append(path)
    return written


def video_features(model: Model, clips: Sequence[VideoClip], chunk: int = 64) -> np.ndarray:
    """Attention-pooled video feature ``[N, D]`` under test-centre sampling."""
    k = model.segments
    out = []
    with ad.no_grad():
        for start in range(0, len(clips), chunk):
            part = clips[start : start + chunk]
            frames = np.stack([c.frames[segment_indices(c.num_frames, k, TEST_CENTER)] for c in part])
            out.append(model_forward(frames, model).video_feature.value)
    return np.concatenate(out) if out else np.zeros((0, model.backbone.feature_dim))


def export_embeddings(model: Model, clips: Sequence[VideoClip], path: str | Path) -> np.ndarray:
    """CSV with columns ``id, label, f0 .. f{D-1}``, one row per clip."""
    for c in clips:
        check_compatible(model, c)
    feats = video_features(model, clips)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["id", "label"] + [f"f{i}" for i in range(feats.shape[1])])
        for clip, row in zip(clips, feats):
            label = "" if clip.label is None else clip.label
            writer.writerow([clip.id, label] + [repr(float(x)) for x in row])
    return feats
