"""HU clipping, lung isolation, standardization and slice resizing.

The pipeline order is fixed: clip -> mask -> standardize -> resize.
"""

from __future__ import annotations

import numpy as np
import torch
import torch.nn.functional as F

from .errors import ValidationError
from .volume_io import CTVolume, LungMask

HU_MIN = -1200.0
HU_MAX = 600.0
STD_EPS = 1e-8


def clip_hu(vol: CTVolume, lo: float = HU_MIN, hi: float = HU_MAX) -> CTVolume:
    return vol.with_voxels(np.clip(vol.voxels, lo, hi))


def apply_lung_mask(vol: CTVolume, mask: LungMask, fill: float = HU_MIN) -> CTVolume:
    """Replace everything outside the lungs with ``fill`` (the clip floor)."""
    if mask.shape != vol.shape:
        raise ValidationError(f"mask shape {mask.shape} does not match volume shape {vol.shape}")
    return vol.with_voxels(np.where(mask.mask.astype(bool), vol.voxels, np.asarray(fill, vol.voxels.dtype)))


def standardize(vol: CTVolume, per_slice: bool = False) -> CTVolume:
    """Zero-mean, unit-variance voxels; statistics over the whole volume by default."""
    v = np.asarray(vol.voxels, dtype=np.float64)
    if v.size == 0:
        raise ValidationError("cannot standardize an empty volume")
    axes = (1, 2) if per_slice else None
    mu = v.mean(axis=axes, keepdims=True)
    sigma = v.std(axis=axes, keepdims=True)
    out = (v - mu) / np.maximum(sigma, STD_EPS)
    return vol.with_voxels(out.astype(vol.voxels.dtype if vol.voxels.dtype.kind == "f" else np.float32))


def resize_slice(slice_: np.ndarray, target: int) -> np.ndarray:
    """Bilinear resize of a 2D slice to ``target x target`` (pixel-centre aligned)."""
    slice_ = np.asarray(slice_)
    if slice_.ndim != 2 or min(slice_.shape) < 2:
        raise ValidationError(f"resize_slice needs a 2D slice with H, W >= 2, got {slice_.shape}")
    if slice_.shape == (target, target):
        return slice_.copy()
    t = torch.from_numpy(np.ascontiguousarray(slice_, dtype=np.float64))[None, None]
    out = F.interpolate(t, size=(target, target), mode="bilinear", align_corners=False)
    return out[0, 0].numpy().astype(slice_.dtype if slice_.dtype.kind == "f" else np.float32)


def resize_volume(vol: CTVolume, target: int) -> CTVolume:
    """Resize every slice in-plane and update spacing/origin to match.

    With pixel-centre alignment, new pixel ``j`` sits at old coordinate
    ``(j + 0.5) * scale - 0.5``.
    """
    _, h, w = vol.shape
    if (h, w) == (target, target):
        return vol.with_voxels(vol.voxels.copy())
    voxels = np.stack([resize_slice(s, target) for s in vol.voxels])
    sy, sx = h / target, w / target
    spacing = (vol.spacing_mm[0], vol.spacing_mm[1] * sy, vol.spacing_mm[2] * sx)
    origin = (
        vol.origin_mm[0],
        vol.origin_mm[1] + (sy - 1.0) / 2.0 * vol.spacing_mm[1],
        vol.origin_mm[2] + (sx - 1.0) / 2.0 * vol.spacing_mm[2],
    )
    return CTVolume(vol.series_id, voxels, spacing, origin)


def preprocess_volume(
    vol: CTVolume,
    mask: LungMask | None = None,
    target: int | None = None,
    per_slice: bool = False,
) -> CTVolume:
    """Full chain: clip, isolate lungs (if a mask is given), standardize, resize."""
    vol.validate()
    out = clip_hu(vol)
    if mask is not None:
        out = apply_lung_mask(out, mask)
    out = standardize(out, per_slice=per_slice)
    if target is not None:
        out = resize_volume(out, target)
    return out
