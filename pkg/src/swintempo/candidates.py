"""Turn per-slice probability maps into spherical 3D nodule candidates.

threshold -> 8-connected components per slice -> per-component summary ->
DBSCAN over component centroids in millimetres -> one sphere per cluster.

Candidate coordinates are world millimetres, ``(x, y, z)``.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from .errors import FormatError, ValidationError

CANDIDATE_HEADER = ["series_id", "coord_x", "coord_y", "coord_z", "radius_mm", "probability"]
RADIUS_FLOOR_MM = 1.0
DEFAULT_THRESHOLD = 0.5
DEFAULT_EPS_MM = 2.5
DEFAULT_MIN_PTS = 1

_EIGHT = np.ones((3, 3), dtype=bool)


@dataclass
class ProbabilityMap:
    values: np.ndarray
    slice_index: int = 0
    series_id: str = ""

    def __post_init__(self):
        self.values = np.asarray(self.values)
        if self.values.ndim != 2:
            raise ValidationError(f"probability map must be 2D, got shape {self.values.shape}")


@dataclass
class Component:
    """One 8-connected foreground region: its pixels and boundary pixels as ``(y, x)`` rows."""

    pixels: np.ndarray
    boundary: np.ndarray

    @property
    def area(self) -> int:
        return len(self.pixels)


@dataclass(frozen=True)
class SliceDetection:
    slice_index: int
    centroid_px: tuple[float, float]  # (x, y)
    area_px: float
    radius2d_px: float
    score: float


@dataclass(frozen=True)
class NoduleCandidate:
    series_id: str
    center_mm: tuple[float, float, float]
    radius_mm: float
    probability: float


def threshold_map(pm, t: float = DEFAULT_THRESHOLD) -> np.ndarray:
    """Pixels strictly above ``t``."""
    if not 0.0 < t < 1.0:
        raise ValidationError(f"threshold must lie in (0, 1), got {t}")
    values = pm.values if isinstance(pm, ProbabilityMap) else np.asarray(pm)
    return (values > t).astype(np.uint8)


def find_contours(mask: np.ndarray) -> list[Component]:
    """8-connected components in raster order of their first pixel."""
    mask = np.asarray(mask).astype(bool)
    labels, n = ndimage.label(mask, structure=_EIGHT)
    if n == 0:
        return []
    # interior = all four axis neighbours are in the same component
    padded = np.pad(labels, 1)
    same = np.ones_like(mask)
    for dy, dx in ((-1, 0), (1, 0), (0, -1), (0, 1)):
        same &= padded[1 + dy : 1 + dy + mask.shape[0], 1 + dx : 1 + dx + mask.shape[1]] == labels
    out = []
    for sl, lab in zip(ndimage.find_objects(labels), range(1, n + 1)):
        sub = labels[sl] == lab
        ys, xs = np.nonzero(sub)
        pix = np.stack([ys + sl[0].start, xs + sl[1].start], axis=1)
        edge = ~same[sl][sub]
        out.append(Component(pix, pix[edge]))
    return out


def summarize_contour(component: Component, pm, slice_index: int | None = None) -> SliceDetection:
    """Unweighted centroid, equal-area radius and max-probability score of a component."""
    if component.area == 0:
        raise ValidationError("cannot summarize an empty component")
    values = pm.values if isinstance(pm, ProbabilityMap) else np.asarray(pm)
    if slice_index is None:
        slice_index = pm.slice_index if isinstance(pm, ProbabilityMap) else 0
    ys, xs = component.pixels[:, 0], component.pixels[:, 1]
    area = float(component.area)
    score = float(np.clip(values[ys, xs].max(), 0.0, 1.0))
    return SliceDetection(
        int(slice_index),
        (float(xs.mean()), float(ys.mean())),
        area,
        math.sqrt(area / math.pi),
        score,
    )


def dbscan(points: np.ndarray, eps: float, min_pts: int) -> np.ndarray:
    """Cluster labels (``-1`` = noise) for ``points [n, d]``.

    ``min_pts`` counts the point itself. Points are visited in index order,
    so a border point reachable from several clusters joins the one created
    first.
    """
    points = np.asarray(points, dtype=np.float64)
    n = len(points)
    labels = np.full(n, -1, dtype=np.int64)
    if n == 0:
        return labels
    tree = cKDTree(points)
    neighbours = tree.query_ball_point(points, r=eps)
    core = np.array([len(nb) >= min_pts for nb in neighbours])
    cluster = 0
    for i in range(n):
        if labels[i] != -1 or not core[i]:
            continue
        labels[i] = cluster
        stack = list(neighbours[i])
        while stack:
            j = stack.pop()
            if labels[j] != -1:
                continue
            labels[j] = cluster
            if core[j]:
                stack.extend(neighbours[j])
        cluster += 1
    return labels


def cluster_3d(
    dets: Sequence[SliceDetection],
    eps: float = DEFAULT_EPS_MM,
    min_pts: int = DEFAULT_MIN_PTS,
    spacing_mm=(1.0, 1.0, 1.0),
    origin_mm=(0.0, 0.0, 0.0),
    series_id: str = "",
) -> list[NoduleCandidate]:
    """Merge per-slice detections of one series into spheres.

    ``spacing_mm``/``origin_mm`` are ``(z, y, x)`` as on :class:`CTVolume`.
    Clusters smaller than ``min_pts`` (DBSCAN noise) are dropped.
    """
    if not dets:
        return []
    sz, sy, sx = (float(s) for s in spacing_mm)
    oz, oy, ox = (float(o) for o in origin_mm)
    pts = np.array([(d.centroid_px[0] * sx, d.centroid_px[1] * sy, d.slice_index * sz) for d in dets])
    labels = dbscan(pts, eps, min_pts)
    out = []
    for lab in range(labels.max() + 1):
        idx = np.flatnonzero(labels == lab)
        members = [dets[i] for i in idx]
        mean = pts[idx].mean(axis=0)
        z_extent = (pts[idx, 2].max() - pts[idx, 2].min()) / 2.0
        radius = max(max(d.radius2d_px for d in members) * sx, z_extent, RADIUS_FLOOR_MM)
        out.append(
            NoduleCandidate(
                series_id,
                (float(mean[0] + ox), float(mean[1] + oy), float(mean[2] + oz)),
                float(radius),
                float(max(d.score for d in members)),
            )
        )
    return sort_candidates(out)


def sort_candidates(cands: Iterable[NoduleCandidate]) -> list[NoduleCandidate]:
    """Descending probability; ties broken by ascending (z, y, x)."""
    return sorted(cands, key=lambda c: (-c.probability, c.center_mm[2], c.center_mm[1], c.center_mm[0]))


def slice_detections(stack, t: float = DEFAULT_THRESHOLD) -> list[SliceDetection]:
    maps = _as_maps(stack)
    dets = []
    for pm in maps:
        for comp in find_contours(threshold_map(pm, t)):
            dets.append(summarize_contour(comp, pm))
    return dets


def extract(
    stack,
    t: float = DEFAULT_THRESHOLD,
    eps: float = DEFAULT_EPS_MM,
    min_pts: int = DEFAULT_MIN_PTS,
    spacing_mm=(1.0, 1.0, 1.0),
    origin_mm=(0.0, 0.0, 0.0),
    series_id: str = "",
) -> list[NoduleCandidate]:
    """Probability stack (``[Z, H, W]`` array or list of maps) to sorted candidates."""
    return cluster_3d(slice_detections(stack, t), eps, min_pts, spacing_mm, origin_mm, series_id)


def _as_maps(stack) -> list[ProbabilityMap]:
    if isinstance(stack, np.ndarray):
        if stack.ndim != 3:
            raise ValidationError(f"probability stack must be [Z, H, W], got {stack.shape}")
        return [ProbabilityMap(stack[z], z) for z in range(stack.shape[0])]
    return list(stack)


def write_candidates(cands: Sequence[NoduleCandidate], path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(CANDIDATE_HEADER)
        for c in cands:
            writer.writerow([c.series_id, *(repr(float(v)) for v in c.center_mm), repr(float(c.radius_mm)), repr(float(c.probability))])


def read_candidates(path) -> list[NoduleCandidate]:
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != CANDIDATE_HEADER:
            raise FormatError(f"{path}: expected header {','.join(CANDIDATE_HEADER)}, got {header}")
        out = []
        for row in reader:
            if not row:
                continue
            if len(row) != len(CANDIDATE_HEADER):
                raise FormatError(f"{path}:{reader.line_num}: expected {len(CANDIDATE_HEADER)} fields, got {len(row)}")
            try:
                x, y, z, r, p = (float(v) for v in row[1:])
            except ValueError as exc:
                raise FormatError(f"{path}:{reader.line_num}: {exc}") from exc
            out.append(NoduleCandidate(row[0], (x, y, z), r, p))
    return out
