"""End-to-end helpers shared by the command line: cached preprocessing,
per-dataset inference and the k-fold harness."""

from __future__ import annotations

import hashlib
import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .candidates import DEFAULT_EPS_MM, DEFAULT_MIN_PTS, DEFAULT_THRESHOLD, NoduleCandidate, extract
from .froc import FROCReport, evaluate, kfold_split
from .model import SwinTempo
from .preprocess import preprocess_volume
from .training import Checkpoint, TrainConfig, TrainingVolume, train
from .volume_io import CTVolume, Dataset, LungMask, rasterize_annotations, read_volume, write_volume

log = logging.getLogger(__name__)

CACHE_ENV = "SWINTEMPO_CACHE"
_CACHE_VERSION = "1"


def cache_dir() -> Path | None:
    value = os.environ.get(CACHE_ENV)
    return Path(value) if value else None


def _cache_key(vol: CTVolume, mask: LungMask | None, input_size: int) -> str:
    h = hashlib.sha256()
    h.update(_CACHE_VERSION.encode())
    h.update(json.dumps([vol.series_id, list(vol.shape), list(vol.spacing_mm), list(vol.origin_mm), input_size]).encode())
    h.update(np.ascontiguousarray(vol.voxels, dtype="<f4").tobytes())
    if mask is not None:
        h.update(np.ascontiguousarray(mask.mask, dtype=np.uint8).tobytes())
    return h.hexdigest()


def preprocess_cached(vol: CTVolume, mask: LungMask | None, input_size: int) -> CTVolume:
    """Preprocess, reusing ``$SWINTEMPO_CACHE`` entries keyed by content hash."""
    root = cache_dir()
    if root is None:
        return preprocess_volume(vol, mask, target=input_size)
    path = root / _cache_key(vol, mask, input_size)
    if path.with_name(path.name + ".json").exists():
        try:
            return read_volume(path)
        except (OSError, ValueError) as exc:
            log.warning("ignoring unreadable cache entry %s: %s", path, exc)
    out = preprocess_volume(vol, mask, target=input_size)
    write_volume(out, path)
    return out


def training_volumes(ds: Dataset, input_size: int, series_ids: Sequence[str] | None = None) -> list[TrainingVolume]:
    out = []
    for sid in series_ids if series_ids is not None else ds.series_ids:
        vol = preprocess_cached(ds.volumes[sid], ds.masks.get(sid), input_size)
        labels = rasterize_annotations(vol.shape, vol.spacing_mm, vol.origin_mm, ds.annotations.get(sid, []))
        out.append(TrainingVolume(sid, vol.voxels.astype(np.float32), labels))
    return out


@dataclass
class ExtractSettings:
    threshold: float = DEFAULT_THRESHOLD
    eps_mm: float = DEFAULT_EPS_MM
    min_pts: int = DEFAULT_MIN_PTS


def infer_volume(
    model: SwinTempo, vol: CTVolume, mask: LungMask | None = None, settings: ExtractSettings | None = None
) -> tuple[list[NoduleCandidate], np.ndarray]:
    """Candidates (world mm) and the probability stack for one raw volume."""
    settings = settings or ExtractSettings()
    pre = preprocess_cached(vol, mask, model.cfg.input_size)
    probs = model.predict_slices(pre.voxels)
    cands = extract(probs, settings.threshold, settings.eps_mm, settings.min_pts, pre.spacing_mm, pre.origin_mm, vol.series_id)
    return cands, probs


def sort_all(cands: Sequence[NoduleCandidate]) -> list[NoduleCandidate]:
    """Descending probability across series; ties by (z, y, x), then series id."""
    return sorted(cands, key=lambda c: (-c.probability, c.center_mm[2], c.center_mm[1], c.center_mm[0], c.series_id))


def infer_dataset(
    model: SwinTempo,
    ds: Dataset,
    series_ids: Sequence[str] | None = None,
    settings: ExtractSettings | None = None,
    jobs: int = 1,
) -> tuple[list[NoduleCandidate], dict[str, np.ndarray]]:
    """Run every volume independently (each with a fresh hidden state).

    Volumes may run concurrently on ``jobs`` threads; the parameters are only
    read, and results are collected in series order so output does not depend
    on scheduling.
    """
    ids = list(series_ids if series_ids is not None else ds.series_ids)
    model.eval()

    def one(sid):
        return infer_volume(model, ds.volumes[sid], ds.masks.get(sid), settings)

    if jobs > 1 and len(ids) > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(one, ids))
    else:
        results = [one(sid) for sid in ids]
    cands = [c for cs, _ in results for c in cs]
    return sort_all(cands), {sid: probs for sid, (_, probs) in zip(ids, results)}


def train_on(ds: Dataset, cfg: TrainConfig, series_ids: Sequence[str] | None = None, out_dir=None) -> Checkpoint:
    data = training_volumes(ds, cfg.model_config().input_size, series_ids)
    return train(data, cfg, out_dir=out_dir)


def evaluate_dataset(
    model: SwinTempo,
    ds: Dataset,
    series_ids: Sequence[str] | None = None,
    settings: ExtractSettings | None = None,
    duplicates_as_fp: bool = True,
    jobs: int = 1,
) -> tuple[FROCReport, list[NoduleCandidate]]:
    ids = list(series_ids if series_ids is not None else ds.series_ids)
    cands, _ = infer_dataset(model, ds, ids, settings, jobs)
    report = evaluate(cands, ds.annotation_list(ids), len(ids), duplicates_as_fp, series_ids=ids)
    return report, cands


def crossval(
    ds: Dataset,
    cfg: TrainConfig,
    k: int,
    out_dir=None,
    settings: ExtractSettings | None = None,
    duplicates_as_fp: bool = True,
    jobs: int = 1,
) -> FROCReport:
    """Train on k-1 folds, score the held-out fold; the pooled report covers every scan once."""
    folds = kfold_split(ds.series_ids, k, cfg.seed)
    out_dir = Path(out_dir) if out_dir is not None else None
    pooled: list[NoduleCandidate] = []
    per_fold = []
    for i, held_out in enumerate(folds):
        train_ids = [s for s in ds.series_ids if s not in held_out]
        fold_dir = out_dir / f"fold_{i}" if out_dir is not None else None
        ckpt = train_on(ds, cfg, train_ids, fold_dir)
        report, cands = evaluate_dataset(ckpt.build_model(), ds, held_out, settings, duplicates_as_fp, jobs)
        log.info("fold %d: cpm %.4f over %d scans", i, report.cpm, len(held_out))
        per_fold.append({"fold": i, "series": held_out, "cpm": report.cpm, "detection_ratio": report.detection_ratio})
        if fold_dir is not None:
            report.write_json(fold_dir / "report.json")
        pooled.extend(cands)
    report = evaluate(sort_all(pooled), ds.annotation_list(), len(ds.series_ids), duplicates_as_fp, series_ids=ds.series_ids)
    report.extra["folds"] = per_fold
    return report


def save_overlay(slices: np.ndarray, probs: np.ndarray, path, threshold: float = DEFAULT_THRESHOLD, title: str = "") -> None:
    """Montage of every slice with the probability map and its threshold contour on top."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    n = slices.shape[0]
    cols = min(n, 8)
    rows = -(-n // cols)
    fig, axes = plt.subplots(rows, cols, figsize=(1.6 * cols, 1.6 * rows + 0.3), dpi=80, squeeze=False)
    for ax in axes.ravel():
        ax.axis("off")
    for z in range(n):
        ax = axes.ravel()[z]
        ax.imshow(slices[z], cmap="gray", interpolation="nearest")
        ax.imshow(np.ma.masked_less(probs[z], 0.05), cmap="autumn", alpha=0.5, vmin=0, vmax=1, interpolation="nearest")
        if (probs[z] > threshold).any():
            ax.contour(probs[z], levels=[threshold], colors="cyan", linewidths=0.6)
        ax.set_title(f"z={z}", fontsize=7)
    if title:
        fig.suptitle(title, fontsize=8)
    fig.tight_layout()
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)
