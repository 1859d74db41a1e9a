"""Candidate/annotation matching, FROC analysis, CPM and k-fold splits.

A candidate hits an annotation when its centre lies strictly inside the
annotation sphere (distance < diameter / 2). Candidates are matched
greedily in descending probability and each annotation can be claimed once.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .candidates import NoduleCandidate
from .errors import ValidationError
from .volume_io import Annotation

FP_RATES = (0.125, 0.25, 0.5, 1.0, 2.0, 4.0, 8.0)

TP, FP, IGNORED = "TP", "FP", "IGNORED"


@dataclass
class MatchResult:
    """Per-candidate labels (aligned with the input order) and per-annotation hits."""

    probabilities: list[float]
    labels: list[str]
    matched: list[int | None]
    detected: list[bool]

    @property
    def n_tp(self) -> int:
        return sum(self.detected)

    @property
    def n_fn(self) -> int:
        return len(self.detected) - self.n_tp

    @property
    def n_fp(self) -> int:
        return self.labels.count(FP)


@dataclass
class FROCReport:
    curve: list[tuple[float, float]]
    thresholds: list[float]
    sensitivities: dict[float, float]
    cpm: float
    n_scans: int
    n_annotations: int
    n_detected: int
    n_candidates: int
    extra: dict = field(default_factory=dict)

    @property
    def detection_ratio(self) -> float:
        """Fraction of annotations hit by any candidate, regardless of FP rate."""
        return self.n_detected / self.n_annotations if self.n_annotations else 0.0

    def to_dict(self) -> dict:
        return {
            "sensitivities": {_rate_key(r): s for r, s in self.sensitivities.items()},
            "cpm": self.cpm,
            "curve": [[fp, s] for fp, s in self.curve],
            "thresholds": list(self.thresholds),
            "n_scans": self.n_scans,
            "n_annotations": self.n_annotations,
            "n_detected": self.n_detected,
            "n_candidates": self.n_candidates,
            "detection_ratio": self.detection_ratio,
            **self.extra,
        }

    def write_json(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=False) + "\n", encoding="utf-8")


def _rate_key(rate: float) -> str:
    return repr(float(rate))


def _order(cands: Sequence[NoduleCandidate]) -> list[int]:
    return sorted(
        range(len(cands)),
        key=lambda i: (-cands[i].probability, cands[i].center_mm[2], cands[i].center_mm[1], cands[i].center_mm[0], i),
    )


def is_hit(cand: NoduleCandidate, ann: Annotation) -> bool:
    return math.dist(cand.center_mm, ann.center_mm) < ann.radius_mm


def match(cands: Sequence[NoduleCandidate], anns: Sequence[Annotation], duplicates_as_fp: bool = True) -> MatchResult:
    """Greedy one-to-one matching for a single series.

    A candidate inside several unclaimed annotations claims the nearest.
    With ``duplicates_as_fp=False`` a candidate that only falls inside
    already-claimed annotations is labelled ``IGNORED`` instead of ``FP``.
    """
    labels: list[str] = [FP] * len(cands)
    matched: list[int | None] = [None] * len(cands)
    claimed = [False] * len(anns)
    for i in _order(cands):
        c = cands[i]
        best, best_d = None, math.inf
        inside_claimed = False
        for j, a in enumerate(anns):
            d = math.dist(c.center_mm, a.center_mm)
            if d >= a.radius_mm:
                continue
            if claimed[j]:
                inside_claimed = True
            elif d < best_d:
                best, best_d = j, d
        if best is not None:
            claimed[best] = True
            labels[i], matched[i] = TP, best
        elif inside_claimed and not duplicates_as_fp:
            labels[i] = IGNORED
    return MatchResult([float(c.probability) for c in cands], labels, matched, claimed)


def sensitivity(tp: int, fn: int) -> float:
    if tp < 0 or fn < 0:
        raise ValidationError("tp and fn must be non-negative")
    if tp + fn == 0:
        raise ValidationError("sensitivity is undefined when tp + fn = 0")
    return tp / (tp + fn)


def froc(matches: Sequence[MatchResult], n_scans: int, rates: Sequence[float] = FP_RATES) -> FROCReport:
    """FROC curve from per-series match results.

    A global threshold sweeps every distinct candidate probability; at
    threshold ``t`` the candidates with probability >= ``t`` are kept. The
    sensitivity reported at rate ``f`` is the best operating point whose
    false positives per scan do not exceed ``f`` (0 if none does).
    """
    if n_scans < 1:
        raise ValidationError("n_scans must be >= 1")
    probs, is_fp, tp_probs = [], [], []
    n_ann = 0
    for m in matches:
        n_ann += len(m.detected)
        for p, lab in zip(m.probabilities, m.labels):
            probs.append(p)
            is_fp.append(lab == FP)
            if lab == TP:
                tp_probs.append(p)
    probs = np.asarray(probs, dtype=np.float64)
    is_fp = np.asarray(is_fp, dtype=bool)
    tp_probs = np.sort(np.asarray(tp_probs, dtype=np.float64))
    fp_probs = np.sort(probs[is_fp])

    thresholds = np.unique(probs)[::-1]
    # counts of entries >= t via searchsorted on ascending arrays
    fp_counts = len(fp_probs) - np.searchsorted(fp_probs, thresholds, side="left")
    tp_counts = len(tp_probs) - np.searchsorted(tp_probs, thresholds, side="left")
    fps = fp_counts / n_scans
    sens = tp_counts / n_ann if n_ann else np.zeros(len(thresholds))

    curve = [(float(f), float(s)) for f, s in zip(fps, sens)]
    report_sens = {}
    for r in rates:
        ok = fps <= r
        report_sens[float(r)] = float(sens[ok].max()) if ok.any() else 0.0
    cpm = float(sum(report_sens.values()) / len(report_sens))
    return FROCReport(
        curve=curve,
        thresholds=[float(t) for t in thresholds],
        sensitivities=report_sens,
        cpm=cpm,
        n_scans=n_scans,
        n_annotations=n_ann,
        n_detected=int(len(tp_probs)),
        n_candidates=int(len(probs)),
    )


def evaluate(
    cands: Sequence[NoduleCandidate],
    anns: Sequence[Annotation],
    n_scans: int,
    duplicates_as_fp: bool = True,
    series_ids: Sequence[str] | None = None,
) -> FROCReport:
    """Match per series and compute the FROC report.

    ``series_ids`` restricts scoring to those scans; candidates for other
    series are then ignored.
    """
    by_c: dict[str, list[NoduleCandidate]] = {}
    by_a: dict[str, list[Annotation]] = {}
    for c in cands:
        by_c.setdefault(c.series_id, []).append(c)
    for a in anns:
        by_a.setdefault(a.series_id, []).append(a)
    ids = sorted(set(by_c) | set(by_a)) if series_ids is None else list(series_ids)
    matches = [match(by_c.get(s, []), by_a.get(s, []), duplicates_as_fp) for s in ids]
    return froc(matches, n_scans)


def kfold_split(series_ids: Sequence[str], k: int, seed: int = 0) -> list[list[str]]:
    """Seeded, balanced partition into ``k`` folds (sizes differ by at most one)."""
    ids = list(series_ids)
    n = len(ids)
    if k < 1 or k > n:
        raise ValidationError(f"cannot split {n} series into {k} folds")
    if len(set(ids)) != n:
        raise ValidationError("series ids must be unique")
    perm = np.random.default_rng(seed).permutation(n)
    folds, start = [], 0
    for f in range(k):
        size = n // k + (1 if f < n % k else 0)
        folds.append(sorted(ids[i] for i in perm[start : start + size]))
        start += size
    return folds


def plot_froc(report: FROCReport, path, title: str = "FROC") -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 4), dpi=100)
    if report.curve:
        fp = [0.0] + [p[0] for p in report.curve]
        se = [0.0] + [p[1] for p in report.curve]
        ax.step(fp, se, where="post", color="tab:blue", label="FROC")
    rates = list(report.sensitivities)
    ax.plot(rates, [report.sensitivities[r] for r in rates], "o", color="tab:red", label=f"CPM = {report.cpm:.3f}")
    ax.set_xscale("symlog", linthresh=0.125)
    ax.set_xlim(0, max(8.0, *(p[0] for p in report.curve)) if report.curve else 8.0)
    ax.set_ylim(0, 1.02)
    ax.set_xlabel("false positives per scan")
    ax.set_ylabel("sensitivity")
    ax.set_title(title)
    ax.grid(True, alpha=0.3)
    ax.legend(loc="lower right")
    fig.tight_layout()
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)
