"""FROC / CPM for false-positive reduction, ROC AUC, patient-wise folds."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .exceptions import ConfigurationError, ContractError, UndefinedMetricError

FROC_TARGETS = (0.125, 0.25, 0.5, 1.0, 2.0, 4.0, 8.0)


@dataclass(frozen=True)
class Candidate:
    series_id: str
    position: tuple[float, float, float]
    score: float
    is_nodule: bool
    nodule_id: str | None = None

    def __post_init__(self):
        if not 0.0 <= self.score <= 1.0:
            raise ContractError(f"candidate score {self.score} outside [0, 1]")
        if self.is_nodule and not self.nodule_id:
            raise ContractError(f"true-nodule candidate in {self.series_id!r} lacks a nodule id")


@dataclass
class FROCCurve:
    """Step-function FROC. ``points`` are (fps_per_scan, sensitivity), one per distinct threshold."""

    points: list[tuple[float, float]]
    n_scans: int
    n_nodules: int
    sensitivities: tuple[float, ...] = field(default=())

    def sensitivity_at(self, fps: float) -> float:
        """Sensitivity of the largest achieved FP/scan <= fps (0 when none is)."""
        best_fp, best = -1.0, 0.0
        for fp, sens in self.points:
            if fp <= fps and (fp > best_fp or (fp == best_fp and sens > best)):
                best_fp, best = fp, sens
        return best

    @property
    def cpm(self) -> float:
        return cpm(self)


def froc(candidates: Sequence[Candidate], n_scans: int, targets=FROC_TARGETS) -> FROCCurve:
    if n_scans < 1:
        raise ConfigurationError(f"scan count must be >= 1, got {n_scans}")
    scores = np.array([c.score for c in candidates], dtype=np.float64)
    is_tp = np.array([c.is_nodule for c in candidates], dtype=bool)
    nodules = sorted({c.nodule_id for c in candidates if c.is_nodule})
    if not nodules:
        raise UndefinedMetricError("FROC needs at least one true nodule")
    # best score per nodule; a nodule counts as found once the threshold reaches it
    best = {}
    for c in candidates:
        if c.is_nodule:
            best[c.nodule_id] = max(best.get(c.nodule_id, -np.inf), c.score)
    nodule_scores = np.sort(np.fromiter(best.values(), dtype=np.float64))
    fp_scores = np.sort(scores[~is_tp])

    points = []
    for t in np.unique(scores)[::-1]:
        found = len(nodule_scores) - np.searchsorted(nodule_scores, t, side="left")
        fps = len(fp_scores) - np.searchsorted(fp_scores, t, side="left")
        points.append((fps / n_scans, found / len(nodules)))
    curve = FROCCurve(points, n_scans, len(nodules))
    curve.sensitivities = tuple(curve.sensitivity_at(f) for f in targets)
    return curve


def cpm(curve: FROCCurve) -> float:
    """Mean sensitivity over the seven FP/scan targets."""
    sens = curve.sensitivities or tuple(curve.sensitivity_at(f) for f in FROC_TARGETS)
    return float(np.mean(sens))


def auc(scores, labels) -> float:
    """Mann-Whitney AUC: P(positive outscores negative), ties count one half."""
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    labels = np.asarray(labels).reshape(-1)
    if scores.shape != labels.shape:
        raise ContractError(f"{len(scores)} scores but {len(labels)} labels")
    if not np.isin(labels, (0, 1)).all():
        raise ContractError("labels must be 0 or 1")
    pos = labels == 1
    n_pos, n_neg = int(pos.sum()), int((~pos).sum())
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUC needs at least one positive and one negative label")
    # midranks handle ties: rank-sum form of the U statistic
    order = np.argsort(scores, kind="mergesort")
    sorted_scores = scores[order]
    ranks = np.empty(len(scores))
    _, start, counts = np.unique(sorted_scores, return_index=True, return_counts=True)
    mid = start + (counts + 1) / 2.0
    ranks[order] = np.repeat(mid, counts)
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def kfold_by_patient(
    counts: Mapping[str, int] | Iterable[tuple[str, int]], k: int, seed: int = 0
) -> list[list[str]]:
    """Greedy balanced split: largest patients first, each to the currently lightest fold.

    Equal counts are ordered by a seeded shuffle; lightest-fold ties go to
    the lowest fold index.
    """
    items = list(counts.items()) if isinstance(counts, Mapping) else list(counts)
    ids = [pid for pid, _ in items]
    if len(set(ids)) != len(ids):
        raise ContractError("patient ids must be unique")
    if k < 1 or k > len(items):
        raise ConfigurationError(f"cannot make {k} folds from {len(items)} patients")
    rng = np.random.default_rng(seed)
    tiebreak = rng.permutation(len(items))
    order = sorted(range(len(items)), key=lambda i: (-items[i][1], tiebreak[i]))
    folds: list[list[str]] = [[] for _ in range(k)]
    load = [0] * k
    for i in order:
        j = min(range(k), key=lambda f: (load[f], f))
        folds[j].append(items[i][0])
        load[j] += items[i][1]
    return folds


def filter_candidates(candidates: Sequence[Candidate], threshold: float) -> list[Candidate]:
    """Keep candidates scoring at least ``threshold``, original order."""
    if not 0.0 <= threshold <= 1.0:
        raise ContractError(f"threshold must lie in [0, 1], got {threshold}")
    return [c for c in candidates if c.score >= threshold]


def format_report(values: Mapping[str, float]) -> str:
    return "".join(f"{key}={value:.6f}\n" for key, value in values.items())


def froc_report(curve: FROCCurve) -> dict[str, float]:
    out = {"cpm": cpm(curve)}
    for f, s in zip(FROC_TARGETS, curve.sensitivities):
        out[f"sens@{f:g}"] = s
    return out
