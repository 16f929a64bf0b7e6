"""Bounding-box normalised error, cumulative error curves and yaw-balanced subsets."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ContractError, DataError
from .landmarks import BoundingBox, LandmarkSet

AUC_THRESHOLD = 0.07
CED_STEP = 1e-4
CED_MAX = 0.1
YAW_BINS = ((0.0, 30.0), (30.0, 60.0), (60.0, 90.0))
YAW_BIN_LABELS = ("[0,30)", "[30,60)", "[60,90]")
# errors this close to a threshold count as sitting on it (back-projection
# round-off turns a perfect prediction into ~1e-16)
TIE_TOLERANCE = 1e-12


@dataclass(frozen=True)
class EvalResult:
    nme: float
    id: str = ""
    yaw: float | None = None
    num_landmarks: int = 0

    def __post_init__(self):
        if not (np.isfinite(self.nme) and self.nme >= 0):
            raise ContractError(f"NME must be finite and non-negative, got {self.nme}")


@dataclass(frozen=True)
class CedCurve:
    thresholds: np.ndarray
    fractions: np.ndarray

    def at(self, threshold: float) -> float:
        """Right-continuous step lookup."""
        i = np.searchsorted(self.thresholds, threshold, side="right") - 1
        return 0.0 if i < 0 else float(self.fractions[i])

    def to_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["threshold", "fraction"])
            for t, f in zip(self.thresholds, self.fractions):
                w.writerow([f"{t:.6g}", repr(float(f))])


def nme(gt: LandmarkSet, pred: LandmarkSet, bbox: BoundingBox) -> float:
    """Mean point-to-point distance over landmarks visible in both sets,
    divided by sqrt(w*h) of the ground-truth box.  Only x, y are used."""
    return nme_and_count(gt, pred, bbox)[0]


def nme_and_count(gt: LandmarkSet, pred: LandmarkSet, bbox: BoundingBox) -> tuple[float, int]:
    if len(gt) != len(pred):
        raise ContractError(f"landmark count mismatch: gt {len(gt)} vs prediction {len(pred)}")
    d = bbox.d
    if not d > 0:
        raise ContractError(f"degenerate bounding box {bbox}: d = {d}")
    used = gt.visible & pred.visible
    n = int(used.sum())
    if n == 0:
        raise ContractError("no landmark is visible in both ground truth and prediction")
    dist = np.linalg.norm(gt.xy[used] - pred.xy[used], axis=1)
    return float(np.sum(dist / d) / n), n


def _errors(results) -> np.ndarray:
    errs = np.array([r.nme if isinstance(r, EvalResult) else float(r) for r in results], dtype=np.float64)
    if errs.size == 0:
        raise ContractError("no results")
    return errs


def ced_curve(results: Sequence[EvalResult], step: float = CED_STEP, max_error: float = CED_MAX) -> CedCurve:
    """Fraction of samples with NME <= t on the grid t = 0, step, ..., max_error."""
    errs = np.sort(_errors(results))
    n_steps = int(round(max_error / step))
    # rounding keeps decimal grid points such as 0.03 exact
    thresholds = np.round(np.arange(n_steps + 1) * step, 12)
    counts = np.searchsorted(errs, thresholds + TIE_TOLERANCE, side="right")
    return CedCurve(thresholds, counts / errs.size)


def auc(curve: CedCurve, threshold: float = AUC_THRESHOLD) -> float:
    """Trapezoidal area under the CED on [0, threshold], divided by threshold."""
    if not threshold > 0:
        raise ValueError(f"threshold must be positive, got {threshold}")
    t, f = curve.thresholds, curve.fractions
    keep = t <= threshold + 1e-12
    t, f = t[keep], f[keep]
    if t[-1] < threshold:
        t = np.append(t, threshold)
        f = np.append(f, curve.at(threshold))
    if len(f) > 1:
        # the area does not depend on the value at the endpoint; use the left
        # limit so samples sitting exactly at the threshold add nothing
        f = f.copy()
        f[-1] = f[-2]
    return float(np.trapezoid(f, t) / threshold)


def auc_from_results(results, threshold: float = AUC_THRESHOLD, step: float = CED_STEP) -> float:
    return auc(ced_curve(results, step, max(CED_MAX, threshold)), threshold)


def failure_rate(results, threshold: float = AUC_THRESHOLD) -> float:
    errs = _errors(results)
    return float(np.count_nonzero(errs > threshold + TIE_TOLERANCE) / errs.size)


def yaw_bin(yaw: float) -> int:
    a = abs(yaw)
    if a > 90:
        raise DataError(f"|yaw| = {a} outside [0, 90]")
    return 0 if a < 30 else 1 if a < 60 else 2


def balanced_subset(items: Sequence, per_bin: int, seed: int = 0, yaw_of=None) -> list:
    """Exactly ``per_bin`` items from each |yaw| bin, drawn uniformly with a
    seeded generator; original order is preserved within the output."""
    yaw_of = yaw_of or (lambda item: item.yaw)
    bins: list[list[int]] = [[], [], []]
    for i, item in enumerate(items):
        yaw = yaw_of(item)
        if yaw is None:
            raise DataError(f"item {i} has no yaw label")
        bins[yaw_bin(yaw)].append(i)
    rng = np.random.default_rng(seed)
    chosen = []
    for b, members in enumerate(bins):
        if len(members) < per_bin:
            raise DataError(f"yaw bin {YAW_BIN_LABELS[b]} has {len(members)} items, need {per_bin}")
        chosen.extend(rng.choice(members, size=per_bin, replace=False).tolist())
    return [items[i] for i in sorted(chosen)]
