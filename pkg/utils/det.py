# utils/det.py
"""
TriggerTune - Detection Error Trade-off
DET curves over keyword scores and FRR at a false-accepts-per-hour operating point
"""
from dataclasses import dataclass
from pathlib import Path
from typing import List, Sequence, Tuple, Union

import numpy as np

from utils.errors import DataError

DET_HEADER = ("threshold", "frr", "fa_per_hr")


@dataclass(frozen=True)
class DetCurve:
    """Thresholds (strictly increasing) with the FRR and FA/hr of accepting score >= threshold"""
    thresholds: np.ndarray
    frr: np.ndarray
    fa_per_hr: np.ndarray

    @property
    def points(self) -> List[Tuple[float, float, float]]:
        return list(zip(self.thresholds.tolist(), self.frr.tolist(), self.fa_per_hr.tolist()))

    def is_monotone(self) -> bool:
        """Thresholds strictly increase, FRR never decreases and FA/hr never increases"""
        return bool(
            np.all(np.diff(self.thresholds) > 0)
            and np.all(np.diff(self.frr) >= 0)
            and np.all(np.diff(self.fa_per_hr) <= 0)
        )

    def to_tsv(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        lines = ["\t".join(DET_HEADER)]
        lines += [f"{t!r}\t{f!r}\t{a!r}" for t, f, a in self.points]
        path.write_text("\n".join(lines) + "\n", encoding="utf-8")
        return path


@dataclass(frozen=True)
class OperatingPoint:
    threshold: float
    frr: float
    fa_per_hr: float
    met: bool


def _validated(scores: Sequence[float], name: str) -> np.ndarray:
    values = np.asarray(scores, dtype=np.float64).reshape(-1)
    if values.size == 0:
        raise DataError(f"{name} score set is empty")
    if not np.all(np.isfinite(values)):
        raise DataError(f"{name} scores must be finite")
    return np.sort(values)


def rates_at(positives: Sequence[float], negatives: Sequence[float], negative_hours: float,
             thresholds) -> Tuple[np.ndarray, np.ndarray]:
    """
    FRR and FA/hr at arbitrary thresholds (accept iff score >= threshold)

    Example:
        rates_at([0.9, 0.8, 0.2], [0.1, 0.7], 1.0, [0.75])  # ([1/3], [0.0])
    """
    if negative_hours <= 0:
        raise DataError(f"negative_hours must be positive, got {negative_hours}")
    pos = _validated(positives, "positive")
    neg = _validated(negatives, "negative")
    tau = np.asarray(thresholds, dtype=np.float64)
    frr = np.searchsorted(pos, tau, side="left") / pos.size
    fa = (neg.size - np.searchsorted(neg, tau, side="left")) / negative_hours
    return frr, fa


def det_curve(positives: Sequence[float], negatives: Sequence[float], negative_hours: float) -> DetCurve:
    """
    Sweep every distinct score as a threshold

    Args:
        positives (Sequence[float]): Keyword trial scores
        negatives (Sequence[float]): Non-keyword trial scores
        negative_hours (float): Total duration represented by the negatives

    Returns:
        DetCurve: One point per distinct score

    Example:
        curve = det_curve([0.9, 0.8, 0.2], [0.1, 0.7], 1.0)
    """
    pos = _validated(positives, "positive")
    neg = _validated(negatives, "negative")
    thresholds = np.unique(np.concatenate([pos, neg]))
    frr, fa = rates_at(pos, neg, negative_hours, thresholds)
    return DetCurve(thresholds=thresholds, frr=frr, fa_per_hr=fa)


def frr_at_fa(curve: DetCurve, target_fa_per_hr: float = 0.01) -> OperatingPoint:
    """
    FRR at the smallest threshold whose FA/hr is within the target (no interpolation)

    When no threshold meets the target the point at the largest threshold is
    returned with met=False.
    """
    ok = np.nonzero(curve.fa_per_hr <= target_fa_per_hr)[0]
    met = ok.size > 0
    k = int(ok[0]) if met else len(curve.thresholds) - 1
    return OperatingPoint(
        threshold=float(curve.thresholds[k]),
        frr=float(curve.frr[k]),
        fa_per_hr=float(curve.fa_per_hr[k]),
        met=met,
    )
