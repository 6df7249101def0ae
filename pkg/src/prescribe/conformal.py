"""Split conformal prediction sets over the outcome predictor."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .eventlog import PrefixDataset
from .predictor import GbdtModel, predict_proba


class EmptyCalibrationSet(ValueError):
    pass


@dataclass(frozen=True)
class ConformalCalibrator:
    qhat_threshold: float
    alpha: float
    n_calib: int

    def to_dict(self) -> dict:
        return {"qhat_threshold": self.qhat_threshold, "alpha": self.alpha, "n_calib": self.n_calib}

    @classmethod
    def from_dict(cls, doc: dict) -> "ConformalCalibrator":
        return cls(float(doc["qhat_threshold"]), float(doc["alpha"]), int(doc["n_calib"]))


@dataclass(frozen=True)
class PredictionSet:
    contains0: bool
    contains1: bool

    def __iter__(self):
        if self.contains0:
            yield 0
        if self.contains1:
            yield 1

    def __contains__(self, label) -> bool:
        return (label == 0 and self.contains0) or (label == 1 and self.contains1)

    def __repr__(self) -> str:
        return "{" + ",".join(str(c) for c in self) + "}"


def conformal_rank(n: int, alpha: float) -> int:
    """1-based order statistic of the calibration scores used as threshold."""
    # guard against (n+1)(1-alpha) landing a hair above an integer
    r = math.ceil((n + 1) * (1.0 - alpha) - 1e-9)
    return min(max(r, 1), n)


def conformal_quantile(scores, alpha: float) -> float:
    """The ``ceil((n+1)(1-alpha))/n`` empirical quantile, capped at the maximum."""
    scores = np.sort(np.asarray(scores, dtype=float))
    if scores.size == 0:
        raise EmptyCalibrationSet("calibration set is empty")
    return float(scores[conformal_rank(scores.size, alpha) - 1])


def nonconformity_scores(model: GbdtModel, X, y) -> np.ndarray:
    p0, p1 = predict_proba(model, X)
    y = np.asarray(y)
    return 1.0 - np.where(y == 1, p1, p0)


def calibrate(model: GbdtModel, calib, alpha: float = 0.1, y=None) -> ConformalCalibrator:
    """Fit the conformal threshold on held-out data.

    ``calib`` is a :class:`PrefixDataset` or a feature matrix with labels in ``y``.
    """
    if not 0.0 < alpha < 1.0:
        raise ValueError(f"alpha must lie in (0, 1), got {alpha}")
    if isinstance(calib, PrefixDataset):
        y = calib.outcome if y is None else y
        calib = calib.X
    if len(calib) == 0:
        raise EmptyCalibrationSet("calibration set is empty")
    scores = nonconformity_scores(model, calib, y)
    return ConformalCalibrator(conformal_quantile(scores, alpha), alpha, len(scores))


def set_flags(calibrator: ConformalCalibrator, p0, p1) -> tuple[np.ndarray, np.ndarray]:
    q = calibrator.qhat_threshold
    return 1.0 - np.asarray(p0) <= q, 1.0 - np.asarray(p1) <= q


def prediction_set(calibrator: ConformalCalibrator, model: GbdtModel, features) -> PredictionSet | list[PredictionSet]:
    """Labels whose nonconformity score does not exceed the calibrated threshold.

    A single feature vector gives one set; a matrix gives a list.
    """
    single = np.ndim(features) == 1
    c0, c1 = set_flags(calibrator, *predict_proba(model, features))
    sets = [PredictionSet(bool(a), bool(b)) for a, b in zip(c0, c1)]
    return sets[0] if single else sets


def rho(pset: PredictionSet) -> float:
    """Confidence encoding: 0 for {0}, 1 for {1}, 0.5 when empty or both."""
    if pset.contains0 and not pset.contains1:
        return 0.0
    if pset.contains1 and not pset.contains0:
        return 1.0
    return 0.5


def rho_scores(calibrator: ConformalCalibrator, model: GbdtModel, features) -> np.ndarray:
    """Vectorized ``rho(prediction_set(...))`` over a feature matrix."""
    c0, c1 = set_flags(calibrator, *predict_proba(model, features))
    out = np.full(c0.shape, 0.5)
    out[c0 & ~c1] = 0.0
    out[c1 & ~c0] = 1.0
    return out


def coverage(calibrator: ConformalCalibrator, model: GbdtModel, X, y) -> float:
    c0, c1 = set_flags(calibrator, *predict_proba(model, X))
    y = np.asarray(y)
    return float(np.mean(np.where(y == 1, c1, c0)))
