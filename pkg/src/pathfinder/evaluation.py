"""Accuracy metrics, coverage-importance RMSE, empirical CDFs and the S2MT protocol."""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from typing import Callable, Mapping, Sequence

import numpy as np

from .core import Sample, building_mask

log = logging.getLogger(__name__)

COVERAGE_LEVELS = (40, 30, 20, 10, 5)
METRIC_NAMES = ("mse", "rmse", "nmse", "mse_r", "rmse_r", "nmse_r")


def _pair(y, yhat) -> tuple[np.ndarray, np.ndarray]:
    y = np.asarray(getattr(y, "values", y), dtype=np.float64)
    yhat = np.asarray(getattr(yhat, "values", yhat), dtype=np.float64)
    if y.shape != yhat.shape:
        raise ValueError(f"shape mismatch: {y.shape} vs {yhat.shape}")
    return y, yhat


def global_metrics(y, yhat) -> tuple[float, float, float]:
    """(MSE, RMSE, NMSE) over all pixels."""
    y, yhat = _pair(y, yhat)
    sq = np.sum((y - yhat) ** 2)
    energy = np.sum(y**2)
    if energy <= 0:
        raise ValueError("NMSE undefined: ground truth is identically zero")
    mse = float(sq / y.size)
    return mse, math.sqrt(mse), float(sq / energy)


def receiver_metrics(y, yhat, receiver) -> tuple[float, float, float]:
    """(MSE-R, RMSE-R, NMSE-R) restricted to ``receiver == 1`` pixels."""
    y, yhat = _pair(y, yhat)
    m = np.asarray(getattr(receiver, "values", receiver), dtype=np.float64)
    if m.shape != y.shape:
        raise ValueError(f"mask shape {m.shape} does not match {y.shape}")
    count = m.sum()
    if count <= 0:
        raise ValueError("receiver region is empty")
    sq = np.sum(m * (y - yhat) ** 2)
    energy = np.sum(m * y**2)
    if energy <= 0:
        raise ValueError("NMSE-R undefined: ground truth is zero on the receiver region")
    mse = float(sq / count)
    return mse, math.sqrt(mse), float(sq / energy)


def coverage_selection(y, p: float) -> np.ndarray:
    """Boolean mask of the top ``p`` percent of pixels by ground-truth value.

    With n pixels, k = ceil(n * p / 100); every pixel whose value is at least
    the k-th largest value is selected, so ties at the threshold are kept.
    """
    if not 0 < p <= 100:
        raise ValueError(f"coverage percent must lie in (0, 100], got {p}")
    y = np.asarray(getattr(y, "values", y), dtype=np.float64)
    n = y.size
    k = math.ceil(Fraction(n) * Fraction(str(p)) / 100)
    k = min(max(k, 1), n)
    threshold = np.partition(y.ravel(), n - k)[n - k]
    return y >= threshold


def coverage_rmse(y, yhat, p: float) -> float:
    y, yhat = _pair(y, yhat)
    sel = coverage_selection(y, p)
    if not sel.any():
        raise ValueError("coverage selection is empty")
    return math.sqrt(float(np.mean((y[sel] - yhat[sel]) ** 2)))


@dataclass
class CdfCurve:
    x: np.ndarray
    f: np.ndarray

    def __call__(self, v: float) -> float:
        idx = np.searchsorted(self.x, v, side="right")
        return 0.0 if idx == 0 else float(self.f[idx - 1])

    def on_grid(self, xs) -> "CdfCurve":
        """Resample onto fixed points (compact form for reports)."""
        xs = np.asarray(xs, dtype=np.float64)
        idx = np.searchsorted(self.x, xs, side="right")
        f = np.where(idx == 0, 0.0, self.f[np.maximum(idx - 1, 0)])
        return CdfCurve(xs, f)

    def to_json(self) -> dict:
        return {"x": self.x.tolist(), "f": self.f.tolist()}


def cdf(values) -> CdfCurve:
    """Empirical CDF evaluated on the sorted unique values."""
    v = np.asarray(values, dtype=np.float64).ravel()
    if v.size == 0:
        raise ValueError("cdf of an empty set")
    xs, counts = np.unique(v, return_counts=True)
    return CdfCurve(xs, np.cumsum(counts) / v.size)


@dataclass
class MetricReport:
    """Six-metric summary; aggregates are unweighted means of the per-sample rows."""

    mse: float
    rmse: float
    nmse: float
    mse_r: float
    rmse_r: float
    nmse_r: float
    count: int
    per_sample: list[dict] = field(default_factory=list)

    def row(self) -> dict:
        return {k: getattr(self, k) for k in METRIC_NAMES}

    def to_json(self, with_samples: bool = True) -> dict:
        d = asdict(self)
        if not with_samples:
            d.pop("per_sample")
        return d


def sample_metrics(y, yhat, receiver) -> dict:
    mse, rmse, nmse = global_metrics(y, yhat)
    mse_r, rmse_r, nmse_r = receiver_metrics(y, yhat, receiver)
    return {"mse": mse, "rmse": rmse, "nmse": nmse, "mse_r": mse_r, "rmse_r": rmse_r, "nmse_r": nmse_r}


def metric_report(samples: Sequence[Sample], predictions: Sequence[np.ndarray]) -> MetricReport:
    if len(samples) != len(predictions):
        raise ValueError(f"{len(samples)} samples but {len(predictions)} predictions")
    if not samples:
        raise ValueError("no samples to evaluate")
    rows = []
    for s, yhat in zip(samples, predictions):
        if s.target is None:
            raise ValueError(f"sample {s.sample_id} has no target")
        row = sample_metrics(s.target.values, yhat, building_mask(s.env).complement())
        row["sample_id"] = s.sample_id
        rows.append(row)
    agg = {k: float(np.mean([r[k] for r in rows])) for k in METRIC_NAMES}
    return MetricReport(**agg, count=len(rows), per_sample=rows)


def coverage_curve(
    samples: Sequence[Sample], predictions: Sequence[np.ndarray], levels: Sequence[float] = COVERAGE_LEVELS
) -> list[tuple[float, float]]:
    """(p, mean per-sample coverage RMSE) for each importance level."""
    return [
        (p, float(np.mean([coverage_rmse(s.target.values, yh, p) for s, yh in zip(samples, predictions)])))
        for p in levels
    ]


Predictor = Callable[[Sequence[Sample]], Sequence[np.ndarray]]


def evaluate_s2mt(predictor: Predictor, sets: Mapping[int, Sequence[Sample]]) -> dict[int, MetricReport]:
    """One report row per transmitter count; empty sets are left out."""
    out = {}
    for n in sorted(sets):
        samples = list(sets[n])
        if not samples:
            log.warning("no benchmark samples for N=%d, row omitted", n)
            continue
        out[n] = metric_report(samples, predictor(samples))
    return out


def oracle_predictor(samples: Sequence[Sample]) -> list[np.ndarray]:
    return [np.array(s.target.values) for s in samples]


def constant_predictor(value: float) -> Predictor:
    def predict(samples):
        return [np.full(s.shape, value, dtype=np.float64) for s in samples]

    return predict
