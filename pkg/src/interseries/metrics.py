"""Forecast accuracy metrics, evaluated in original demand units."""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from .errors import UndefinedMetricError


def _observed(actuals, forecasts, mask):
    a = np.asarray(actuals, dtype=float)
    f = np.asarray(forecasts, dtype=float)
    if a.shape != f.shape:
        raise ValueError(f"actuals {a.shape} and forecasts {f.shape} differ in shape")
    if mask is None:
        keep = np.ones(a.shape, dtype=bool)
    else:
        keep = np.broadcast_to(np.asarray(mask, dtype=bool), a.shape)
    return a[keep], f[keep]


def wmape(actuals, forecasts, mask=None) -> float:
    """Sum of absolute errors over the sum of absolute actuals, across all series and steps."""
    a, f = _observed(actuals, forecasts, mask)
    if a.size == 0:
        raise UndefinedMetricError("wMAPE: no observed actuals")
    denom = np.sort(np.abs(a)).sum()
    if denom == 0:
        raise UndefinedMetricError("wMAPE: actuals sum to zero")
    return float(np.sort(np.abs(a - f)).sum() / denom)


def rmse(actuals, forecasts, mask=None) -> float:
    a, f = _observed(actuals, forecasts, mask)
    if a.size == 0:
        raise UndefinedMetricError("RMSE: no observed entries")
    return float(math.sqrt(np.sort((a - f) ** 2).sum() / a.size))


def rmsse(history, actuals, forecasts) -> float:
    """Root mean squared error of one series scaled by its in-sample one-step naive error."""
    y = np.asarray(history, dtype=float)
    a = np.asarray(actuals, dtype=float)
    f = np.asarray(forecasts, dtype=float)
    if y.size < 2:
        raise UndefinedMetricError("RMSSE: need at least two historical observations")
    if a.size == 0 or a.shape != f.shape:
        raise UndefinedMetricError("RMSSE: empty or misaligned horizon")
    naive = np.sum(np.diff(y) ** 2) / (y.size - 1)
    if naive == 0:
        raise UndefinedMetricError("RMSSE: constant history gives a zero denominator")
    return float(math.sqrt(np.sum((a - f) ** 2) / a.size / naive))


def rmsse_panel(histories: Sequence, actuals: Sequence, forecasts: Sequence) -> tuple[float, int]:
    """Unweighted mean RMSSE over series; returns ``(score, excluded)``.

    Series whose RMSSE is undefined are left out and counted.
    """
    scores, excluded = [], 0
    for y, a, f in zip(histories, actuals, forecasts):
        try:
            scores.append(rmsse(y, a, f))
        except UndefinedMetricError:
            excluded += 1
    if not scores:
        raise UndefinedMetricError("RMSSE: undefined for every series")
    return float(np.sort(scores).sum() / len(scores)), excluded


def wbias(actual_means, forecast_means, volumes) -> float:
    """Volume-weighted mean of ``|mean(actual) - mean(forecast)|`` per series."""
    am = np.asarray(actual_means, dtype=float)
    fm = np.asarray(forecast_means, dtype=float)
    v = np.asarray(volumes, dtype=float)
    total = v.sum()
    if total <= 0:
        raise UndefinedMetricError("wBias: total series volume is zero")
    return float(np.sort(v * np.abs(am - fm)).sum() / total)
