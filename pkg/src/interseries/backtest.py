"""Horizon-bucketed scoring, sliding-origin backtests and attention export."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import metrics
from .data import SeriesPanel, WindowBatch, format_month, make_windows
from .errors import ConfigError, ContractError, FitError, UndefinedMetricError
from .network import ModelState, NetworkConfig, predict
from .training import TrainConfig, forecast_unscaled, prepare, split_holdout, fit

log = logging.getLogger(__name__)

DEFAULT_BUCKETS = ((1, 3), (4, 12), (13, 24))
METRICS = ("wmape", "rmse", "rmsse", "wbias")


def parse_buckets(spec, horizon: int) -> list[tuple[int, int]]:
    """Parse ``"1-3,4-12"`` (or pairs) into 1-based inclusive step ranges.

    Ranges are clipped to ``[1, horizon]``; ranges left empty are dropped.
    Overlapping ranges are rejected.
    """
    if spec is None:
        spec = DEFAULT_BUCKETS
    if isinstance(spec, str):
        pairs = []
        for part in spec.split(","):
            part = part.strip()
            if not part:
                continue
            lo, sep, hi = part.partition("-")
            try:
                pairs.append((int(lo), int(hi) if sep else int(lo)))
            except ValueError:
                raise ConfigError(f"bad horizon bucket {part!r}; expected 'a-b'") from None
        spec = pairs
    out = []
    for lo, hi in spec:
        if lo > hi or lo < 1:
            raise ConfigError(f"bad horizon bucket {lo}-{hi}")
        lo, hi = max(lo, 1), min(hi, horizon)
        if lo <= hi:
            out.append((lo, hi))
    out.sort()
    for (_, a_hi), (b_lo, _) in zip(out, out[1:]):
        if b_lo <= a_hi:
            raise ConfigError("horizon buckets overlap")
    if not out:
        raise ConfigError(f"no horizon bucket intersects steps 1..{horizon}")
    return out


def bucket_label(bucket: tuple[int, int]) -> str:
    return f"{bucket[0]}-{bucket[1]}"


@dataclass
class EvalReport:
    """Metrics per horizon bucket for one origin (``origin=None`` for the average)."""

    origin: int | None
    scores: dict[str, dict[str, float]] = field(default_factory=dict)
    rmsse_excluded: dict[str, int] = field(default_factory=dict)
    attention: np.ndarray | None = None
    n_windows: int = 0

    @property
    def label(self) -> str:
        return "average" if self.origin is None else format_month(self.origin)

    def rows(self):
        for bucket, vals in self.scores.items():
            for name in METRICS:
                yield self.label, bucket, name, vals[name]


@dataclass
class BacktestResult:
    reports: list[EvalReport]
    average: EvalReport | None
    skipped: list[tuple[int, str]]
    forecasts: dict[int, tuple[list[WindowBatch], np.ndarray]] = field(default_factory=dict)


def _safe(fn, *args):
    try:
        return fn(*args)
    except UndefinedMetricError as exc:
        log.warning("%s", exc)
        return math.nan


def training_history(panel: SeriesPanel, origin: int) -> tuple[list[np.ndarray], np.ndarray]:
    """Observed actuals dated before ``origin`` per series, and their sums (series volumes)."""
    n = min(max(origin - panel.start, 0), panel.T)
    hist = [panel.target[i, :n][panel.mask[i, :n]] for i in range(panel.m)]
    return hist, np.array([float(np.sort(h).sum()) for h in hist])


def score(windows: Sequence[WindowBatch], forecasts: np.ndarray, panel: SeriesPanel,
          buckets: Sequence[tuple[int, int]], origin: int) -> tuple[dict, dict]:
    """Score forecasts ``(n, h)`` of windows sharing ``origin``.

    wMAPE and RMSE pool every observed (series, step) in the bucket.  RMSSE
    and wBias work per series over its observed bucket steps, with history and
    volume taken from observations before the origin.
    """
    actuals = np.stack([w.actuals for w in windows])
    mask = np.stack([w.label_mask for w in windows])
    history, volume = training_history(panel, origin)
    scores, excluded = {}, {}
    for lo, hi in buckets:
        cols = slice(lo - 1, hi)
        a, f, k = actuals[:, cols], forecasts[:, cols], mask[:, cols]
        vals = {"wmape": _safe(metrics.wmape, a, f, k), "rmse": _safe(metrics.rmse, a, f, k)}
        hs, aa, ff, am, fm, vol = [], [], [], [], [], []
        for w, ai, fi, ki in zip(windows, a, f, k):
            if not ki.any():
                continue
            hs.append(history[w.series_index])
            aa.append(ai[ki])
            ff.append(fi[ki])
            am.append(ai[ki].mean())
            fm.append(fi[ki].mean())
            vol.append(volume[w.series_index])
        try:
            vals["rmsse"], excluded[bucket_label((lo, hi))] = metrics.rmsse_panel(hs, aa, ff)
        except UndefinedMetricError as exc:
            log.warning("%s", exc)
            vals["rmsse"], excluded[bucket_label((lo, hi))] = math.nan, len(hs)
        vals["wbias"] = _safe(metrics.wbias, am, fm, vol)
        scores[bucket_label((lo, hi))] = vals
    return scores, excluded


def attention_matrix(windows: Sequence[WindowBatch], weights: np.ndarray | None, m: int) -> np.ndarray:
    """Row q holds series q's inter-series weights; rows with no window are NaN."""
    out = np.full((m, m), np.nan)
    if weights is None:
        return out
    for w, row in zip(windows, weights):
        out[w.series_index] = row
    return out


def export_attention(state: ModelState, panel: SeriesPanel, origin: int) -> np.ndarray:
    """m x m inter-series weights when forecasting each series from ``origin``."""
    if state.config.inter_series == "off":
        raise ContractError("model has no inter-series layer")
    cfg = state.config
    windows = make_windows(panel, state.scaler, cfg.context_length, cfg.horizon,
                           origins=[origin], require_labels=False)
    if not windows:
        raise ContractError(f"no series has context before {format_month(origin)}")
    _, weights = predict(windows, state)
    return attention_matrix(windows, weights, panel.m)


def audit_training_windows(windows: Sequence[WindowBatch], origin: int) -> None:
    """Raise if any training window carries a date at or after ``origin``."""
    for w in windows:
        last = max(int(w.context_dates[-1]), int(w.future_dates[-1]))
        if last >= origin:
            raise ContractError(
                f"leakage: window {w.series_id}@{format_month(w.origin)} reaches "
                f"{format_month(last)} >= origin {format_month(origin)}"
            )


def evaluate_origin(state: ModelState, panel: SeriesPanel, origin: int,
                    buckets: Sequence[tuple[int, int]], clip_nonnegative: bool = True):
    """Forecast and score every series with an observed label at ``origin``."""
    cfg = state.config
    windows = make_windows(panel, state.scaler, cfg.context_length, cfg.horizon, origins=[origin])
    if not windows:
        return None, windows, None
    values, weights = forecast_unscaled(windows, state, clip_nonnegative)
    scores, excluded = score(windows, values, panel, buckets, origin)
    report = EvalReport(origin, scores, excluded, attention_matrix(windows, weights, panel.m)
                        if weights is not None else None, len(windows))
    return report, windows, values


def average_reports(reports: Sequence[EvalReport]) -> EvalReport | None:
    """Mean of each metric over the origins where it is defined."""
    if not reports:
        return None
    avg = EvalReport(None, n_windows=sum(r.n_windows for r in reports))
    labels = list(dict.fromkeys(b for r in reports for b in r.scores))
    for b in labels:
        avg.scores[b] = {}
        for name in METRICS:
            vals = [r.scores[b][name] for r in reports if b in r.scores and not math.isnan(r.scores[b][name])]
            avg.scores[b][name] = float(np.sort(vals).sum() / len(vals)) if vals else math.nan
        avg.rmsse_excluded[b] = sum(r.rmsse_excluded.get(b, 0) for r in reports)
    mats = [r.attention for r in reports if r.attention is not None]
    if mats:
        stack = np.stack(mats)
        seen = ~np.isnan(stack)
        counts = seen.sum(axis=0)
        total = np.where(seen, stack, 0.0).sum(axis=0)
        avg.attention = np.where(counts > 0, total / np.maximum(counts, 1), np.nan)
    return avg


def backtest(panel: SeriesPanel, net_cfg: NetworkConfig, train_cfg: TrainConfig,
             origins: Sequence[int], buckets=None, clip_nonnegative: bool = True) -> BacktestResult:
    """Retrain from scratch before each origin, forecast ``h`` steps and score.

    Only observations dated before the origin reach the scaler and the
    training windows.  Origins without enough history are skipped with a
    logged notice and listed in ``skipped``.
    """
    bks = parse_buckets(buckets, net_cfg.horizon)
    reports, skipped, forecasts = [], [], {}
    for origin in sorted(set(origins)):
        train_end = origin - 1
        try:
            state, windows = prepare(panel, net_cfg, train_cfg, train_end)
            reason = None if windows else "no training window ends before the origin"
        except (FitError, ConfigError) as exc:
            reason = str(exc)
        if reason is not None:
            log.warning("origin %s skipped (insufficient history: %s)", format_month(origin), reason)
            skipped.append((origin, f"insufficient history: {reason}"))
            continue
        audit_training_windows(windows, origin)
        train_w, val_w = split_holdout(windows, train_cfg.holdout_fraction)
        fit(state, train_w, train_cfg, val_w)
        report, eval_w, values = evaluate_origin(state, panel, origin, bks, clip_nonnegative)
        if report is None:
            reason = "no observed actuals in the forecast window"
            log.warning("origin %s skipped (%s)", format_month(origin), reason)
            skipped.append((origin, reason))
            continue
        reports.append(report)
        forecasts[origin] = (eval_w, values)
    return BacktestResult(reports, average_reports(reports), skipped, forecasts)


# -- files -----------------------------------------------------------------------


def write_forecasts(path, windows: Sequence[WindowBatch], values: np.ndarray) -> int:
    """``series_id,origin,step,target_date,forecast``; returns the row count."""
    n = 0
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["series_id", "origin", "step", "target_date", "forecast"])
        for win, row in zip(windows, values):
            for step, (date, v) in enumerate(zip(win.future_dates, row), start=1):
                w.writerow([win.series_id, format_month(win.origin), step,
                            format_month(int(date)), repr(float(v))])
                n += 1
    return n


def write_report(path, report: EvalReport) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["origin", "bucket", "metric", "value"])
        for origin, bucket, name, value in report.rows():
            w.writerow([origin, bucket, name, repr(float(value))])


def write_attention(path, series_ids: Sequence[str], matrix: np.ndarray) -> int:
    """Header of series ids; one row per target series that has weights."""
    n = 0
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["target"] + list(series_ids))
        for sid, row in zip(series_ids, matrix):
            if np.isnan(row).all():
                continue
            w.writerow([sid] + [repr(float(v)) for v in row])
            n += 1
    return n
