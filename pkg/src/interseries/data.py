"""Monthly panel ingestion, scaling, window extraction and a synthetic generator."""

from __future__ import annotations

import csv
import io
import logging
import math
import os
import re
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, FitError, PanelError

log = logging.getLogger(__name__)

REQUIRED_COLUMNS = ("series_id", "product_id", "location_id", "date", "target")
SCALER_MODES = ("global_log1p_standardize", "per_series_standardize", "none")
STD_FLOOR = 1e-8
_DATE_RE = re.compile(r"^(\d{4})-(\d{2})$")


def parse_month(text: str) -> int:
    """``"YYYY-MM"`` -> absolute month index ``year * 12 + month - 1``."""
    m = _DATE_RE.match(text.strip())
    if not m or not 1 <= int(m.group(2)) <= 12:
        raise ValueError(f"malformed date {text!r}, expected YYYY-MM")
    return int(m.group(1)) * 12 + int(m.group(2)) - 1


def format_month(index: int) -> str:
    return f"{index // 12:04d}-{index % 12 + 1:02d}"


def year_month(index: int) -> tuple[int, int]:
    return index // 12, index % 12 + 1


@dataclass
class SeriesPanel:
    """Aligned monthly panel; arrays are indexed ``[series, time]``.

    ``target`` holds 0 where ``mask`` is False.  ``covariates`` is
    ``(m, T, F)`` with NaN marking missing covariate values.
    """

    series_ids: list[str]
    product_ids: list[str]
    location_ids: list[str]
    start: int
    target: np.ndarray
    mask: np.ndarray
    covariate_names: list[str] = field(default_factory=list)
    covariates: np.ndarray | None = None

    def __post_init__(self):
        m, T = self.target.shape
        if self.covariates is None:
            self.covariates = np.zeros((m, T, 0))
        if self.mask.shape != (m, T) or self.covariates.shape[:2] != (m, T):
            raise PanelError("panel arrays are not aligned")
        if len(self.series_ids) != m:
            raise PanelError("series id count does not match target rows")

    @property
    def m(self) -> int:
        return self.target.shape[0]

    @property
    def T(self) -> int:
        return self.target.shape[1]

    @property
    def end(self) -> int:
        """Month index of the last date on the axis."""
        return self.start + self.T - 1

    @property
    def dates(self) -> np.ndarray:
        return np.arange(self.start, self.start + self.T)

    def index_of(self, month: int) -> int:
        return month - self.start

    def to_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            fh.write(self.to_csv_text())

    def to_csv_text(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(list(REQUIRED_COLUMNS) + list(self.covariate_names))
        for i, sid in enumerate(self.series_ids):
            for t in np.flatnonzero(self.mask[i]):
                covs = ["" if np.isnan(c) else repr(float(c)) for c in self.covariates[i, t]]
                w.writerow([sid, self.product_ids[i], self.location_ids[i],
                            format_month(self.start + int(t)), repr(float(self.target[i, t]))] + covs)
        return buf.getvalue()


def load_panel(path) -> SeriesPanel:
    """Read a long-format CSV into an aligned panel.

    Rows absent for a (series, month) leave that cell unobserved.
    """
    if not os.path.exists(path):
        raise PanelError(f"{path}: no such file")
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or not any(h.strip() for h in header):
            raise PanelError(f"{path}: empty panel (no header)")
        header = [h.strip() for h in header]
        if tuple(header[:5]) != REQUIRED_COLUMNS:
            raise PanelError(f"{path}: header must start with {','.join(REQUIRED_COLUMNS)}")
        cov_names = header[5:]
        if len(set(cov_names)) != len(cov_names):
            raise PanelError(f"{path}: duplicate covariate columns")
        records: dict[str, dict] = {}
        seen: set[tuple[str, int]] = set()
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise PanelError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
            sid, pid, lid, date_txt, target_txt = (c.strip() for c in row[:5])
            try:
                month = parse_month(date_txt)
            except ValueError as exc:
                raise PanelError(f"{path}:{lineno}: {exc}") from None
            try:
                value = float(target_txt)
            except ValueError:
                raise PanelError(f"{path}:{lineno}: target {target_txt!r} is not a number") from None
            if not math.isfinite(value) or value < 0:
                raise PanelError(f"{path}:{lineno}: target must be finite and >= 0, got {target_txt}")
            key = (sid, month)
            if key in seen:
                raise PanelError(f"{path}:{lineno}: duplicate row for series {sid!r} at {date_txt}")
            seen.add(key)
            covs = []
            for name, txt in zip(cov_names, row[5:]):
                txt = txt.strip()
                try:
                    covs.append(float(txt) if txt else float("nan"))
                except ValueError:
                    raise PanelError(f"{path}:{lineno}: covariate {name}={txt!r} is not a number") from None
            rec = records.setdefault(sid, {"product": pid, "location": lid, "rows": {}})
            if (rec["product"], rec["location"]) != (pid, lid):
                raise PanelError(f"{path}:{lineno}: series {sid!r} changes product/location id")
            rec["rows"][month] = (value, covs)
    if not records:
        raise PanelError(f"{path}: empty panel (no data rows)")
    months = [mo for rec in records.values() for mo in rec["rows"]]
    start, end = min(months), max(months)
    ids = sorted(records)
    m, T, F = len(ids), end - start + 1, len(cov_names)
    target = np.zeros((m, T))
    mask = np.zeros((m, T), dtype=bool)
    covariates = np.full((m, T, F), np.nan)
    for i, sid in enumerate(ids):
        for month, (value, covs) in records[sid]["rows"].items():
            target[i, month - start] = value
            mask[i, month - start] = True
            covariates[i, month - start] = covs
    return SeriesPanel(ids, [records[s]["product"] for s in ids],
                       [records[s]["location"] for s in ids], start, target, mask,
                       list(cov_names), covariates)


# -- scaling -----------------------------------------------------------------------


@dataclass
class ScalerState:
    """Fitted target and covariate standardization.

    ``series_loc``/``series_scale`` are used in per-series mode; unseen series
    fall back to the pooled ``loc``/``scale``.
    """

    mode: str
    loc: float = 0.0
    scale: float = 1.0
    series_loc: dict[str, float] = field(default_factory=dict)
    series_scale: dict[str, float] = field(default_factory=dict)
    cov_loc: list[float] = field(default_factory=list)
    cov_scale: list[float] = field(default_factory=list)

    def _params(self, series_ids):
        if self.mode == "per_series_standardize":
            loc = np.array([self.series_loc.get(s, self.loc) for s in series_ids])
            sc = np.array([self.series_scale.get(s, self.scale) for s in series_ids])
            return loc, sc
        n = len(series_ids)
        return np.full(n, self.loc), np.full(n, self.scale)

    def apply(self, values, series_ids) -> np.ndarray:
        """Scale ``values`` whose first axis aligns with ``series_ids``."""
        x = np.asarray(values, dtype=float)
        if self.mode == "none":
            return x.copy()
        loc, sc = self._params(series_ids)
        shape = (-1,) + (1,) * (x.ndim - 1)
        if self.mode == "global_log1p_standardize":
            x = np.log1p(x)
        return (x - loc.reshape(shape)) / sc.reshape(shape)

    def invert(self, values, series_ids) -> np.ndarray:
        z = np.asarray(values, dtype=float)
        if self.mode == "none":
            return z.copy()
        loc, sc = self._params(series_ids)
        shape = (-1,) + (1,) * (z.ndim - 1)
        x = z * sc.reshape(shape) + loc.reshape(shape)
        if self.mode == "global_log1p_standardize":
            x = np.expm1(x)
        return x

    def apply_covariates(self, covs: np.ndarray) -> np.ndarray:
        """Standardize the trailing feature axis; missing values become 0."""
        if covs.shape[-1] == 0:
            return np.zeros(covs.shape)
        out = (covs - np.asarray(self.cov_loc)) / np.asarray(self.cov_scale)
        return np.where(np.isnan(out), 0.0, out)

    def invert_covariates(self, z: np.ndarray) -> np.ndarray:
        return z * np.asarray(self.cov_scale) + np.asarray(self.cov_loc)

    def to_dict(self) -> dict:
        return {
            "mode": self.mode, "loc": self.loc, "scale": self.scale,
            "series_loc": self.series_loc, "series_scale": self.series_scale,
            "cov_loc": self.cov_loc, "cov_scale": self.cov_scale,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ScalerState":
        return cls(**d)


def _stats(values: np.ndarray) -> tuple[float, float]:
    return float(values.mean()), max(float(values.std()), STD_FLOOR)


def fit_scaler(panel: SeriesPanel, train_end: int | None = None,
               mode: str = "global_log1p_standardize") -> ScalerState:
    """Fit on observations dated ``<= train_end`` (month index; default: whole axis)."""
    if mode not in SCALER_MODES:
        raise ConfigError(f"unknown scaler mode {mode!r}; expected one of {SCALER_MODES}")
    train_end = panel.end if train_end is None else train_end
    n = min(max(train_end - panel.start + 1, 0), panel.T)
    mask = panel.mask[:, :n]
    if not mask.any():
        raise FitError(f"no observations on or before {format_month(train_end)}")
    target = panel.target[:, :n]
    state = ScalerState(mode)
    if mode == "global_log1p_standardize":
        state.loc, state.scale = _stats(np.log1p(target[mask]))
    elif mode == "per_series_standardize":
        state.loc, state.scale = _stats(target[mask])
        for i, sid in enumerate(panel.series_ids):
            if mask[i].any():
                state.series_loc[sid], state.series_scale[sid] = _stats(target[i][mask[i]])
    for f in range(panel.covariates.shape[2]):
        vals = panel.covariates[:, :n, f][mask]
        vals = vals[~np.isnan(vals)]
        loc, sc = _stats(vals) if vals.size else (0.0, 1.0)
        state.cov_loc.append(loc)
        state.cov_scale.append(sc)
    return state


# -- windows -----------------------------------------------------------------------


@dataclass
class WindowBatch:
    """One (target series, origin) example; everything in scaled space.

    ``origin`` is the month index of the first forecast step.  The context
    covers ``origin - L .. origin - 1`` and the labels ``origin .. origin + h - 1``.
    """

    series_index: int
    series_id: str
    product_id: str
    location_id: str
    origin: int
    panel_context: np.ndarray
    context_mask: np.ndarray
    series_mask: np.ndarray
    covariates: np.ndarray
    context_dates: np.ndarray
    future_dates: np.ndarray
    labels: np.ndarray
    label_mask: np.ndarray
    actuals: np.ndarray

    @property
    def target_context(self) -> np.ndarray:
        return self.panel_context[self.series_index]

    @property
    def target_context_mask(self) -> np.ndarray:
        return self.context_mask[self.series_index]


def _window(arr: np.ndarray, first: int, length: int, fill) -> np.ndarray:
    """Slice ``[first, first + length)`` along axis 1, padding outside the axis."""
    T = arr.shape[1]
    out = np.full((arr.shape[0], length) + arr.shape[2:], fill, dtype=arr.dtype)
    lo, hi = max(first, 0), min(first + length, T)
    if lo < hi:
        out[:, lo - first:hi - first] = arr[:, lo:hi]
    return out


def count_origins(T: int, L: int, h: int, stride: int = 1) -> int:
    """Number of full (context, label) windows on an axis of length ``T``."""
    n = T - L - h + 1
    return 0 if n <= 0 else -(-n // stride)


def training_origins(panel: SeriesPanel, L: int, h: int, stride: int = 1,
                     train_end: int | None = None) -> list[int]:
    """Origins whose whole context lies on the axis and whose labels end by ``train_end``."""
    if L < 1 or h < 1 or stride < 1:
        raise ConfigError("context length, horizon and stride must be positive")
    if L + h > panel.T:
        raise ConfigError(f"context {L} + horizon {h} exceeds axis length {panel.T}")
    last = panel.end if train_end is None else min(train_end, panel.end)
    return list(range(panel.start + L, last - h + 2, stride))


def make_windows(panel: SeriesPanel, scaler: ScalerState, L: int, h: int, stride: int = 1,
                 train_end: int | None = None, origins=None,
                 require_labels: bool = True) -> list[WindowBatch]:
    """Build one example per (series, origin), ordered by (series_id, origin).

    Without ``origins`` every training origin whose labels end on or before
    ``train_end`` is used.  Explicit ``origins`` (evaluation / forecasting)
    may reach past the axis; missing cells are unobserved.  A window needs at
    least one observed label when ``require_labels`` is set, otherwise at
    least one observed context value of its own series.  Origins at which no
    series has any context observation are skipped.
    """
    if origins is None:
        origins = training_origins(panel, L, h, stride, train_end)
    elif L < 1 or h < 1:
        raise ConfigError("context length and horizon must be positive")
    scaled = np.where(panel.mask, scaler.apply(panel.target, panel.series_ids), 0.0)
    covs = scaler.apply_covariates(panel.covariates)
    per_origin = {}
    for o in origins:
        first = o - L - panel.start
        ctx = _window(scaled, first, L, 0.0)
        cmask = _window(panel.mask, first, L, False)
        smask = cmask.any(axis=1)
        if not smask.any():
            log.info("origin %s skipped: no series observed in context", format_month(o))
            continue
        per_origin[o] = (
            ctx, cmask, smask, _window(covs, first, L, 0.0),
            _window(scaled, first + L, h, 0.0), _window(panel.mask, first + L, h, False),
            _window(panel.target, first + L, h, 0.0),
        )
    out = []
    for q, sid in enumerate(panel.series_ids):
        for o, (ctx, cmask, smask, cv, lab, lmask, act) in per_origin.items():
            ok = lmask[q].any() if require_labels else cmask[q].any()
            if not ok:
                continue
            out.append(WindowBatch(
                series_index=q, series_id=sid, product_id=panel.product_ids[q],
                location_id=panel.location_ids[q], origin=o, panel_context=ctx,
                context_mask=cmask, series_mask=smask, covariates=cv[q],
                context_dates=np.arange(o - L, o), future_dates=np.arange(o, o + h),
                labels=lab[q], label_mask=lmask[q], actuals=act[q],
            ))
    out.sort(key=lambda w: (w.series_id, w.origin))
    return out


# -- synthetic panels ----------------------------------------------------------------


@dataclass
class SynthConfig:
    """Generator settings.  Per-series overrides (``levels`` ...) beat the ranges."""

    m: int = 8
    T: int = 48
    seed: int = 0
    start: str = "2015-01"
    level_range: tuple[float, float] = (20.0, 100.0)
    trend_range: tuple[float, float] = (-0.2, 0.5)
    amplitude_range: tuple[float, float] = (0.0, 15.0)
    noise_std: float = 2.0
    zero_inflation: float = 0.0
    gamma: np.ndarray | None = None
    locations: int = 1
    levels: list[float] | None = None
    trends: list[float] | None = None
    amplitudes: list[float] | None = None
    noise_stds: list[float] | None = None

    def validate(self) -> None:
        if self.m < 1 or self.T < 1 or self.locations < 1:
            raise ConfigError("synth m, T and locations must be positive")
        if not 0.0 <= self.zero_inflation <= 1.0:
            raise ConfigError(f"zero_inflation {self.zero_inflation} outside [0, 1]")
        if self.noise_std < 0:
            raise ConfigError("noise_std must be >= 0")
        if self.gamma is not None:
            g = np.asarray(self.gamma, dtype=float)
            if g.shape != (self.m, self.m):
                raise ConfigError(f"gamma must be {self.m}x{self.m}, got {g.shape}")
            if np.any(np.diag(g) != 0):
                raise ConfigError("gamma diagonal must be zero")
        for name in ("levels", "trends", "amplitudes", "noise_stds"):
            v = getattr(self, name)
            if v is not None and len(v) != self.m:
                raise ConfigError(f"{name} must have {self.m} entries")


def generate_synthetic(cfg: SynthConfig) -> SeriesPanel:
    """Simulate demand with level, trend, 12-month seasonality and lag-1 cross effects.

    ``gamma[i, j]`` is the effect of series j's previous-month demand on
    series i.  Values are clipped at zero, then zeroed with probability
    ``zero_inflation``.
    """
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    m, T = cfg.m, cfg.T
    level = rng.uniform(*cfg.level_range, size=m)
    trend = rng.uniform(*cfg.trend_range, size=m)
    amp = rng.uniform(*cfg.amplitude_range, size=m)
    phase = rng.uniform(0.0, 2.0 * np.pi, size=m)
    if cfg.levels is not None:
        level = np.asarray(cfg.levels, dtype=float)
    if cfg.trends is not None:
        trend = np.asarray(cfg.trends, dtype=float)
    if cfg.amplitudes is not None:
        amp = np.asarray(cfg.amplitudes, dtype=float)
    noise = np.full(m, float(cfg.noise_std))
    if cfg.noise_stds is not None:
        noise = np.asarray(cfg.noise_stds, dtype=float)
    gamma = np.zeros((m, m)) if cfg.gamma is None else np.asarray(cfg.gamma, dtype=float)

    y = np.zeros((m, T))
    for t in range(T):
        value = level + trend * t + amp * np.sin(2.0 * np.pi * t / 12.0 + phase)
        if t > 0:
            value = value + gamma @ y[:, t - 1]
        value = value + noise * rng.standard_normal(m)
        value = np.maximum(value, 0.0)
        zero = rng.random(m) < cfg.zero_inflation
        y[:, t] = np.where(zero, 0.0, value)

    width = max(3, len(str(m - 1)))
    products = -(-m // cfg.locations)
    pwidth = max(3, len(str(products - 1)))
    return SeriesPanel(
        series_ids=[f"S{i:0{width}d}" for i in range(m)],
        product_ids=[f"P{i // cfg.locations:0{pwidth}d}" for i in range(m)],
        location_ids=[f"L{i % cfg.locations:02d}" for i in range(m)],
        start=parse_month(cfg.start),
        target=y,
        mask=np.ones((m, T), dtype=bool),
    )
