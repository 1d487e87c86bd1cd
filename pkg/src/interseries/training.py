"""Multi-task training over all (series, origin) windows with one shared parameter set."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import numerics as nx
from .data import SeriesPanel, WindowBatch, fit_scaler, make_windows, year_month
from .errors import ConfigError, TrainingError
from .network import FeatureSpec, ModelState, NetworkConfig, collate, forward_batch, init_model, predict
from .numerics import Tensor

log = logging.getLogger(__name__)

LOSSES = ("mse", "mae")


@dataclass
class TrainConfig:
    lr: float = 0.0015
    plateau_factor: float = 0.95
    plateau_patience: int = 25
    min_delta: float = 1e-5
    batch_size: int = 64
    epochs: int = 1000
    seed: int = 0
    loss: str = "mse"
    holdout_fraction: float = 0.0
    stride: int = 1
    scaler: str = "global_log1p_standardize"

    def validate(self) -> None:
        if not 0.0 < self.plateau_factor < 1.0:
            raise ConfigError("plateau_factor must lie in (0, 1)")
        if self.batch_size < 1 or self.epochs < 0 or self.plateau_patience < 1 or self.stride < 1:
            raise ConfigError("batch_size, patience and stride must be positive; epochs >= 0")
        if self.lr <= 0:
            raise ConfigError("lr must be positive")
        if self.loss not in LOSSES:
            raise ConfigError(f"loss must be one of {LOSSES}")
        if not 0.0 <= self.holdout_fraction < 1.0:
            raise ConfigError("holdout_fraction must lie in [0, 1)")


class ReduceLROnPlateau:
    """Multiply the learning rate by ``factor`` after ``patience`` epochs without improvement.

    An epoch improves when its loss is below ``best - min_delta``.  ``best``
    starts at ``initial_best``; training seeds it with the loss of the
    untrained model so the first epoch is judged like every other one.
    """

    def __init__(self, lr: float, factor: float = 0.95, patience: int = 25,
                 min_delta: float = 1e-5, initial_best: float = math.inf):
        self.lr = lr
        self.factor = factor
        self.patience = patience
        self.min_delta = min_delta
        self.best = initial_best
        self.wait = 0
        self.reductions = 0

    def step(self, loss: float) -> float:
        if loss < self.best - self.min_delta:
            self.best = loss
            self.wait = 0
        else:
            self.wait += 1
            if self.wait >= self.patience:
                self.lr *= self.factor
                self.reductions += 1
                self.wait = 0
        return self.lr


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    lr: float
    val_loss: float | None = None


def batch_loss(forecast: Tensor, labels: np.ndarray, label_mask: np.ndarray, kind: str = "mse") -> Tensor:
    """Mean error over observed labels (scaled space)."""
    weight = label_mask.astype(float)
    n = weight.sum()
    if n == 0:
        raise TrainingError("batch has no observed labels")
    diff = forecast - labels
    err = nx.square(diff) if kind == "mse" else nx.absolute(diff)
    return nx.scale(nx.tsum(err * weight), 1.0 / n)


def mean_loss(windows: Sequence[WindowBatch], state: ModelState, kind: str, batch_size: int = 256) -> float:
    total, count = 0.0, 0.0
    with nx.no_grad():
        for s in range(0, len(windows), batch_size):
            b = collate(windows[s:s + batch_size], state)
            n = b.label_mask.sum()
            total += batch_loss(forward_batch(b, state).forecast, b.labels, b.label_mask, kind).item() * n
            count += n
    return float(total / count)


def prepare(panel: SeriesPanel, net_cfg: NetworkConfig, train_cfg: TrainConfig,
            train_end: int | None = None):
    """Fit the scaler and build the model skeleton and training windows.

    Returns ``(state, windows)``; only data dated ``<= train_end`` is used.
    """
    net_cfg.validate()
    train_cfg.validate()
    train_end = panel.end if train_end is None else train_end
    scaler = fit_scaler(panel, train_end, train_cfg.scaler)
    windows = make_windows(panel, scaler, net_cfg.context_length, net_cfg.horizon,
                           train_cfg.stride, train_end=train_end)
    observed = np.flatnonzero(panel.mask.any(axis=0))
    base_year = year_month(panel.start + int(observed[0]))[0] if observed.size else year_month(panel.start)[0]
    spec = FeatureSpec.from_ids(panel.product_ids, panel.location_ids,
                                covariate_names=list(panel.covariate_names), base_year=base_year)
    state = init_model(net_cfg, spec, scaler, train_cfg.seed)
    return state, windows


def split_holdout(windows: list[WindowBatch], fraction: float):
    """Hold out the latest-origin windows for validation."""
    if fraction <= 0 or len(windows) < 2:
        return windows, []
    order = sorted(windows, key=lambda w: (w.origin, w.series_id))
    n_val = min(len(order) - 1, max(1, math.ceil(fraction * len(order))))
    return order[:-n_val], order[-n_val:]


def fit(state: ModelState, windows: list[WindowBatch], train_cfg: TrainConfig,
        val_windows: Sequence[WindowBatch] = ()) -> list[EpochRecord]:
    """Adam over shuffled mini-batches; updates ``state`` in place and returns per-epoch records."""
    if not windows:
        raise TrainingError("no training windows")
    cfg = train_cfg
    opt = nx.Adam(state.parameters(), lr=cfg.lr)
    opt.zero_grad()
    shuffle_rng = np.random.default_rng([cfg.seed, 1])
    drop_rng = np.random.default_rng([cfg.seed, 2]) if state.config.dropout > 0 else None
    monitor = list(val_windows) or windows
    sched = ReduceLROnPlateau(cfg.lr, cfg.plateau_factor, cfg.plateau_patience, cfg.min_delta,
                              initial_best=mean_loss(monitor, state, cfg.loss))
    history: list[EpochRecord] = []
    n = len(windows)
    for epoch in range(1, cfg.epochs + 1):
        perm = shuffle_rng.permutation(n)
        total, count = 0.0, 0.0
        for b_idx, s in enumerate(range(0, n, cfg.batch_size), start=1):
            batch = collate([windows[i] for i in perm[s:s + cfg.batch_size]], state)
            out = forward_batch(batch, state, drop_rng)
            loss = batch_loss(out.forecast, batch.labels, batch.label_mask, cfg.loss)
            value = loss.item()
            if not math.isfinite(value):
                raise TrainingError(f"non-finite loss {value} at epoch {epoch}, batch {b_idx}")
            nx.backward(loss)
            opt.step()
            k = batch.label_mask.sum()
            total += value * k
            count += k
        epoch_loss = float(total / count)
        val = mean_loss(val_windows, state, cfg.loss) if val_windows else None
        opt.lr = sched.step(val if val is not None else epoch_loss)
        history.append(EpochRecord(epoch, epoch_loss, opt.lr, val))
        log.debug("epoch %d loss %.6g lr %.6g", epoch, epoch_loss, opt.lr)
    return history


def train(panel: SeriesPanel, net_cfg: NetworkConfig, train_cfg: TrainConfig,
          train_end: int | None = None) -> tuple[ModelState, list[EpochRecord]]:
    state, windows = prepare(panel, net_cfg, train_cfg, train_end)
    if not windows:
        raise TrainingError("no training windows: panel too short for context + horizon")
    train_w, val_w = split_holdout(windows, train_cfg.holdout_fraction)
    history = fit(state, train_w, train_cfg, val_w)
    return state, history


def forecast_unscaled(windows: Sequence[WindowBatch], state: ModelState, clip_nonnegative: bool = True):
    """Forecasts in demand units ``(n, h)`` plus inter-series weights ``(n, m)``."""
    z, weights = predict(list(windows), state)
    if not len(windows):
        return z, weights
    values = state.scaler.invert(z, [w.series_id for w in windows])
    if clip_nonnegative:
        values = np.maximum(values, 0.0)
    return values, weights
