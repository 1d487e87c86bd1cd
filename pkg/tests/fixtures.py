"""Shared panels and model settings for tests."""

from __future__ import annotations

import numpy as np

from interseries.data import SeriesPanel, SynthConfig, fit_scaler, generate_synthetic, make_windows
from interseries.network import FeatureSpec, NetworkConfig, collate, init_model
from interseries.training import TrainConfig


def tiny_panel(seed: int = 0, m: int = 2, T: int = 10, covariates: int = 1) -> SeriesPanel:
    base = generate_synthetic(SynthConfig(m=m, T=T, seed=seed))
    rng = np.random.default_rng(seed + 100)
    names = [f"c{i}" for i in range(covariates)]
    return SeriesPanel(base.series_ids, base.product_ids, base.location_ids, base.start,
                       base.target, base.mask, names, rng.normal(size=(m, T, covariates)))


def tiny_state(seed: int = 0, inter_series: str = "raw", L: int = 4, h: int = 2, d_model: int = 8,
               panel: SeriesPanel | None = None, **net_kw):
    """Model and one collated batch on a 2-series panel (the gradient-check network)."""
    panel = panel or tiny_panel(seed)
    cfg = NetworkConfig(context_length=L, horizon=h, d_model=d_model, num_heads=2,
                        inter_series=inter_series, inter_series_heads=2 if inter_series == "projected" else 1,
                        **net_kw)
    scaler = fit_scaler(panel)
    spec = FeatureSpec.from_ids(panel.product_ids, panel.location_ids,
                                covariate_names=list(panel.covariate_names), base_year=2015)
    state = init_model(cfg, spec, scaler, seed)
    windows = make_windows(panel, scaler, L, h)
    return state, windows, collate(windows, state)


# Overfit fixture: 8 series, 48 months, fixed seed.
OVERFIT_SYNTH = dict(m=8, T=48, seed=7, noise_std=2.0)
OVERFIT_NET = dict(context_length=12, horizon=3, d_model=32, num_heads=4,
                   encoder_blocks=2, decoder_blocks=2)
OVERFIT_EPOCHS = 300


def overfit_setup():
    return (generate_synthetic(SynthConfig(**OVERFIT_SYNTH)), NetworkConfig(**OVERFIT_NET),
            TrainConfig(epochs=OVERFIT_EPOCHS, seed=0))


# Planted dependency: series 1 (B) follows 0.8 * previous month of series 0 (A).
# A is a noisy constant-level series, so B's next value is predictable only
# through A's latest observation.  The other four are smooth seasonal series.
SIGNAL_M = 6
SIGNAL_EVAL_MONTHS = 48
SIGNAL_EPOCHS = 60


def signal_panel() -> SeriesPanel:
    gamma = np.zeros((SIGNAL_M, SIGNAL_M))
    gamma[1, 0] = 0.8
    return generate_synthetic(SynthConfig(
        m=SIGNAL_M, T=600, seed=3, gamma=gamma,
        levels=[100, 0, 30, 40, 50, 60], trends=[0] * 6, amplitudes=[0, 0, 10, 10, 10, 10],
        noise_stds=[50, 1, 0.5, 0.5, 0.5, 0.5],
    ))


def signal_net(inter_series: str) -> NetworkConfig:
    return NetworkConfig(context_length=4, horizon=1, d_model=16, num_heads=2,
                         inter_series=inter_series, inter_series_heads=1)


def signal_train() -> TrainConfig:
    return TrainConfig(epochs=SIGNAL_EPOCHS, seed=0)
