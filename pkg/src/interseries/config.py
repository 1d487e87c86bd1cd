"""Flat ``key = value`` run configuration shared by all commands."""

from __future__ import annotations

from dataclasses import dataclass, field, fields
from typing import Any, Callable

import numpy as np

from .backtest import DEFAULT_BUCKETS, parse_buckets
from .data import SynthConfig, format_month, parse_month
from .errors import ConfigError, ForecastError
from .network import NetworkConfig
from .training import TrainConfig


def _bool(text: str) -> bool:
    v = text.strip().lower()
    if v in ("true", "yes", "1", "on"):
        return True
    if v in ("false", "no", "0", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _floats(text: str) -> list[float]:
    return [float(x) for x in text.split(",") if x.strip()]


def _pair(text: str) -> tuple[float, float]:
    v = _floats(text)
    if len(v) != 2:
        raise ValueError("expected two comma-separated numbers")
    return v[0], v[1]


def _gamma_entries(text: str) -> list[tuple[int, int, float]]:
    """``i:j:value`` triples separated by commas (effect of series j on series i)."""
    out = []
    for part in text.split(","):
        part = part.strip()
        if part:
            i, j, v = part.split(":")
            out.append((int(i), int(j), float(v)))
    return out


def _months(text: str) -> list[int]:
    return [parse_month(x.strip()) for x in text.split(",") if x.strip()]


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (tuple, list)):
        return ",".join(_fmt(v) for v in value)
    return str(value)


@dataclass
class Key:
    parse: Callable[[str], Any]
    doc: str


# Keys that do not map one-to-one onto a dataclass field.
EXTRA_KEYS = {
    "synth.level_range": Key(_pair, "uniform range for series levels, 'lo,hi'"),
    "synth.trend_range": Key(_pair, "uniform range for per-month trends, 'lo,hi'"),
    "synth.amplitude_range": Key(_pair, "uniform range for seasonal amplitudes, 'lo,hi'"),
    "synth.levels": Key(_floats, "per-series levels overriding the range"),
    "synth.trends": Key(_floats, "per-series trends overriding the range"),
    "synth.amplitudes": Key(_floats, "per-series amplitudes overriding the range"),
    "synth.noise_stds": Key(_floats, "per-series noise std overriding synth.noise_std"),
    "synth.gamma": Key(_gamma_entries, "lag-1 cross effects as 'i:j:value' triples"),
    "data.train_end": Key(parse_month, "last month (YYYY-MM) used for training; default: end of data"),
    "data.clip_nonnegative": Key(_bool, "clamp forecasts at zero"),
    "data.scaler": Key(str, "global_log1p_standardize | per_series_standardize | none"),
    "data.stride": Key(int, "step between training origins"),
    "backtest.origins": Key(_months, "comma-separated origins (YYYY-MM), first forecast month"),
    "backtest.buckets": Key(str, "horizon buckets, e.g. '1-3,4-12,13-24'"),
}

_DOCS = {
    "net.context_length": "context window length L (months)",
    "net.horizon": "forecast steps h",
    "net.d_model": "model width",
    "net.num_heads": "heads in temporal attention",
    "net.encoder_blocks": "encoder blocks",
    "net.decoder_blocks": "decoder blocks",
    "net.ff_width": "feed-forward width; 0 means 4 * d_model",
    "net.inter_series": "raw | projected | off",
    "net.inter_series_heads": "heads in projected inter-series attention",
    "net.inter_series_layers": "stacked inter-series layers",
    "net.embed_dim": "width of each ID embedding",
    "net.positional_encoding": "none | sinusoidal",
    "net.date_features": "log-age and month features on/off",
    "net.dropout": "dropout rate in blocks",
    "net.ln_eps": "layer-norm epsilon",
    "train.lr": "initial learning rate",
    "train.plateau_factor": "LR multiplier on plateau",
    "train.plateau_patience": "epochs without improvement before a reduction",
    "train.min_delta": "minimum loss decrease counted as improvement",
    "train.batch_size": "windows per mini-batch",
    "train.epochs": "training epochs",
    "train.seed": "seed for initialization and shuffling",
    "train.loss": "mse | mae",
    "train.holdout_fraction": "latest-origin fraction held out to drive the scheduler",
    "synth.m": "number of series (required by generate)",
    "synth.T": "months per series",
    "synth.seed": "generator seed",
    "synth.start": "first month, YYYY-MM",
    "synth.noise_std": "noise standard deviation",
    "synth.zero_inflation": "probability of zeroing an observation",
    "synth.locations": "locations per product",
}

_SKIP = {("train", "scaler"), ("train", "stride")}
_COMPOUND = {"level_range", "trend_range", "amplitude_range", "levels", "trends",
             "amplitudes", "noise_stds", "gamma"}


def _field_keys() -> dict[str, Key]:
    out = {}
    for prefix, cls in (("net", NetworkConfig), ("train", TrainConfig), ("synth", SynthConfig)):
        for f in fields(cls):
            if (prefix, f.name) in _SKIP or f.name in _COMPOUND:
                continue
            kind = type(getattr(cls(), f.name))
            parse = _bool if kind is bool else kind
            out[f"{prefix}.{f.name}"] = Key(parse, _DOCS.get(f"{prefix}.{f.name}", ""))
    return out


KEYS: dict[str, Key] = {**_field_keys(), **EXTRA_KEYS}


@dataclass
class RunConfig:
    """Parsed settings; ``values`` holds only keys given explicitly."""

    values: dict[str, Any] = field(default_factory=dict)
    source: str = "<defaults>"

    def has(self, key: str) -> bool:
        return key in self.values

    def require(self, key: str):
        if key not in self.values:
            raise ConfigError(f"missing required key {key!r} in {self.source}")
        return self.values[key]

    def set(self, key: str, value) -> None:
        if key not in KEYS:
            raise ConfigError(f"unknown config key {key!r}")
        self.values[key] = value

    def _section(self, prefix: str, cls):
        obj = cls()
        for key, value in self.values.items():
            p, _, name = key.partition(".")
            if p == prefix and hasattr(obj, name):
                setattr(obj, name, value)
        return obj

    def network(self) -> NetworkConfig:
        cfg = self._section("net", NetworkConfig)
        cfg.validate()
        return cfg

    def training(self) -> TrainConfig:
        cfg = self._section("train", TrainConfig)
        cfg.scaler = self.values.get("data.scaler", cfg.scaler)
        cfg.stride = self.values.get("data.stride", cfg.stride)
        cfg.validate()
        return cfg

    def synth(self) -> SynthConfig:
        cfg = self._section("synth", SynthConfig)
        if "synth.gamma" in self.values:
            g = np.zeros((cfg.m, cfg.m))
            for i, j, v in self.values["synth.gamma"]:
                if not (0 <= i < cfg.m and 0 <= j < cfg.m):
                    raise ConfigError(f"synth.gamma entry {i}:{j} outside 0..{cfg.m - 1}")
                g[i, j] = v
            cfg.gamma = g
        cfg.validate()
        return cfg

    @property
    def train_end(self) -> int | None:
        return self.values.get("data.train_end")

    @property
    def clip_nonnegative(self) -> bool:
        return self.values.get("data.clip_nonnegative", True)

    @property
    def origins(self) -> list[int]:
        return list(self.values.get("backtest.origins", []))

    def buckets(self, horizon: int) -> list[tuple[int, int]]:
        return parse_buckets(self.values.get("backtest.buckets"), horizon)

    def effective(self) -> dict[str, str]:
        """Every key with its value in force (explicit or default), as text."""
        net, train = NetworkConfig(), TrainConfig()
        synth = SynthConfig()
        defaults = {"net": net, "train": train, "synth": synth}
        out = {}
        for key in sorted(KEYS):
            if key in self.values:
                value = self.values[key]
                if key == "data.train_end":
                    value = format_month(value)
                elif key == "backtest.origins":
                    value = [format_month(o) for o in value]
                elif key == "synth.gamma":
                    value = [f"{i}:{j}:{v}" for i, j, v in value]
                out[key] = _fmt(value)
                continue
            prefix, _, name = key.partition(".")
            if prefix in defaults and hasattr(defaults[prefix], name):
                v = getattr(defaults[prefix], name)
                out[key] = "" if v is None else _fmt(v)
            elif key == "data.scaler":
                out[key] = train.scaler
            elif key == "data.stride":
                out[key] = str(train.stride)
            elif key == "data.clip_nonnegative":
                out[key] = "true"
            elif key == "backtest.buckets":
                out[key] = ",".join(f"{a}-{b}" for a, b in DEFAULT_BUCKETS)
            else:
                out[key] = ""
        return out

    def dump(self) -> str:
        return "".join(f"{k} = {v}\n" for k, v in self.effective().items())


def parse_config(text: str, source: str = "<string>") -> RunConfig:
    cfg = RunConfig(source=source)
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if not sep or not key:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        if key not in KEYS:
            raise ConfigError(f"{source}:{lineno}: unknown config key {key!r}")
        if key in cfg.values:
            raise ConfigError(f"{source}:{lineno}: key {key!r} given twice")
        try:
            cfg.values[key] = KEYS[key].parse(value)
        except (ValueError, TypeError, ForecastError) as exc:
            raise ConfigError(f"{source}:{lineno}: bad value for {key!r}: {exc}") from None
    return cfg


def load_config(path) -> RunConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return parse_config(text, str(path))


def describe_keys() -> str:
    return "".join(f"{k:28s} {KEYS[k].doc}\n" for k in sorted(KEYS))
