"""Feature embedding, encoder/decoder stacks and the full forecaster forward pass."""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import numerics as nx
from .attention import MultiHeadConfig, init_multi_head, inter_series_attention, multi_head
from .data import ScalerState, WindowBatch
from .errors import CheckpointError, ConfigError, ContractError, SchemaError, ShapeError
from .numerics import Tensor

UNKNOWN_INDEX = 0
INTER_SERIES_OPTIONS = ("raw", "projected", "off")
POSITIONAL_OPTIONS = ("none", "sinusoidal")


@dataclass
class NetworkConfig:
    context_length: int = 24
    horizon: int = 3
    d_model: int = 128
    num_heads: int = 4
    encoder_blocks: int = 2
    decoder_blocks: int = 2
    ff_width: int = 0  # 0 -> 4 * d_model
    inter_series: str = "raw"
    inter_series_heads: int = 1
    inter_series_layers: int = 1
    embed_dim: int = 6
    positional_encoding: str = "none"
    date_features: bool = True
    dropout: float = 0.0
    ln_eps: float = 1e-5

    def validate(self) -> None:
        for name in ("context_length", "horizon", "d_model", "num_heads", "encoder_blocks",
                     "decoder_blocks", "inter_series_heads", "inter_series_layers", "embed_dim"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.d_model % self.num_heads:
            raise ConfigError(f"d_model {self.d_model} not divisible by num_heads {self.num_heads}")
        if self.inter_series not in INTER_SERIES_OPTIONS:
            raise ConfigError(f"inter_series must be one of {INTER_SERIES_OPTIONS}")
        if self.inter_series == "projected" and self.context_length % self.inter_series_heads:
            raise ConfigError("context_length must be divisible by inter_series_heads")
        if self.positional_encoding not in POSITIONAL_OPTIONS:
            raise ConfigError(f"positional_encoding must be one of {POSITIONAL_OPTIONS}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must lie in [0, 1)")
        if self.ff_width < 0:
            raise ConfigError("ff_width must be >= 0")

    @property
    def ff(self) -> int:
        return self.ff_width or 4 * self.d_model


@dataclass
class FeatureSpec:
    """Continuous inputs and ID vocabularies.  Index 0 of each table is reserved for unknown IDs."""

    covariate_names: list[str] = field(default_factory=list)
    product_vocab: dict[str, int] = field(default_factory=dict)
    location_vocab: dict[str, int] = field(default_factory=dict)
    embed_dim: int = 6
    d_model: int = 128
    base_year: int = 2000
    date_features: bool = True
    inter_series: bool = True

    @classmethod
    def from_ids(cls, products: Sequence[str], locations: Sequence[str], **kw) -> "FeatureSpec":
        pv = {p: i + 1 for i, p in enumerate(sorted(set(products)))}
        lv = {s: i + 1 for i, s in enumerate(sorted(set(locations)))}
        return cls(product_vocab=pv, location_vocab=lv, **kw)

    @property
    def continuous_names(self) -> list[str]:
        names = ["target"] + list(self.covariate_names)
        if self.date_features:
            names += ["log_age", "month"]
        if self.inter_series:
            names.append("inter_series")
        return names

    @property
    def n_continuous(self) -> int:
        return len(self.continuous_names)

    def product_index(self, pid: str) -> int:
        return self.product_vocab.get(pid, UNKNOWN_INDEX)

    def location_index(self, lid: str) -> int:
        return self.location_vocab.get(lid, UNKNOWN_INDEX)


@dataclass
class ModelState:
    params: dict[str, Tensor]
    spec: FeatureSpec
    config: NetworkConfig
    scaler: ScalerState

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def num_parameters(self) -> int:
        return sum(p.size for p in self.params.values())


# -- features --------------------------------------------------------------------


def build_date_features(dates, base_year: int) -> np.ndarray:
    """Two features per month: log age ``ln(year - base_year + 1)`` and month scaled to [-0.5, 0.5].

    ``dates`` holds absolute month indices or ``(year, month)`` pairs.
    """
    arr = np.asarray(dates)
    if arr.ndim >= 1 and arr.shape[-1:] == (2,) and arr.ndim == 2:
        years, months = arr[:, 0].astype(int), arr[:, 1].astype(int)
    else:
        idx = arr.astype(int)
        years, months = idx // 12, idx % 12 + 1
    if np.any((months < 1) | (months > 12)):
        raise ContractError("month outside 1..12")
    if np.any(years < base_year):
        raise ContractError(f"date before base year {base_year}")
    return np.stack([np.log(years - base_year + 1.0), (months - 1) / 11.0 - 0.5], axis=-1)


def sinusoidal_encoding(positions: np.ndarray, d_model: int) -> np.ndarray:
    pos = np.asarray(positions, dtype=float)[:, None]
    i = np.arange(d_model)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / d_model)
    return np.where(i % 2 == 0, np.sin(angle), np.cos(angle))


# -- parameters ------------------------------------------------------------------


def _mh_cfg(cfg: NetworkConfig) -> MultiHeadConfig:
    return MultiHeadConfig(cfg.num_heads, cfg.d_model)


def _is_cfg(cfg: NetworkConfig) -> MultiHeadConfig:
    return MultiHeadConfig(cfg.inter_series_heads, cfg.context_length)


def init_params(cfg: NetworkConfig, spec: FeatureSpec, rng: np.random.Generator) -> dict[str, Tensor]:
    d, e, ff = cfg.d_model, spec.embed_dim, cfg.ff
    p: dict[str, Tensor] = {}

    def add_mh(prefix, mh):
        for k, v in init_multi_head(rng, mh).items():
            p[f"{prefix}.{k}"] = v

    def add_ln(prefix):
        p[f"{prefix}.gain"] = nx.ones(d)
        p[f"{prefix}.bias"] = nx.zeros(d)

    def add_ff(prefix):
        p[f"{prefix}.w1"] = nx.glorot_uniform(rng, d, ff)
        p[f"{prefix}.b1"] = nx.zeros(ff)
        p[f"{prefix}.w2"] = nx.glorot_uniform(rng, ff, d)
        p[f"{prefix}.b2"] = nx.zeros(d)

    if cfg.inter_series == "projected":
        for k in range(cfg.inter_series_layers):
            add_mh(f"inter_series.{k}", _is_cfg(cfg))
    p["embed.cont.w"] = nx.glorot_uniform(rng, spec.n_continuous, d)
    p["embed.cont.b"] = nx.zeros(d)
    p["embed.product"] = nx.embedding_normal(rng, len(spec.product_vocab) + 1, e)
    p["embed.location"] = nx.embedding_normal(rng, len(spec.location_vocab) + 1, e)
    p["embed.in.w"] = nx.glorot_uniform(rng, d + 2 * e, d)
    p["embed.in.b"] = nx.zeros(d)
    for i in range(cfg.encoder_blocks):
        add_mh(f"encoder.{i}.self", _mh_cfg(cfg))
        add_ln(f"encoder.{i}.ln1")
        add_ff(f"encoder.{i}.ff")
        add_ln(f"encoder.{i}.ln2")
    for i in range(cfg.decoder_blocks):
        add_mh(f"decoder.{i}.self", _mh_cfg(cfg))
        add_ln(f"decoder.{i}.ln1")
        add_mh(f"decoder.{i}.cross", _mh_cfg(cfg))
        add_ln(f"decoder.{i}.ln2")
        add_ff(f"decoder.{i}.ff")
        add_ln(f"decoder.{i}.ln3")
    p["head.w"] = nx.glorot_uniform(rng, d, 1)
    p["head.b"] = nx.zeros(1)
    return p


def init_model(cfg: NetworkConfig, spec: FeatureSpec, scaler: ScalerState, seed: int = 0) -> ModelState:
    cfg.validate()
    spec.d_model = cfg.d_model
    spec.embed_dim = cfg.embed_dim
    spec.date_features = cfg.date_features
    spec.inter_series = cfg.inter_series != "off"
    rng = np.random.default_rng(seed)
    return ModelState(init_params(cfg, spec, rng), spec, cfg, scaler)


# -- batching --------------------------------------------------------------------


@dataclass
class Batch:
    panel: np.ndarray          # (B, m, L)
    series_mask: np.ndarray    # (B, m)
    target: np.ndarray         # (B, L)
    covariates: np.ndarray     # (B, L, F)
    context_dates: np.ndarray  # (B, L)
    future_dates: np.ndarray   # (B, h)
    product_index: np.ndarray  # (B,)
    location_index: np.ndarray  # (B,)
    labels: np.ndarray         # (B, h)
    label_mask: np.ndarray     # (B, h)
    unknown_ids: list[str] = field(default_factory=list)

    @property
    def size(self) -> int:
        return self.panel.shape[0]


def collate(windows: Sequence[WindowBatch], state: ModelState) -> Batch:
    cfg, spec = state.config, state.spec
    if not windows:
        raise ContractError("collate: no windows")
    L, h = cfg.context_length, cfg.horizon
    for w in windows:
        if w.panel_context.shape[1] != L:
            raise ShapeError(f"window context length {w.panel_context.shape[1]} != {L}")
        if len(w.future_dates) != h:
            raise ShapeError(f"window horizon {len(w.future_dates)} != {h}")
        if w.covariates.shape[-1] != len(spec.covariate_names):
            raise SchemaError(
                f"window has {w.covariates.shape[-1]} covariates, model expects "
                f"{len(spec.covariate_names)} ({', '.join(spec.covariate_names) or 'none'})"
            )
    unknown = sorted({f"product_id={w.product_id}" for w in windows if w.product_id not in spec.product_vocab}
                     | {f"location_id={w.location_id}" for w in windows
                        if w.location_id not in spec.location_vocab})
    return Batch(
        panel=np.stack([w.panel_context for w in windows]),
        series_mask=np.stack([w.series_mask for w in windows]),
        target=np.stack([w.target_context for w in windows]),
        covariates=np.stack([w.covariates for w in windows]),
        context_dates=np.stack([w.context_dates for w in windows]),
        future_dates=np.stack([w.future_dates for w in windows]),
        product_index=np.array([spec.product_index(w.product_id) for w in windows]),
        location_index=np.array([spec.location_index(w.location_id) for w in windows]),
        labels=np.stack([w.labels for w in windows]),
        label_mask=np.stack([w.label_mask for w in windows]),
        unknown_ids=unknown,
    )


# -- layers ----------------------------------------------------------------------


def _linear(x: Tensor, params, prefix: str) -> Tensor:
    return nx.matmul(x, params[f"{prefix}.w"]) + params[f"{prefix}.b"]


def _mh_params(params, prefix: str) -> dict[str, Tensor]:
    return {k: params[f"{prefix}.{k}"] for k in ("wq", "wk", "wv", "wo")}


def _ln(x: Tensor, params, prefix: str, eps: float) -> Tensor:
    return nx.layer_norm(x, params[f"{prefix}.gain"], params[f"{prefix}.bias"], eps)


def _ff(x: Tensor, params, prefix: str) -> Tensor:
    hidden = nx.relu(nx.matmul(x, params[f"{prefix}.w1"]) + params[f"{prefix}.b1"])
    return nx.matmul(hidden, params[f"{prefix}.w2"]) + params[f"{prefix}.b2"]


def embed(cont: Tensor, product_index, location_index, state: ModelState) -> Tensor:
    """Project continuous inputs ``(B, T, C)``, concatenate both ID embeddings, project to d_model."""
    p, spec = state.params, state.spec
    if cont.shape[-1] != spec.n_continuous:
        raise SchemaError(
            f"expected {spec.n_continuous} continuous features {spec.continuous_names}, got {cont.shape[-1]}"
        )
    B, T = cont.shape[0], cont.shape[1]
    e = spec.embed_dim
    cont_proj = nx.matmul(cont, p["embed.cont.w"]) + p["embed.cont.b"]
    prod = nx.broadcast_to(nx.reshape(nx.take_rows(p["embed.product"], product_index), (B, 1, e)), (B, T, e))
    loc = nx.broadcast_to(nx.reshape(nx.take_rows(p["embed.location"], location_index), (B, 1, e)), (B, T, e))
    return _linear(nx.concat([cont_proj, prod, loc], axis=-1), p, "embed.in")


def embed_step(target_value: float, continuous_feats, product_id: str, location_id: str,
               spec: FeatureSpec, params: dict[str, Tensor]) -> Tensor:
    """Embedding of one time step.

    ``continuous_feats`` lists every continuous input after the target, in
    ``spec.continuous_names`` order.
    """
    feats = np.concatenate([[float(target_value)], np.asarray(continuous_feats, dtype=float).ravel()])
    if feats.size != spec.n_continuous:
        raise SchemaError(f"expected {spec.n_continuous - 1} continuous features after the target, "
                          f"got {feats.size - 1}")
    state = ModelState(params, spec, NetworkConfig(d_model=spec.d_model, embed_dim=spec.embed_dim),
                       ScalerState("none"))
    out = embed(Tensor(feats.reshape(1, 1, -1)), [spec.product_index(product_id)],
                [spec.location_index(location_id)], state)
    return nx.reshape(out, (spec.d_model,))


def encoder_block(x: Tensor, state: ModelState, i: int, rng=None, maps=None) -> Tensor:
    p, cfg = state.params, state.config
    pre = f"encoder.{i}"
    att, w = multi_head(x, x, x, _mh_cfg(cfg), _mh_params(p, f"{pre}.self"))
    if maps is not None:
        maps[f"{pre}.self"] = w.data
    x = _ln(x + nx.dropout(att, cfg.dropout, rng), p, f"{pre}.ln1", cfg.ln_eps)
    x = _ln(x + nx.dropout(_ff(x, p, f"{pre}.ff"), cfg.dropout, rng), p, f"{pre}.ln2", cfg.ln_eps)
    return x


def decoder_block(y: Tensor, memory: Tensor, state: ModelState, i: int, rng=None, maps=None) -> Tensor:
    p, cfg = state.params, state.config
    pre = f"decoder.{i}"
    h = y.shape[-2]
    causal = np.tril(np.ones((h, h), dtype=bool))
    att, w_self = multi_head(y, y, y, _mh_cfg(cfg), _mh_params(p, f"{pre}.self"), causal)
    y = _ln(y + nx.dropout(att, cfg.dropout, rng), p, f"{pre}.ln1", cfg.ln_eps)
    att, w_cross = multi_head(y, memory, memory, _mh_cfg(cfg), _mh_params(p, f"{pre}.cross"))
    y = _ln(y + nx.dropout(att, cfg.dropout, rng), p, f"{pre}.ln2", cfg.ln_eps)
    y = _ln(y + nx.dropout(_ff(y, p, f"{pre}.ff"), cfg.dropout, rng), p, f"{pre}.ln3", cfg.ln_eps)
    if maps is not None:
        maps[f"{pre}.self"] = w_self.data
        maps[f"{pre}.cross"] = w_cross.data
    return y


# -- forward ---------------------------------------------------------------------


@dataclass
class ForwardOutput:
    forecast: Tensor                    # (B, h), scaled space
    inter_series_weights: np.ndarray | None  # (B, m)
    temporal_attention: dict[str, np.ndarray]
    inter_series: Tensor | None = None  # (B, L)


def forward_batch(batch: Batch, state: ModelState, rng: np.random.Generator | None = None) -> ForwardOutput:
    """Forecast ``h`` scaled values per window.

    The inter-series layer turns the target's context window into an informed
    window that is appended, step by step, to the continuous inputs.  Time
    enters only through the date features unless sinusoidal positions are
    switched on.  The decoder sees the ``h`` future steps' date features and
    IDs, with target/covariate channels zero-filled, under a causal mask.
    """
    cfg, spec, p = state.config, state.spec, state.params
    B, L, h = batch.size, cfg.context_length, cfg.horizon
    if batch.target.shape[1] != L or batch.panel.shape[2] != L:
        raise ShapeError(f"batch context length {batch.target.shape[1]} != {L}")
    if batch.future_dates.shape[1] != h:
        raise ShapeError(f"batch horizon {batch.future_dates.shape[1]} != configured {h}")
    if batch.covariates.shape[-1] != len(spec.covariate_names):
        raise SchemaError("covariate count does not match the feature spec")

    target = Tensor(batch.target)
    x_is, is_weights = None, None
    if cfg.inter_series != "off":
        panel = Tensor(batch.panel)
        query = nx.reshape(target, (B, 1, L))
        for k in range(cfg.inter_series_layers):
            mode = cfg.inter_series
            params = _mh_params(p, f"inter_series.{k}") if mode == "projected" else None
            query, w = inter_series_attention(query, panel, batch.series_mask, mode, params, _is_cfg(cfg))
        x_is = nx.reshape(query, (B, L))
        is_weights = w.data.reshape(B, -1)

    F = batch.covariates.shape[-1]
    ctx_parts = [nx.reshape(target, (B, L, 1))]
    dec_parts = [Tensor(np.zeros((B, h, 1)))]
    if F:
        ctx_parts.append(Tensor(batch.covariates))
        dec_parts.append(Tensor(np.zeros((B, h, F))))
    if cfg.date_features:
        ctx_parts.append(Tensor(build_date_features(batch.context_dates.reshape(-1), spec.base_year).reshape(B, L, 2)))
        dec_parts.append(Tensor(build_date_features(batch.future_dates.reshape(-1), spec.base_year).reshape(B, h, 2)))
    if x_is is not None:
        ctx_parts.append(nx.reshape(x_is, (B, L, 1)))
        dec_parts.append(Tensor(np.zeros((B, h, 1))))

    enc = embed(nx.concat(ctx_parts, axis=-1), batch.product_index, batch.location_index, state)
    dec = embed(nx.concat(dec_parts, axis=-1), batch.product_index, batch.location_index, state)
    if cfg.positional_encoding == "sinusoidal":
        enc = enc + sinusoidal_encoding(np.arange(L), cfg.d_model)
        dec = dec + sinusoidal_encoding(np.arange(L, L + h), cfg.d_model)

    maps: dict[str, np.ndarray] = {}
    for i in range(cfg.encoder_blocks):
        enc = encoder_block(enc, state, i, rng, maps)
    for i in range(cfg.decoder_blocks):
        dec = decoder_block(dec, enc, state, i, rng, maps)
    out = nx.matmul(dec, p["head.w"]) + p["head.b"]
    return ForwardOutput(nx.reshape(out, (B, h)), is_weights, maps, x_is)


def forward(batch, state: ModelState) -> ForwardOutput:
    """Forward pass for one :class:`WindowBatch`, a list of them, or a collated :class:`Batch`."""
    if isinstance(batch, WindowBatch):
        batch = collate([batch], state)
    elif not isinstance(batch, Batch):
        batch = collate(list(batch), state)
    return forward_batch(batch, state)


def predict(windows: Sequence[WindowBatch], state: ModelState, batch_size: int = 256):
    """Scaled forecasts ``(n, h)`` and inter-series weights ``(n, m)`` without recording a graph."""
    preds, weights = [], []
    with nx.no_grad():
        for s in range(0, len(windows), batch_size):
            out = forward_batch(collate(windows[s:s + batch_size], state), state)
            preds.append(out.forecast.data)
            if out.inter_series_weights is not None:
                weights.append(out.inter_series_weights)
    h = state.config.horizon
    return (np.concatenate(preds) if preds else np.zeros((0, h)),
            np.concatenate(weights) if weights else None)


# -- checkpoints -----------------------------------------------------------------

MAGIC = b"ISTFCKPT"
FORMAT_VERSION = 1


def save_state(state: ModelState, path) -> None:
    """Write ``MAGIC | u32 version | u64 len | JSON metadata | u32 count | tensors``.

    Each tensor is ``u32 len | path | u32 rank | u64 dims... | float64 LE data``.
    """
    meta = {
        "config": asdict(state.config),
        "spec": asdict(state.spec),
        "scaler": state.scaler.to_dict(),
    }
    meta_bytes = json.dumps(meta, sort_keys=True).encode("utf-8")
    parts = [MAGIC, struct.pack("<I", FORMAT_VERSION), struct.pack("<Q", len(meta_bytes)), meta_bytes,
             struct.pack("<I", len(state.params))]
    for name, t in state.params.items():
        nb = name.encode("utf-8")
        parts.append(struct.pack("<I", len(nb)) + nb + struct.pack("<I", t.ndim))
        parts.append(struct.pack(f"<{t.ndim}Q", *t.shape))
        parts.append(np.ascontiguousarray(t.data, dtype="<f8").tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(parts))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def take(self, n: int) -> bytes:
        if n < 0 or self.pos + n > len(self.buf):
            raise CheckpointError("checkpoint is truncated")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_state(path) -> ModelState:
    try:
        with open(path, "rb") as fh:
            buf = fh.read()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from None
    r = _Reader(buf)
    if len(buf) < len(MAGIC) or r.take(len(MAGIC)) != MAGIC:
        raise CheckpointError(f"{path}: corrupted header (bad magic bytes)")
    (version,) = r.unpack("<I")
    if version != FORMAT_VERSION:
        raise CheckpointError(
            f"{path}: unsupported checkpoint format version {version} (this build reads version {FORMAT_VERSION})"
        )
    (meta_len,) = r.unpack("<Q")
    try:
        meta = json.loads(r.take(meta_len).decode("utf-8"))
        cfg = NetworkConfig(**meta["config"])
        spec = FeatureSpec(**meta["spec"])
        scaler = ScalerState.from_dict(meta["scaler"])
    except (ValueError, KeyError, TypeError) as exc:
        raise CheckpointError(f"{path}: corrupted metadata ({exc})") from None
    (count,) = r.unpack("<I")
    params: dict[str, Tensor] = {}
    for _ in range(count):
        (n,) = r.unpack("<I")
        try:
            name = r.take(n).decode("utf-8")
        except UnicodeDecodeError:
            raise CheckpointError(f"{path}: corrupted tensor name") from None
        (rank,) = r.unpack("<I")
        if rank > 8:
            raise CheckpointError(f"{path}: implausible tensor rank {rank}")
        shape = r.unpack(f"<{rank}Q")
        size = int(math.prod(shape))
        data = np.frombuffer(r.take(8 * size), dtype="<f8").astype(np.float64).reshape(shape)
        params[name] = Tensor(data, requires_grad=True)
    if r.pos != len(buf):
        raise CheckpointError(f"{path}: trailing bytes after last tensor")
    expected = init_params(cfg, spec, np.random.default_rng(0))
    if set(expected) != set(params):
        missing = sorted(set(expected) - set(params))
        extra = sorted(set(params) - set(expected))
        raise CheckpointError(f"{path}: parameter set mismatch (missing {missing}, unexpected {extra})")
    for k, t in expected.items():
        if t.shape != params[k].shape:
            raise CheckpointError(f"{path}: parameter {k} has shape {params[k].shape}, expected {t.shape}")
    ordered = {k: params[k] for k in expected}
    return ModelState(ordered, spec, cfg, scaler)
