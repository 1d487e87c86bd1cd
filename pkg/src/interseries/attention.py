"""Scaled dot-product, multi-head and inter-series attention."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .errors import MaskError, ShapeError
from .numerics import Tensor

INTER_SERIES_MODES = ("raw", "projected")


@dataclass(frozen=True)
class MultiHeadConfig:
    num_heads: int
    d_model: int
    d_k: int | None = None
    d_v: int | None = None

    def __post_init__(self):
        if self.num_heads < 1 or self.d_model < 1:
            raise ShapeError("num_heads and d_model must be positive")
        if self.d_k is None or self.d_v is None:
            if self.d_model % self.num_heads:
                raise ShapeError(
                    f"d_model={self.d_model} is not divisible by num_heads={self.num_heads}"
                )
            per_head = self.d_model // self.num_heads
            object.__setattr__(self, "d_k", self.d_k or per_head)
            object.__setattr__(self, "d_v", self.d_v or per_head)
        if self.d_k < 1 or self.d_v < 1:
            raise ShapeError("d_k and d_v must be positive")


def init_multi_head(rng: np.random.Generator, cfg: MultiHeadConfig) -> dict[str, Tensor]:
    """Fused projections: head ``i`` owns column block ``i`` of ``wq``/``wk``/``wv``."""
    h, d = cfg.num_heads, cfg.d_model
    return {
        "wq": nx.glorot_uniform(rng, d, h * cfg.d_k),
        "wk": nx.glorot_uniform(rng, d, h * cfg.d_k),
        "wv": nx.glorot_uniform(rng, d, h * cfg.d_v),
        "wo": nx.glorot_uniform(rng, h * cfg.d_v, d),
    }


def _check_mask(mask, logits_shape) -> np.ndarray:
    keep = np.asarray(mask, dtype=bool)
    try:
        keep = np.broadcast_to(keep, logits_shape)
    except ValueError:
        raise ShapeError(f"mask shape {np.shape(mask)} does not fit logits {logits_shape}") from None
    if not keep.any(axis=-1).all():
        raise MaskError("every key is masked for at least one query")
    return keep


def attention(q: Tensor, k: Tensor, v: Tensor, mask=None) -> tuple[Tensor, Tensor]:
    """softmax(q k^T / sqrt(d_k)) v over the last two axes.

    ``mask`` is boolean and broadcastable to the logits ``(..., a, b)``; a
    1-D mask of length ``b`` masks keys.  Returns the output and the weights.
    """
    q, k, v = nx.as_tensor(q), nx.as_tensor(k), nx.as_tensor(v)
    if q.shape[-1] != k.shape[-1]:
        raise ShapeError(f"query dim {q.shape} does not match key dim {k.shape}")
    if k.shape[-2] != v.shape[-2]:
        raise ShapeError(f"keys {k.shape} and values {v.shape} differ in length")
    d_k = q.shape[-1]
    logits = nx.scale(nx.matmul(q, nx.swap_last(k)), 1.0 / np.sqrt(d_k))
    keep = None if mask is None else _check_mask(mask, logits.shape)
    weights = nx.softmax(logits, axis=-1, mask=keep)
    return nx.matmul(weights, v), weights


def _split_heads(x: Tensor, heads: int) -> Tensor:
    lead, width = x.shape[:-1], x.shape[-1]
    x = nx.reshape(x, lead + (heads, width // heads))
    n = x.ndim
    axes = tuple(range(n - 3)) + (n - 2, n - 3, n - 1)
    return nx.transpose(x, axes)


def _merge_heads(x: Tensor) -> Tensor:
    n = x.ndim
    axes = tuple(range(n - 3)) + (n - 2, n - 3, n - 1)
    x = nx.transpose(x, axes)
    return nx.reshape(x, x.shape[:-2] + (x.shape[-2] * x.shape[-1],))


def multi_head(q: Tensor, k: Tensor, v: Tensor, cfg: MultiHeadConfig,
               params: dict[str, Tensor], mask=None) -> tuple[Tensor, Tensor]:
    """Multi-head attention; returns output ``(..., a, d_model)`` and weights ``(..., h, a, b)``.

    ``mask`` broadcasts against the per-head logits ``(..., h, a, b)``, so a
    ``(B, b)`` key mask must be passed as ``(B, 1, 1, b)``.
    """
    for name, t in (("query", q), ("key", k), ("value", v)):
        if t.shape[-1] != cfg.d_model:
            raise ShapeError(f"{name} last dim {t.shape[-1]} != d_model {cfg.d_model}")
    h = cfg.num_heads
    qh = _split_heads(nx.matmul(q, params["wq"]), h)
    kh = _split_heads(nx.matmul(k, params["wk"]), h)
    vh = _split_heads(nx.matmul(v, params["wv"]), h)
    heads, weights = attention(qh, kh, vh, mask)
    return nx.matmul(_merge_heads(heads), params["wo"]), weights


def inter_series_attention(p_q: Tensor, panel: Tensor, mask, mode: str = "raw",
                           params: dict[str, Tensor] | None = None,
                           cfg: MultiHeadConfig | None = None) -> tuple[Tensor, Tensor]:
    """Attend from one series' context window to every series' context window.

    ``p_q`` is ``(..., 1, L)``, ``panel`` is ``(..., m, L)`` and ``mask`` is a
    boolean ``(..., m)`` vector of attendable series.  In ``raw`` mode the
    windows are used directly with scaling ``1/sqrt(L)``; ``projected`` mode
    applies learned square ``L x L`` multi-head projections.  Returns the
    informed window ``(..., 1, L)`` and head-averaged weights ``(..., 1, m)``.
    """
    p_q, panel = nx.as_tensor(p_q), nx.as_tensor(panel)
    if p_q.ndim < 2 or p_q.shape[-2] != 1:
        raise ShapeError(f"target window must be (..., 1, L), got {p_q.shape}")
    if p_q.shape[-1] != panel.shape[-1]:
        raise ShapeError(
            f"context length mismatch: target {p_q.shape[-1]} vs panel {panel.shape[-1]}"
        )
    keep = np.asarray(mask, dtype=bool)
    if keep.shape[-1] != panel.shape[-2]:
        raise ShapeError(f"mask length {keep.shape[-1]} != number of series {panel.shape[-2]}")
    if not keep.any(axis=-1).all():
        raise MaskError("all series are masked")
    key_mask = keep[..., None, :]
    if mode == "raw":
        return attention(p_q, panel, panel, key_mask)
    if mode == "projected":
        if params is None or cfg is None:
            raise ShapeError("projected inter-series attention needs parameters and a config")
        out, w = multi_head(p_q, panel, panel, cfg, params, key_mask[..., None, :, :])
        return out, nx.mean(w, axis=w.ndim - 3)
    raise ShapeError(f"unknown inter-series mode {mode!r}")
