"""Shared multi-head scaled-dot-product attention with analytic backward.

Used by the graph-transformer encoder layer (self-attention restricted to
graph neighborhoods) and by the cross-modal attention stage (full attention
between two node sets). Scores are scaled by 1/sqrt(d_head); masked
positions receive -inf before the softmax, so their attention weight and
gradient are exactly zero.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numcore import softmax_rows, softmax_rows_backward


@dataclass
class MhaCache:
    h_q: np.ndarray
    h_kv: np.ndarray
    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray
    q3: np.ndarray
    k3: np.ndarray
    v3: np.ndarray
    alpha: np.ndarray
    ctx: np.ndarray
    heads: int
    scale: float


def _split_heads(m: np.ndarray, heads: int) -> np.ndarray:
    n, a = m.shape
    return m.reshape(n, heads, a // heads).transpose(1, 0, 2)


def _merge_heads(m3: np.ndarray) -> np.ndarray:
    heads, n, dh = m3.shape
    return m3.transpose(1, 0, 2).reshape(n, heads * dh)


def mha_forward(
    h_q: np.ndarray,
    h_kv: np.ndarray,
    wq: np.ndarray,
    wk: np.ndarray,
    wv: np.ndarray,
    wo: np.ndarray,
    heads: int,
    mask: np.ndarray | None = None,
    bias: np.ndarray | None = None,
) -> tuple[np.ndarray, MhaCache]:
    """Multi-head attention: queries from ``h_q``, keys/values from ``h_kv``.

    ``mask`` (bool, n_q x n_kv) restricts attention to True positions; every
    query row must keep at least one True entry. ``bias`` is an additive
    score offset shared across heads (not differentiated).
    """
    a = wq.shape[1]
    if a % heads != 0:
        raise ValueError(f"attention width {a} not divisible by {heads} heads")
    dh = a // heads
    scale = 1.0 / np.sqrt(dh)

    q3 = _split_heads(h_q @ wq, heads)
    k3 = _split_heads(h_kv @ wk, heads)
    v3 = _split_heads(h_kv @ wv, heads)

    scores = (q3 @ k3.transpose(0, 2, 1)) * scale
    if bias is not None:
        scores = scores + bias[None, :, :]
    if mask is not None:
        scores = np.where(mask[None, :, :], scores, -np.inf)
    alpha = softmax_rows(scores)

    ctx = _merge_heads(alpha @ v3)
    out = ctx @ wo
    return out, MhaCache(h_q, h_kv, wq, wk, wv, wo, q3, k3, v3, alpha, ctx, heads, scale)


def mha_backward(
    grad_out: np.ndarray, cache: MhaCache
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Returns (dh_q, dh_kv, dwq, dwk, dwv, dwo)."""
    c = cache
    dwo = c.ctx.T @ grad_out
    dctx3 = _split_heads(grad_out @ c.wo.T, c.heads)

    dalpha = dctx3 @ c.v3.transpose(0, 2, 1)
    dv3 = c.alpha.transpose(0, 2, 1) @ dctx3
    dscores = softmax_rows_backward(dalpha, c.alpha)

    dq3 = (dscores @ c.k3) * c.scale
    dk3 = (dscores.transpose(0, 2, 1) @ c.q3) * c.scale

    dq = _merge_heads(dq3)
    dk = _merge_heads(dk3)
    dv = _merge_heads(dv3)

    dwq = c.h_q.T @ dq
    dwk = c.h_kv.T @ dk
    dwv = c.h_kv.T @ dv
    dh_q = dq @ c.wq.T
    dh_kv = dk @ c.wk.T + dv @ c.wv.T
    return dh_q, dh_kv, dwq, dwk, dwv, dwo
