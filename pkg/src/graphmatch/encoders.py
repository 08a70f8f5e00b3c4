"""Four GNN backbones producing node embeddings from a superpixel graph.

Backbones: gcn (symmetric-normalized convolution with self-loops), gat
(additive attention over neighborhoods, concatenated heads), sage (self and
mean-neighbor projections), graph_transformer (scaled dot-product attention
over neighborhoods with residual and optional edge-distance score bias).

Every layer has an analytic backward accumulating into ParamTensor grads.
Adjacency is consumed as dense binary matrices built from the edge list;
graphs here are small (hundreds of nodes), so dense is the simple choice.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .attention import mha_backward, mha_forward
from .numcore import ParamTensor, glorot_uniform, relu, relu_backward, softmax_rows, softmax_rows_backward

__all__ = [
    "BACKBONES",
    "EncoderConfig",
    "EncoderParams",
    "gcn_layer",
    "gat_layer",
    "sage_layer",
    "graph_transformer_layer",
    "encode",
    "encode_forward",
    "encode_backward",
]

BACKBONES = ("gcn", "gat", "sage", "graph_transformer")
_ATTENTION_BACKBONES = ("gat", "graph_transformer")
_LEAKY_SLOPE = 0.2


@dataclass
class EncoderConfig:
    """Architecture shared by all modality encoders."""

    backbone: str = "graph_transformer"
    layers: int = 2
    hidden_dim: int = 64
    out_dim: int = 64
    heads: int = 4
    edge_bias: bool = False
    edge_bias_strength: float = 1.0

    def validate(self) -> None:
        if self.backbone not in BACKBONES:
            raise ValueError(f"unknown backbone {self.backbone!r}; expected one of {BACKBONES}")
        if self.layers < 1:
            raise ValueError("layers must be >= 1")
        if self.backbone in _ATTENTION_BACKBONES:
            if self.hidden_dim % self.heads or self.out_dim % self.heads:
                raise ValueError(
                    f"hidden_dim {self.hidden_dim} and out_dim {self.out_dim} "
                    f"must be divisible by heads {self.heads}"
                )

    def layer_dims(self, in_dim: int) -> list[tuple[int, int]]:
        dims = []
        for li in range(self.layers):
            d_in = in_dim if li == 0 else self.hidden_dim
            d_out = self.out_dim if li == self.layers - 1 else self.hidden_dim
            dims.append((d_in, d_out))
        return dims


# parameter key order per backbone, fixed for checkpoint serialization
_LAYER_KEYS = {
    "gcn": ("w",),
    "gat": ("w", "a"),
    "sage": ("w_self", "w_neigh"),
    "graph_transformer": ("wq", "wk", "wv", "wo"),
}


@dataclass
class EncoderParams:
    """Per-layer ParamTensors for one modality's encoder."""

    backbone: str
    layers: list[dict[str, ParamTensor]] = field(default_factory=list)

    @classmethod
    def init(
        cls,
        rng: np.random.Generator,
        cfg: EncoderConfig,
        in_dim: int,
        name_prefix: str,
    ) -> EncoderParams:
        cfg.validate()
        layers = []
        for li, (d_in, d_out) in enumerate(cfg.layer_dims(in_dim)):
            prefix = f"{name_prefix}.layer{li}"
            if cfg.backbone == "gcn":
                layer = {"w": ParamTensor(f"{prefix}.w", glorot_uniform(rng, (d_in, d_out)))}
            elif cfg.backbone == "gat":
                d_head = d_out // cfg.heads
                layer = {
                    "w": ParamTensor(f"{prefix}.w", glorot_uniform(rng, (d_in, d_out))),
                    "a": ParamTensor(f"{prefix}.a", glorot_uniform(rng, (cfg.heads, 2 * d_head))),
                }
            elif cfg.backbone == "sage":
                layer = {
                    "w_self": ParamTensor(f"{prefix}.w_self", glorot_uniform(rng, (d_in, d_out))),
                    "w_neigh": ParamTensor(f"{prefix}.w_neigh", glorot_uniform(rng, (d_in, d_out))),
                }
            else:
                layer = {
                    "wq": ParamTensor(f"{prefix}.wq", glorot_uniform(rng, (d_in, d_out))),
                    "wk": ParamTensor(f"{prefix}.wk", glorot_uniform(rng, (d_in, d_out))),
                    "wv": ParamTensor(f"{prefix}.wv", glorot_uniform(rng, (d_in, d_out))),
                    "wo": ParamTensor(f"{prefix}.wo", glorot_uniform(rng, (d_out, d_out))),
                }
            layers.append(layer)
        return cls(backbone=cfg.backbone, layers=layers)

    def tensors(self) -> list[ParamTensor]:
        keys = _LAYER_KEYS[self.backbone]
        return [layer[k] for layer in self.layers for k in keys]


# ---------------------------------------------------------------------------
# Graph structure helpers
# ---------------------------------------------------------------------------


def adjacency_matrix(n_nodes: int, edges: np.ndarray) -> np.ndarray:
    """Dense symmetric boolean adjacency (no self-loops) from an edge list."""
    adj = np.zeros((n_nodes, n_nodes), dtype=bool)
    if len(edges):
        e = np.asarray(edges, dtype=np.int64)
        adj[e[:, 0], e[:, 1]] = True
        adj[e[:, 1], e[:, 0]] = True
    return adj


def _edge_bias_matrix(
    n_nodes: int, edges: np.ndarray, edge_dist: np.ndarray, strength: float
) -> np.ndarray:
    bias = np.zeros((n_nodes, n_nodes))
    if len(edges):
        e = np.asarray(edges, dtype=np.int64)
        bias[e[:, 0], e[:, 1]] = -strength * edge_dist
        bias[e[:, 1], e[:, 0]] = -strength * edge_dist
    return bias


@dataclass
class _GraphContext:
    """Dense structure matrices derived once per graph."""

    mask: np.ndarray  # neighborhood-plus-self boolean mask
    gcn_prop: np.ndarray | None = None
    sage_mean: np.ndarray | None = None
    bias: np.ndarray | None = None


def _graph_context(graph, cfg: EncoderConfig) -> _GraphContext:
    n = graph.node_features.shape[0]
    adj = adjacency_matrix(n, graph.edges)
    mask = adj | np.eye(n, dtype=bool)
    ctx = _GraphContext(mask=mask)
    if cfg.backbone == "gcn":
        a_hat = mask.astype(np.float64)
        d_inv_sqrt = 1.0 / np.sqrt(a_hat.sum(axis=1))
        ctx.gcn_prop = d_inv_sqrt[:, None] * a_hat * d_inv_sqrt[None, :]
    elif cfg.backbone == "sage":
        a = adj.astype(np.float64)
        deg = a.sum(axis=1, keepdims=True)
        ctx.sage_mean = np.divide(a, deg, out=np.zeros_like(a), where=deg > 0)
    elif cfg.backbone == "graph_transformer" and cfg.edge_bias:
        ctx.bias = _edge_bias_matrix(
            n, graph.edges, np.asarray(graph.edge_dist), cfg.edge_bias_strength
        )
    return ctx


# ---------------------------------------------------------------------------
# Layers: forward/backward pairs
# ---------------------------------------------------------------------------


def gcn_layer(h: np.ndarray, graph, w: np.ndarray) -> np.ndarray:
    """H' = D^{-1/2} (A + I) D^{-1/2} H W."""
    cfg = EncoderConfig(backbone="gcn", layers=1)
    ctx = _graph_context(graph, cfg)
    out, _ = _gcn_forward(h, ctx, w)
    return out


def _gcn_forward(h: np.ndarray, ctx: _GraphContext, w: np.ndarray) -> tuple[np.ndarray, tuple]:
    if h.shape[1] != w.shape[0]:
        raise ValueError(f"gcn width mismatch: {h.shape[1]} vs {w.shape[0]}")
    ph = ctx.gcn_prop @ h
    return ph @ w, (ph, h, w, ctx)


def _gcn_backward(grad_out: np.ndarray, cache: tuple) -> tuple[np.ndarray, dict[str, np.ndarray]]:
    ph, h, w, ctx = cache
    dw = ph.T @ grad_out
    dh = ctx.gcn_prop @ (grad_out @ w.T)  # propagation matrix is symmetric
    return dh, {"w": dw}


def sage_layer(
    h: np.ndarray, graph, w_self: np.ndarray, w_neigh: np.ndarray
) -> np.ndarray:
    """H'_i = W_self x_i + W_neigh mean_{j in N(i)} x_j (zero mean if isolated)."""
    cfg = EncoderConfig(backbone="sage", layers=1)
    ctx = _graph_context(graph, cfg)
    out, _ = _sage_forward(h, ctx, w_self, w_neigh)
    return out


def _sage_forward(
    h: np.ndarray, ctx: _GraphContext, w_self: np.ndarray, w_neigh: np.ndarray
) -> tuple[np.ndarray, tuple]:
    m = ctx.sage_mean @ h
    return h @ w_self + m @ w_neigh, (h, m, w_self, w_neigh, ctx)


def _sage_backward(grad_out: np.ndarray, cache: tuple) -> tuple[np.ndarray, dict[str, np.ndarray]]:
    h, m, w_self, w_neigh, ctx = cache
    dw_self = h.T @ grad_out
    dw_neigh = m.T @ grad_out
    dh = grad_out @ w_self.T + ctx.sage_mean.T @ (grad_out @ w_neigh.T)
    return dh, {"w_self": dw_self, "w_neigh": dw_neigh}


def gat_layer(h: np.ndarray, graph, w: np.ndarray, a: np.ndarray, heads: int) -> np.ndarray:
    """Additive-attention layer with LeakyReLU scores and concatenated heads."""
    cfg = EncoderConfig(backbone="gat", layers=1, heads=heads)
    ctx = _graph_context(graph, cfg)
    out, _ = _gat_forward(h, ctx, w, a, heads)
    return out


def _gat_forward(
    h: np.ndarray, ctx: _GraphContext, w: np.ndarray, a: np.ndarray, heads: int
) -> tuple[np.ndarray, tuple]:
    n, d_out = h.shape[0], w.shape[1]
    d_head = d_out // heads
    hw = h @ w
    hw3 = hw.reshape(n, heads, d_head).transpose(1, 0, 2)
    a_src, a_dst = a[:, :d_head], a[:, d_head:]
    s_src = np.einsum("hnd,hd->hn", hw3, a_src)
    s_dst = np.einsum("hnd,hd->hn", hw3, a_dst)
    raw = s_src[:, :, None] + s_dst[:, None, :]
    scored = np.where(raw > 0.0, raw, _LEAKY_SLOPE * raw)
    alpha = softmax_rows(np.where(ctx.mask[None, :, :], scored, -np.inf))
    ctx3 = alpha @ hw3
    out = ctx3.transpose(1, 0, 2).reshape(n, d_out)
    return out, (h, w, a, hw3, raw, alpha, heads)


def _gat_backward(grad_out: np.ndarray, cache: tuple) -> tuple[np.ndarray, dict[str, np.ndarray]]:
    h, w, a, hw3, raw, alpha, heads = cache
    n, d_out = grad_out.shape
    d_head = d_out // heads
    a_src, a_dst = a[:, :d_head], a[:, d_head:]

    dctx3 = grad_out.reshape(n, heads, d_head).transpose(1, 0, 2)
    dalpha = dctx3 @ hw3.transpose(0, 2, 1)
    dhw3 = alpha.transpose(0, 2, 1) @ dctx3
    dscored = softmax_rows_backward(dalpha, alpha)  # zero at masked positions
    draw = dscored * np.where(raw > 0.0, 1.0, _LEAKY_SLOPE)
    ds_src = draw.sum(axis=2)
    ds_dst = draw.sum(axis=1)
    da_src = np.einsum("hn,hnd->hd", ds_src, hw3)
    da_dst = np.einsum("hn,hnd->hd", ds_dst, hw3)
    dhw3 += ds_src[:, :, None] * a_src[:, None, :] + ds_dst[:, :, None] * a_dst[:, None, :]

    dhw = dhw3.transpose(1, 0, 2).reshape(n, d_out)
    dw = h.T @ dhw
    dh = dhw @ w.T
    return dh, {"w": dw, "a": np.concatenate([da_src, da_dst], axis=1)}


def graph_transformer_layer(
    h: np.ndarray,
    graph,
    wq: np.ndarray,
    wk: np.ndarray,
    wv: np.ndarray,
    wo: np.ndarray,
    heads: int,
    edge_bias: bool = False,
    edge_bias_strength: float = 1.0,
) -> np.ndarray:
    """Neighborhood-masked multi-head self-attention with residual."""
    cfg = EncoderConfig(
        backbone="graph_transformer",
        layers=1,
        heads=heads,
        edge_bias=edge_bias,
        edge_bias_strength=edge_bias_strength,
    )
    ctx = _graph_context(graph, cfg)
    out, _ = _gt_forward(h, ctx, wq, wk, wv, wo, heads)
    return out


def _gt_forward(
    h: np.ndarray,
    ctx: _GraphContext,
    wq: np.ndarray,
    wk: np.ndarray,
    wv: np.ndarray,
    wo: np.ndarray,
    heads: int,
) -> tuple[np.ndarray, tuple]:
    att, mha_cache = mha_forward(h, h, wq, wk, wv, wo, heads, mask=ctx.mask, bias=ctx.bias)
    residual = h.shape[1] == att.shape[1]
    out = h + att if residual else att
    return out, (mha_cache, residual)


def _gt_backward(grad_out: np.ndarray, cache: tuple) -> tuple[np.ndarray, dict[str, np.ndarray]]:
    mha_cache, residual = cache
    dq, dkv, dwq, dwk, dwv, dwo = mha_backward(grad_out, mha_cache)
    dh = dq + dkv
    if residual:
        dh = dh + grad_out
    return dh, {"wq": dwq, "wk": dwk, "wv": dwv, "wo": dwo}


_FORWARD = {
    "gcn": lambda h, ctx, layer, heads: _gcn_forward(h, ctx, layer["w"].value),
    "sage": lambda h, ctx, layer, heads: _sage_forward(
        h, ctx, layer["w_self"].value, layer["w_neigh"].value
    ),
    "gat": lambda h, ctx, layer, heads: _gat_forward(
        h, ctx, layer["w"].value, layer["a"].value, heads
    ),
    "graph_transformer": lambda h, ctx, layer, heads: _gt_forward(
        h,
        ctx,
        layer["wq"].value,
        layer["wk"].value,
        layer["wv"].value,
        layer["wo"].value,
        heads,
    ),
}

_BACKWARD = {
    "gcn": _gcn_backward,
    "sage": _sage_backward,
    "gat": _gat_backward,
    "graph_transformer": _gt_backward,
}


# ---------------------------------------------------------------------------
# Stacked encoder
# ---------------------------------------------------------------------------


@dataclass
class EncodeCache:
    ctx: _GraphContext
    layer_caches: list[tuple]
    pre_activations: list[np.ndarray]  # inputs to each relu between layers


def encode(graph, params: EncoderParams, cfg: EncoderConfig) -> np.ndarray:
    """Stack the configured layers with relu in between, none after the last."""
    h, _ = encode_forward(graph, params, cfg)
    return h


def encode_forward(graph, params: EncoderParams, cfg: EncoderConfig) -> tuple[np.ndarray, EncodeCache]:
    cfg.validate()
    if params.backbone != cfg.backbone:
        raise ValueError(f"params built for {params.backbone!r}, config says {cfg.backbone!r}")
    h = np.asarray(graph.node_features, dtype=np.float64)
    first = next(iter(params.layers[0].values())).value
    if h.shape[1] != first.shape[0]:
        raise ValueError(
            f"node feature width {h.shape[1]} does not match encoder input width {first.shape[0]}"
        )
    ctx = _graph_context(graph, cfg)
    forward = _FORWARD[cfg.backbone]
    layer_caches: list[tuple] = []
    pre_acts: list[np.ndarray] = []
    for li, layer in enumerate(params.layers):
        z, cache = forward(h, ctx, layer, cfg.heads)
        layer_caches.append(cache)
        if li < len(params.layers) - 1:
            pre_acts.append(z)
            h = relu(z)
        else:
            h = z
    return h, EncodeCache(ctx=ctx, layer_caches=layer_caches, pre_activations=pre_acts)


def encode_backward(
    grad_h: np.ndarray, cache: EncodeCache, params: EncoderParams
) -> np.ndarray:
    """Accumulate layer gradients; returns the node-feature gradient."""
    backward = _BACKWARD[params.backbone]
    dz = grad_h
    for li in range(len(params.layers) - 1, -1, -1):
        dh, grads = backward(dz, cache.layer_caches[li])
        layer = params.layers[li]
        for key, g in grads.items():
            layer[key].grad += g
        if li > 0:
            dz = relu_backward(dh, cache.pre_activations[li - 1])
        else:
            dz = dh
    return dz
