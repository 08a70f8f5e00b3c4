"""GNN backbone layers: hand oracles, equivariance, and gradient checks."""

from __future__ import annotations

import numpy as np
import pytest

from graphmatch.encoders import (
    BACKBONES,
    EncoderConfig,
    EncoderParams,
    adjacency_matrix,
    encode,
    encode_backward,
    encode_forward,
    gat_layer,
    gcn_layer,
    graph_transformer_layer,
    sage_layer,
)
from graphmatch.graphs import ModalGraph
from graphmatch.numcore import ParamTensor, finite_diff_check

LEAKY_SLOPE = 0.2


def _graph(features: np.ndarray, edges) -> ModalGraph:
    edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    return ModalGraph(
        graph_id="g",
        subject_id="s",
        modality="face",
        node_features=features,
        edges=edges,
        edge_dist=np.full(len(edges), 0.5),
    )


def _random_graph(rng: np.random.Generator, n: int, d0: int) -> ModalGraph:
    feats = rng.standard_normal((n, d0))
    pairs = [(i, j) for i in range(n) for j in range(i + 1, n) if rng.random() < 0.5]
    if not pairs:
        pairs = [(0, 1)]
    return _graph(feats, pairs)


def _permuted(g: ModalGraph, perm: np.ndarray) -> ModalGraph:
    # perm maps old index -> new index
    edges = perm[g.edges]
    lo = np.minimum(edges[:, 0], edges[:, 1])
    hi = np.maximum(edges[:, 0], edges[:, 1])
    order = np.lexsort((hi, lo))
    inv = np.empty_like(perm)
    inv[perm] = np.arange(len(perm))
    return ModalGraph(
        graph_id=g.graph_id,
        subject_id=g.subject_id,
        modality=g.modality,
        node_features=g.node_features[inv],
        edges=np.column_stack([lo, hi])[order],
        edge_dist=g.edge_dist[order],
    )


# ---------------------------------------------------------------------------
# GCN
# ---------------------------------------------------------------------------


def test_gcn_two_node_hand_product():
    # A_hat = all-ones 2x2, D_hat = diag(2, 2) -> propagation = 0.5 everywhere
    g = _graph(np.array([[1.0], [0.0]]), [(0, 1)])
    out = gcn_layer(g.node_features, g, np.array([[1.0]]))
    np.testing.assert_allclose(out, [[0.5], [0.5]], atol=1e-15)


def test_gcn_isolated_node_identity():
    g = _graph(np.array([[0.3, 0.7]]), np.empty((0, 2)))
    out = gcn_layer(g.node_features, g, np.eye(2))
    np.testing.assert_allclose(out, g.node_features, atol=1e-15)


def test_gcn_zero_weights():
    g = _graph(np.random.default_rng(0).random((4, 3)), [(0, 1), (2, 3)])
    out = gcn_layer(g.node_features, g, np.zeros((3, 2)))
    assert np.all(out == 0.0)


def test_gcn_row_bound_with_identity_weights():
    rng = np.random.default_rng(1)
    g = _random_graph(rng, 8, 4)
    g.node_features = rng.random((8, 4))  # features in [0, 1]
    out = gcn_layer(g.node_features, g, np.eye(4))
    deg = adjacency_matrix(8, g.edges).sum(axis=1).max()
    assert np.all(out >= 0.0) and np.all(out <= 1.0 + deg)


# ---------------------------------------------------------------------------
# GraphSAGE
# ---------------------------------------------------------------------------


def test_sage_isolated_node_self_term_only():
    g = _graph(np.array([[2.0, -1.0]]), np.empty((0, 2)))
    w_self = np.array([[1.0, 0.0], [0.0, 2.0]])
    out = sage_layer(g.node_features, g, w_self, np.full((2, 2), 9.0))
    np.testing.assert_allclose(out, g.node_features @ w_self, atol=1e-15)


def test_sage_identical_neighbors_half_identity():
    feats = np.tile([[1.5, -0.5]], (3, 1))
    g = _graph(feats, [(0, 1), (1, 2), (0, 2)])
    out = sage_layer(feats, g, np.eye(2) / 2, np.eye(2) / 2)
    np.testing.assert_allclose(out, feats, atol=1e-15)


def test_sage_two_node_scalar_oracle():
    g = _graph(np.array([[1.0], [3.0]]), [(0, 1)])
    out = sage_layer(g.node_features, g, np.array([[1.0]]), np.array([[1.0]]))
    np.testing.assert_allclose(out, [[4.0], [4.0]], atol=1e-15)


# ---------------------------------------------------------------------------
# GAT
# ---------------------------------------------------------------------------


def test_gat_isolated_node_projects_features():
    rng = np.random.default_rng(2)
    g = _graph(rng.standard_normal((1, 3)), np.empty((0, 2)))
    w = rng.standard_normal((3, 4))
    a = rng.standard_normal((2, 4))  # 2 heads, d_head 2
    out = gat_layer(g.node_features, g, w, a, heads=2)
    np.testing.assert_allclose(out, g.node_features @ w, atol=1e-12)


def test_gat_identical_features_uniform_attention():
    feats = np.tile([[0.4, -1.2]], (3, 1))
    rng = np.random.default_rng(3)
    g = _graph(feats, [(0, 1), (1, 2)])
    w = rng.standard_normal((2, 2))
    a = rng.standard_normal((1, 4))
    out = gat_layer(feats, g, w, a, heads=1)
    # uniform alpha over identical projected rows reproduces the projection
    np.testing.assert_allclose(out, feats @ w, atol=1e-12)


def test_gat_three_node_path_hand_evaluation():
    # 1-dim single head evaluated by an explicit scalar re-implementation
    feats = np.array([[0.5], [-0.25], [1.0]])
    g = _graph(feats, [(0, 1), (1, 2)])
    w = np.array([[0.8]])
    a = np.array([[0.3, -0.7]])  # [a_src | a_dst]
    out = gat_layer(feats, g, w, a, heads=1)

    hw = feats @ w
    nbhd = {0: [0, 1], 1: [0, 1, 2], 2: [1, 2]}
    expected = np.zeros((3, 1))
    for i, js in nbhd.items():
        raw = np.array([a[0, 0] * hw[i, 0] + a[0, 1] * hw[j, 0] for j in js])
        scored = np.where(raw > 0, raw, LEAKY_SLOPE * raw)
        alpha = np.exp(scored - scored.max())
        alpha /= alpha.sum()
        expected[i, 0] = sum(al * hw[j, 0] for al, j in zip(alpha, js))
    np.testing.assert_allclose(out, expected, atol=1e-10)


def test_gat_outputs_stay_in_projected_convex_hull():
    # row-stochastic attention keeps every output row inside the per-head
    # convex hull of the projected neighborhood rows
    rng = np.random.default_rng(4)
    g = _random_graph(rng, 7, 3)
    w = rng.standard_normal((3, 4))
    a = rng.standard_normal((2, 4))
    out = gat_layer(g.node_features, g, w, a, heads=2)
    hw = g.node_features @ w
    mask = adjacency_matrix(7, g.edges) | np.eye(7, dtype=bool)
    for i in range(7):
        rows = hw[mask[i]]
        assert np.all(out[i] >= rows.min(axis=0) - 1e-12)
        assert np.all(out[i] <= rows.max(axis=0) + 1e-12)


# ---------------------------------------------------------------------------
# GraphTransformer
# ---------------------------------------------------------------------------


def test_gt_isolated_node_residual_form():
    rng = np.random.default_rng(5)
    x = rng.standard_normal((1, 4))
    g = _graph(x, np.empty((0, 2)))
    wq, wk, wv, wo = (rng.standard_normal((4, 4)) for _ in range(4))
    out = graph_transformer_layer(x, g, wq, wk, wv, wo, heads=2)
    np.testing.assert_allclose(out, x + (x @ wv) @ wo, atol=1e-12)


def test_gt_zero_values_residual_identity():
    rng = np.random.default_rng(6)
    g = _random_graph(rng, 5, 4)
    wq, wk, wo = (rng.standard_normal((4, 4)) for _ in range(3))
    out = graph_transformer_layer(
        g.node_features, g, wq, wk, np.zeros((4, 4)), wo, heads=1
    )
    np.testing.assert_allclose(out, g.node_features, atol=1e-15)


def test_gt_two_node_scalar_hand_evaluation():
    x = np.array([[0.9], [-0.4]])
    g = _graph(x, [(0, 1)])
    wq, wk, wv, wo = [np.array([[v]]) for v in (0.7, -1.1, 0.5, 1.3)]
    out = graph_transformer_layer(x, g, wq, wk, wv, wo, heads=1)

    q, k, v = x * 0.7, x * -1.1, x * 0.5
    expected = np.zeros((2, 1))
    for i in range(2):
        scores = np.array([q[i, 0] * k[j, 0] for j in range(2)])  # sqrt(d_head)=1
        alpha = np.exp(scores - scores.max())
        alpha /= alpha.sum()
        att = alpha[0] * v[0, 0] + alpha[1] * v[1, 0]
        expected[i, 0] = x[i, 0] + att * 1.3
    np.testing.assert_allclose(out, expected, atol=1e-10)


def test_gt_no_residual_when_widths_differ():
    rng = np.random.default_rng(7)
    x = rng.standard_normal((1, 3))
    g = _graph(x, np.empty((0, 2)))
    wq, wk, wv = (rng.standard_normal((3, 2)) for _ in range(3))
    wo = rng.standard_normal((2, 2))
    out = graph_transformer_layer(x, g, wq, wk, wv, wo, heads=1)
    np.testing.assert_allclose(out, (x @ wv) @ wo, atol=1e-12)


def test_gt_edge_bias_shifts_scores():
    x = np.array([[1.0], [2.0]])
    g = _graph(x, [(0, 1)])  # edge_dist = 0.5 from the helper
    wq, wk, wv, wo = [np.array([[v]]) for v in (1.0, 1.0, 1.0, 1.0)]
    strength = 3.0
    out = graph_transformer_layer(
        x, g, wq, wk, wv, wo, heads=1, edge_bias=True, edge_bias_strength=strength
    )
    expected = np.zeros((2, 1))
    for i in range(2):
        scores = np.array(
            [x[i, 0] * x[j, 0] - (strength * 0.5 if j != i else 0.0) for j in range(2)]
        )
        alpha = np.exp(scores - scores.max())
        alpha /= alpha.sum()
        expected[i, 0] = x[i, 0] + alpha @ x[:, 0]
    np.testing.assert_allclose(out, expected, atol=1e-10)


# ---------------------------------------------------------------------------
# Stacked encoder
# ---------------------------------------------------------------------------


def test_encode_single_node_all_backbones():
    rng = np.random.default_rng(8)
    g = _graph(rng.random((1, 5)), np.empty((0, 2)))
    for backbone in BACKBONES:
        cfg = EncoderConfig(backbone=backbone, layers=2, hidden_dim=8, out_dim=8, heads=2)
        params = EncoderParams.init(np.random.default_rng(0), cfg, in_dim=5, name_prefix="e")
        out = encode(g, params, cfg)
        assert out.shape == (1, 8) and np.all(np.isfinite(out))


def test_encode_permutation_equivariance_all_backbones():
    rng = np.random.default_rng(9)
    for backbone in BACKBONES:
        cfg = EncoderConfig(backbone=backbone, layers=2, hidden_dim=8, out_dim=8, heads=2)
        params = EncoderParams.init(np.random.default_rng(1), cfg, in_dim=4, name_prefix="e")
        for _ in range(5):
            g = _random_graph(rng, int(rng.integers(3, 9)), 4)
            perm = rng.permutation(g.n_nodes)
            base = encode(g, params, cfg)
            permuted = encode(_permuted(g, perm), params, cfg)
            assert np.max(np.abs(permuted[perm] - base)) <= 1e-10, backbone


def test_encode_width_mismatch_rejected():
    cfg = EncoderConfig(backbone="gcn", layers=1, out_dim=4)
    params = EncoderParams.init(np.random.default_rng(0), cfg, in_dim=5, name_prefix="e")
    g = _graph(np.zeros((3, 4)), [(0, 1)])
    with pytest.raises(ValueError):
        encode(g, params, cfg)


def test_encode_backbone_mismatch_rejected():
    cfg_gcn = EncoderConfig(backbone="gcn", layers=1, out_dim=4)
    params = EncoderParams.init(np.random.default_rng(0), cfg_gcn, in_dim=5, name_prefix="e")
    g = _graph(np.zeros((3, 5)), [(0, 1)])
    with pytest.raises(ValueError):
        encode(g, params, EncoderConfig(backbone="sage", layers=1, out_dim=4))


def test_encoder_config_validation():
    with pytest.raises(ValueError):
        EncoderConfig(backbone="mlp").validate()
    with pytest.raises(ValueError):
        EncoderConfig(layers=0).validate()
    with pytest.raises(ValueError):
        EncoderConfig(backbone="gat", hidden_dim=6, out_dim=6, heads=4).validate()


# ---------------------------------------------------------------------------
# Gradient checks
# ---------------------------------------------------------------------------


def _check_encode_gradients(backbone: str, seed: int) -> float:
    rng = np.random.default_rng(seed)
    n = int(rng.integers(5, 11))
    cfg = EncoderConfig(backbone=backbone, layers=2, hidden_dim=6, out_dim=6, heads=2)
    params = EncoderParams.init(rng, cfg, in_dim=4, name_prefix="e")
    x = ParamTensor("x", rng.standard_normal((n, 4)))
    g = _random_graph(rng, n, 4)
    g.node_features = x.value  # shared storage: perturbations reach encode
    weights = rng.standard_normal((n, 6))
    tensors = params.tensors() + [x]

    def objective() -> float:
        return float(np.sum(weights * encode(g, params, cfg)))

    for t in tensors:
        t.zero_grad()
    out, cache = encode_forward(g, params, cfg)
    x.grad += encode_backward(weights, cache, params)
    return finite_diff_check(objective, tensors)


@pytest.mark.parametrize("backbone", sorted(BACKBONES))
def test_encode_gradients_match_finite_differences(backbone):
    for seed in (0, 1, 2):
        assert _check_encode_gradients(backbone, seed) <= 1e-4
