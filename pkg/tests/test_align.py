"""Cross-attention, entropic transport, fusion, and pooling oracles."""

from __future__ import annotations

import json
import pathlib

import numpy as np
import pytest

from graphmatch.align import (
    AlignParams,
    OTConfig,
    TransportProblem,
    align_pair,
    align_pair_backward,
    cosine_cost,
    cross_attend,
    ot_fuse,
    pool_embed,
    residual_norm,
    sinkhorn,
    uniform_marginals,
)
from graphmatch.numcore import ParamTensor, finite_diff_check, layer_norm_rows

DATA_DIR = pathlib.Path(__file__).parent / "data"


def _direct_sinkhorn(cost, mu, nu, eps, iters):
    """Probability-domain scaling oracle (same update order as the solver)."""
    k = np.exp(-cost / eps)
    v = np.ones_like(nu)
    for _ in range(iters):
        u = mu / (k @ v)
        v = nu / (k.T @ u)
    return u[:, None] * k * v[None, :]


def _regularized_objective(plan, cost, eps):
    """<T, C> - eps * H(T) with H(T) = -sum T (log T - 1), 0 log 0 = 0."""
    with np.errstate(divide="ignore", invalid="ignore"):
        log_t = np.where(plan > 0, np.log(np.where(plan > 0, plan, 1.0)), 0.0)
    entropy = -np.sum(plan * (log_t - 1.0))
    return float(np.sum(plan * cost) - eps * entropy)


def _params(rng: np.random.Generator, dim: int, heads: int = 2) -> AlignParams:
    return AlignParams.init(rng, dim, heads)


# ---------------------------------------------------------------------------
# Sinkhorn
# ---------------------------------------------------------------------------


def test_sinkhorn_one_by_one_exact():
    plan = sinkhorn(TransportProblem(np.array([[0.7]]), np.array([1.0]), np.array([1.0]), 1.0, 5))
    np.testing.assert_allclose(plan.plan, [[1.0]], atol=1e-15)
    assert plan.marginal_err <= 1e-12
    assert plan.transport_cost == pytest.approx(0.7, abs=1e-12)


def test_sinkhorn_two_by_two_closed_form():
    # symmetric fixed point: T = u^2 K with K = exp(-C), u^2 = 0.5 / (1 + e^-1)
    cost = np.array([[0.0, 1.0], [1.0, 0.0]])
    marg = np.array([0.5, 0.5])
    plan = sinkhorn(TransportProblem(cost, marg, marg, 1.0, 80))
    e = np.exp(-1.0)
    u2 = 0.5 / (1.0 + e)
    np.testing.assert_allclose(plan.plan, u2 * np.array([[1.0, e], [e, 1.0]]), atol=1e-5)


def test_sinkhorn_large_problem_converges_and_matches_direct_oracle():
    rng = np.random.default_rng(0)
    cost = rng.uniform(0.0, 2.0, size=(50, 60))
    mu, nu = uniform_marginals(50), uniform_marginals(60)
    plan = sinkhorn(TransportProblem(cost, mu, nu, 0.1, 80))
    assert plan.marginal_err < 1e-6
    assert plan.plan.min() >= 0.0
    oracle = _direct_sinkhorn(cost, mu, nu, 0.1, 80)
    np.testing.assert_allclose(plan.plan, oracle, atol=1e-10)


def test_sinkhorn_constant_cost_shift_cancels():
    rng = np.random.default_rng(1)
    cost = rng.uniform(0.0, 2.0, size=(6, 4))
    mu, nu = uniform_marginals(6), uniform_marginals(4)
    base = sinkhorn(TransportProblem(cost, mu, nu, 0.2, 200)).plan
    shifted = sinkhorn(TransportProblem(cost + 0.83, mu, nu, 0.2, 200)).plan
    assert np.max(np.abs(base - shifted)) <= 1e-9


def test_sinkhorn_permutation_of_rows_permutes_plan():
    rng = np.random.default_rng(2)
    cost = rng.uniform(0.0, 2.0, size=(5, 5))
    mu = nu = uniform_marginals(5)
    perm = rng.permutation(5)
    base = sinkhorn(TransportProblem(cost, mu, nu, 0.1, 120)).plan
    permuted = sinkhorn(TransportProblem(cost[perm], mu, nu, 0.1, 120)).plan
    np.testing.assert_allclose(permuted, base[perm], atol=1e-12)


def test_sinkhorn_argument_errors():
    c = np.array([[0.0, 1.0], [1.0, 0.0]])
    half = np.array([0.5, 0.5])
    with pytest.raises(ValueError):
        sinkhorn(TransportProblem(c, half, half, 0.0, 10))
    with pytest.raises(ValueError):
        sinkhorn(TransportProblem(c, np.array([0.5, 0.5, 0.0]), half, 1.0, 10))
    with pytest.raises(ValueError):
        sinkhorn(TransportProblem(c, np.array([0.9, 0.9]), half, 1.0, 10))
    with pytest.raises(ValueError):
        sinkhorn(TransportProblem(c, np.array([1.5, -0.5]), half, 1.0, 10))


def test_plan_beats_random_feasible_plans_uniform_marginals():
    # Birkhoff sampling: Dirichlet mixtures of permutation matrices / n
    rng = np.random.default_rng(3)
    import itertools

    for n in (2, 3):
        perms = np.array(
            [np.eye(n)[list(p)] for p in itertools.permutations(range(n))]
        )
        for _ in range(10):
            cost = rng.uniform(0.0, 2.0, size=(n, n))
            eps = float(rng.uniform(0.05, 1.0))
            marg = uniform_marginals(n)
            # run to the fixed point: optimality is a property of the
            # converged plan, not of any particular iteration budget
            plan = sinkhorn(TransportProblem(cost, marg, marg, eps, 5000)).plan
            solver_obj = _regularized_objective(plan, cost, eps)
            weights = rng.dirichlet(np.ones(len(perms)), size=2000)
            candidates = (weights @ perms.reshape(len(perms), -1)).reshape(-1, n, n) / n
            objs = [_regularized_objective(t, cost, eps) for t in candidates]
            assert solver_obj <= min(objs) + 1e-9


def test_plan_beats_random_feasible_plans_nonuniform_two_by_two():
    # 2x2 transport polytope is the segment T(t) = [[t, m-t], [n-t, 1-m-n+t]]
    rng = np.random.default_rng(4)
    for _ in range(10):
        m, n = rng.uniform(0.2, 0.8, size=2)
        mu, nu = np.array([m, 1 - m]), np.array([n, 1 - n])
        cost = rng.uniform(0.0, 2.0, size=(2, 2))
        eps = float(rng.uniform(0.05, 1.0))
        plan = sinkhorn(TransportProblem(cost, mu, nu, eps, 5000)).plan
        solver_obj = _regularized_objective(plan, cost, eps)
        lo, hi = max(0.0, m + n - 1.0), min(m, n)
        ts = rng.uniform(lo, hi, size=2000)
        objs = [
            _regularized_objective(
                np.array([[t, m - t], [n - t, 1 - m - n + t]]), cost, eps
            )
            for t in ts
        ]
        assert solver_obj <= min(objs) + 1e-9


# ---------------------------------------------------------------------------
# Cost matrix
# ---------------------------------------------------------------------------


def test_cosine_cost_identical_antiparallel_orthogonal():
    h_m = np.array([[1.0, 0.0], [0.0, 2.0]])
    h_n = np.array([[2.0, 0.0], [-1.0, 0.0], [0.0, 0.0]])
    cost = cosine_cost(h_m, h_n)
    assert cost[0, 0] == pytest.approx(0.0, abs=1e-12)  # identical direction
    assert cost[0, 1] == pytest.approx(2.0, abs=1e-12)  # antiparallel
    assert cost[1, 0] == pytest.approx(1.0, abs=1e-12)  # orthogonal
    assert cost[0, 2] == pytest.approx(1.0, abs=1e-12)  # zero row -> cost 1


def test_cosine_cost_bounds_random():
    rng = np.random.default_rng(5)
    cost = cosine_cost(rng.standard_normal((20, 6)), rng.standard_normal((15, 6)))
    assert cost.min() >= 0.0 and cost.max() <= 2.0


def test_cosine_cost_width_mismatch():
    with pytest.raises(ValueError):
        cosine_cost(np.zeros((2, 3)), np.zeros((2, 4)))


# ---------------------------------------------------------------------------
# Cross-attention, residual norm, fusion, pooling
# ---------------------------------------------------------------------------


def test_cross_attend_single_key_attends_fully():
    rng = np.random.default_rng(6)
    params = _params(rng, 4, heads=2)
    h_m = rng.standard_normal((5, 4))
    h_n = rng.standard_normal((1, 4))
    out = cross_attend(h_m, h_n, params)
    expected = np.tile((h_n @ params.wv.value) @ params.wo.value, (5, 1))
    np.testing.assert_allclose(out, expected, atol=1e-12)


def test_cross_attend_zero_values_zero_output():
    rng = np.random.default_rng(7)
    params = _params(rng, 4, heads=2)
    params.wv.value[:] = 0.0
    out = cross_attend(rng.standard_normal((3, 4)), rng.standard_normal((4, 4)), params)
    assert np.all(out == 0.0)


def test_cross_attend_scalar_case():
    params = AlignParams(
        wq=ParamTensor("wq", np.array([[1.0]])),
        wk=ParamTensor("wk", np.array([[1.0]])),
        wv=ParamTensor("wv", np.array([[1.0]])),
        wo=ParamTensor("wo", np.array([[1.0]])),
        gamma=ParamTensor("g", np.ones(1)),
        beta=ParamTensor("b", np.zeros(1)),
        heads=1,
    )
    out = cross_attend(np.array([[1.0]]), np.array([[2.0]]), params)
    np.testing.assert_allclose(out, [[2.0]], atol=1e-15)


def test_residual_norm_matches_kernel_composition():
    rng = np.random.default_rng(8)
    h = rng.standard_normal((3, 4))
    t = rng.standard_normal((3, 4))
    gamma, beta = rng.standard_normal(4), rng.standard_normal(4)
    np.testing.assert_array_equal(
        residual_norm(h, t, gamma, beta), layer_norm_rows(h + t, gamma, beta)
    )
    # zero enhancement reduces to plain row normalization of h
    np.testing.assert_array_equal(
        residual_norm(h, np.zeros_like(h), np.ones(4), np.zeros(4)),
        layer_norm_rows(h, np.ones(4), np.zeros(4)),
    )
    const = np.tile([[2.5]], (2, 4))
    np.testing.assert_allclose(
        residual_norm(const, np.zeros_like(const), np.ones(4), beta[:4]),
        np.tile(beta[:4], (2, 1)),
        atol=1e-12,
    )


def test_ot_fuse_zero_blend_is_plain_layer_norm():
    rng = np.random.default_rng(9)
    hm, hn = rng.standard_normal((4, 3)), rng.standard_normal((5, 3))
    plan = np.full((4, 5), 1 / 20)
    gamma, beta = np.ones(3), np.zeros(3)
    out = ot_fuse(hm, hn, plan, uniform_marginals(4), 0.0, gamma, beta)
    np.testing.assert_array_equal(out, layer_norm_rows(hm, gamma, beta))


def test_ot_fuse_single_node_barycenter_is_other_row():
    hm = np.array([[1.0, 2.0, 3.0]])
    hn = np.array([[-1.0, 0.5, 2.0]])
    gamma, beta = np.ones(3), np.zeros(3)
    out = ot_fuse(hm, hn, np.array([[1.0]]), np.array([1.0]), 1.0, gamma, beta)
    np.testing.assert_allclose(out, layer_norm_rows(hm + hn, gamma, beta), atol=1e-12)


def test_ot_fuse_two_by_two_closed_form_barycenter():
    e = np.exp(-1.0)
    u2 = 0.5 / (1.0 + e)
    plan = u2 * np.array([[1.0, e], [e, 1.0]])
    hn = np.array([[2.0, 0.0], [0.0, 4.0]])
    mu = np.array([0.5, 0.5])
    hm = np.zeros((2, 2))
    gamma, beta = np.ones(2), np.zeros(2)
    out = ot_fuse(hm, hn, plan, mu, 1.0, gamma, beta)
    bary = (plan @ hn) / mu[:, None]  # hand product against the closed form
    np.testing.assert_allclose(out, layer_norm_rows(bary, gamma, beta), atol=1e-6)


def test_pool_embed_examples():
    z = pool_embed(np.array([[1.0, 0.0], [0.0, 1.0]]))
    np.testing.assert_allclose(z, [0.70711, 0.70711], atol=1e-5)
    row = np.array([[3.0, 4.0]])
    np.testing.assert_allclose(pool_embed(row), [0.6, 0.8], atol=1e-12)
    rng = np.random.default_rng(10)
    h = rng.standard_normal((6, 4))
    # permutation changes float summation order by at most a few ulps
    assert np.max(np.abs(pool_embed(h) - pool_embed(h[rng.permutation(6)]))) <= 1e-12


# ---------------------------------------------------------------------------
# align_pair
# ---------------------------------------------------------------------------


def test_align_pair_ablation_off_severs_cross_modal_paths():
    rng = np.random.default_rng(11)
    params = _params(rng, 6, heads=2)
    cfg = OTConfig(epsilon=0.1, iterations=40)
    h_m = rng.standard_normal((4, 6))
    res1, _ = align_pair(h_m, rng.standard_normal((5, 6)), params, cfg, ca_on=False, ot_on=False)
    res2, _ = align_pair(h_m, rng.standard_normal((7, 6)), params, cfg, ca_on=False, ot_on=False)
    expected = pool_embed(
        layer_norm_rows(h_m, params.gamma.value, params.beta.value)
    )
    np.testing.assert_array_equal(res1.z_m, expected)
    np.testing.assert_array_equal(res1.z_m, res2.z_m)


def test_align_pair_identical_inputs_identical_embeddings():
    rng = np.random.default_rng(12)
    params = _params(rng, 6, heads=2)
    h = rng.standard_normal((5, 6))
    res, _ = align_pair(h, h.copy(), params, OTConfig(iterations=40), True, True)
    np.testing.assert_array_equal(res.z_m, res.z_n)


def test_align_pair_node_permutation_invariance():
    rng = np.random.default_rng(13)
    params = _params(rng, 6, heads=2)
    cfg = OTConfig(epsilon=0.1, iterations=80)
    h_m = rng.standard_normal((5, 6))
    h_n = rng.standard_normal((4, 6))
    base, _ = align_pair(h_m, h_n, params, cfg)
    perm = rng.permutation(5)
    permuted, _ = align_pair(h_m[perm], h_n, params, cfg)
    assert np.max(np.abs(permuted.z_m - base.z_m)) <= 1e-10
    assert np.max(np.abs(permuted.z_n - base.z_n)) <= 1e-10
    np.testing.assert_allclose(permuted.plan.plan, base.plan.plan[perm], atol=1e-12)


def test_align_pair_golden_pair():
    rng = np.random.default_rng(2024)
    params = _params(rng, 4, heads=2)
    h_m = rng.standard_normal((4, 4))
    h_n = rng.standard_normal((3, 4))
    res, _ = align_pair(h_m, h_n, params, OTConfig(epsilon=0.1, iterations=80))
    golden = json.loads((DATA_DIR / "align_golden.json").read_text())
    np.testing.assert_allclose(res.z_m, golden["z_m"], rtol=1e-12, atol=1e-14)
    np.testing.assert_allclose(res.z_n, golden["z_n"], rtol=1e-12, atol=1e-14)
    np.testing.assert_allclose(res.plan.plan, golden["plan"], rtol=1e-12, atol=1e-14)


@pytest.mark.parametrize(
    "ca_on,ot_on,bidirectional",
    [(True, True, True), (True, False, True), (False, True, True),
     (False, False, True), (True, True, False)],
)
def test_align_pair_gradients_match_finite_differences(ca_on, ot_on, bidirectional):
    rng = np.random.default_rng(14)
    dim = 6
    params = _params(rng, dim, heads=2)
    cfg = OTConfig(epsilon=0.2, iterations=60)
    x_m = ParamTensor("x_m", rng.standard_normal((int(rng.integers(5, 11)), dim)))
    x_n = ParamTensor("x_n", rng.standard_normal((int(rng.integers(5, 11)), dim)))
    w_m = rng.standard_normal(dim)
    w_n = rng.standard_normal(dim)
    w_t = 0.7

    res0, cache = align_pair(x_m.value, x_n.value, params, cfg, ca_on, ot_on, bidirectional)
    frozen = (res0.plan, res0.plan_back)

    def objective() -> float:
        res, _ = align_pair(
            x_m.value, x_n.value, params, cfg, ca_on, ot_on, bidirectional,
            frozen_plans=frozen,
        )
        return float(w_m @ res.z_m + w_n @ res.z_n + w_t * res.transport_cost)

    tensors = params.tensors() + [x_m, x_n]
    for t in tensors:
        t.zero_grad()
    dh_m, dh_n = align_pair_backward(w_m, w_n, cache, params, grad_transport_cost=w_t)
    x_m.grad += dh_m
    x_n.grad += dh_n
    assert finite_diff_check(objective, tensors) <= 1e-4
