import math

import numpy as np
import pytest

from knnattn.backward import (
    BackwardConfig,
    approx_pos_prod,
    estimate_dk,
    estimate_dk_part_a,
    estimate_dk_part_b,
    estimate_dq,
    estimate_dv,
    estimate_gradients,
    estimate_product,
    estimate_row_dots,
    estimate_s_hat,
    row_sampler,
    walk_count,
)
from knnattn.core import DegenerateWeights, RngStream
from knnattn.oracle import AttentionProblem, exact_dk_parts, exact_dp, exact_gradients, softmax_matrix
from knnattn.sampling import SoftmaxRowSampler, build_cdf_tables, shift_bound


def bounded_problem(seed, n, d=3, B=1.0, causal=False):
    rng = np.random.default_rng(seed)
    Q, K, V, dO = (rng.uniform(-B, B, (n, d)) for _ in range(4))
    return AttentionProblem(Q, K, V, causal=causal), dO


def sampler(p, k=None):
    return row_sampler(p, BackwardConfig(k=k))


def test_walk_count_formula():
    assert walk_count(64, 3, 0.1) == math.ceil(max(12.0, math.log(64 * 64 * 3)) / 0.01)
    # n is floored at 2 so a single token still takes a walk per lg term
    assert walk_count(1, 1, 1.0) == 2


def test_pos_prod_zero_vector():
    p, _ = bounded_problem(0, 8)
    assert (approx_pos_prod(sampler(p), np.zeros(8), 0.1, RngStream(0)) == 0).all()


def test_pos_prod_rejects_negative():
    p, _ = bounded_problem(0, 8)
    with pytest.raises(DegenerateWeights):
        approx_pos_prod(sampler(p), -np.ones(8), 0.1, RngStream(0))


def test_pos_prod_uniform_rows():
    # every row of P is uniform, so P^T x spreads sum(x) evenly
    p = AttentionProblem(np.zeros((10, 2)), np.zeros((10, 2)), np.zeros((10, 1)))
    est = approx_pos_prod(sampler(p), np.arange(10.0), 0.05, RngStream(1), 200_000)
    assert np.allclose(est, 4.5, atol=0.1)
    assert est.sum() == pytest.approx(45.0)


def test_pos_prod_identity_like_rows():
    # diagonal scores dominate, so P is close to the identity
    Q = 50 * np.eye(6)
    p = AttentionProblem(Q, np.eye(6), np.zeros((6, 1)))
    x = np.array([1.0, 0.0, 2.0, 0.0, 3.0, 0.5])
    est = approx_pos_prod(sampler(p, k=2), x, 0.1, RngStream(2), 50_000)
    assert np.allclose(est, x, atol=0.05)


def test_pos_prod_hoeffding_violation_rate():
    # each entry is sum(x) times a mean of N indicators, so the error
    # exceeds eps*sum(x) with probability at most 2 exp(-2 N eps^2)
    p, _ = bounded_problem(3, 16)
    P = softmax_matrix(p)
    x = np.random.default_rng(3).random(16)
    exact = P.T @ x
    eps, N = 0.05, 600
    bad = 0
    runs = 300
    for r in range(runs):
        est = approx_pos_prod(sampler(p, 4), x, eps, RngStream(4, (r,)), N)
        bad += (np.abs(est - exact) > eps * x.sum()).sum()
    assert bad / (runs * 16) <= 2 * math.exp(-2 * N * eps**2)


def test_signed_product_shift_identity():
    # with the exact P^T 1 the shift cancels and the estimator stays unbiased
    p, _ = bounded_problem(5, 12)
    P = softmax_matrix(p)
    x = np.random.default_rng(5).uniform(-1, 1, 12)
    s = sampler(p, 3)
    runs = np.array([estimate_product(s, x, 0.1, P.T @ np.ones(12), RngStream(6, (r,)), 2000)[0] for r in range(200)])
    se = runs.std(axis=0, ddof=1) / np.sqrt(200)
    assert (np.abs(runs.mean(axis=0) - P.T @ x) < 4 * se + 1e-12).all()


def test_signed_product_budget_value():
    p, _ = bounded_problem(5, 4)
    x = np.array([1.0, -2.0, 0.5, 3.0])
    _, bound = estimate_product(sampler(p), x, 0.1, np.ones(4), RngStream(0))
    # eps <x,1> + 2 eps n M with M = 2
    assert bound == pytest.approx(0.1 * 2.5 + 2 * 0.1 * 4 * 2.0)


def test_s_hat_is_column_mass():
    p, _ = bounded_problem(7, 20)
    est = estimate_s_hat(sampler(p), 0.05, RngStream(7), 100_000)
    assert est.sum() == pytest.approx(20.0)
    assert np.abs(est - softmax_matrix(p).sum(axis=0)).max() < 0.05 * 20


def test_dv_within_budget():
    p, dO = bounded_problem(8, 32)
    est, budget = estimate_dv(p, dO, BackwardConfig(epsilon=0.1, seed=1))
    assert budget.within(est, exact_gradients(p, dO).dV).mean() >= 0.95
    assert budget.bound.shape == est.shape


def test_dv_column_permutation():
    p, dO = bounded_problem(9, 16)
    perm = np.array([2, 0, 1])
    q = AttentionProblem(p.Q, p.K, p.V[:, perm])
    _, a = estimate_dv(p, dO, BackwardConfig(seed=2))
    est, b = estimate_dv(q, dO[:, perm], BackwardConfig(seed=2))
    assert np.allclose(a.notes["per_column"][perm], b.notes["per_column"])
    assert b.within(est, exact_gradients(q, dO[:, perm]).dV).mean() >= 0.95


def test_dv_columns_are_independent():
    p, dO = bounded_problem(9, 16)
    other = dO.copy()
    other[:, 1] = -other[:, 1] + 0.5
    a, _ = estimate_dv(p, dO, BackwardConfig(seed=2))
    b, _ = estimate_dv(p, other, BackwardConfig(seed=2))
    assert np.array_equal(a[:, [0, 2]], b[:, [0, 2]])


def test_dv_zero_upstream():
    p, _ = bounded_problem(10, 8)
    est, budget = estimate_dv(p, np.zeros((8, 3)), BackwardConfig())
    assert (est == 0).all() and (budget.bound == 0).all()


def test_dq_within_budget():
    p, dO = bounded_problem(11, 16)
    est, budget = estimate_dq(p, dO, BackwardConfig(epsilon=0.2, seed=3))
    assert budget.within(est, exact_gradients(p, dO).dQ).mean() >= 0.9
    assert not budget.guarantee_void


def test_dq_constant_values_give_zero():
    # <dO_i, V_k> does not depend on k, so E1 = E2 * E3 exactly
    p, dO = bounded_problem(12, 10)
    q = AttentionProblem(p.Q, p.K, np.ones((10, 3)))
    est, _ = estimate_dq(q, dO, BackwardConfig(epsilon=0.3, seed=4))
    assert np.abs(est).max() < 1e-12


def test_dq_capped_run_is_void():
    p, dO = bounded_problem(12, 8)
    _, budget = estimate_dq(p, dO, BackwardConfig(epsilon=0.2, max_samples=100))
    assert budget.guarantee_void


def test_dk_parts_match_materialised():
    p, dO = bounded_problem(13, 16)
    cfg = BackwardConfig(epsilon=0.2, seed=5)
    A, B = exact_dk_parts(p, dO)
    s = sampler(p)
    s_hat = estimate_s_hat(s, cfg.epsilon, RngStream(5, (0,)), 20_000)
    tables = build_cdf_tables(p.Q, dO)
    Ahat, ba = estimate_dk_part_a(p, dO, tables, shift_bound(p.Q, dO, p.V), s_hat, cfg, s)
    Bhat, bb, void = estimate_dk_part_b(p, dO, s_hat, cfg, s)
    assert (np.abs(Ahat - A) <= ba).mean() >= 0.9
    assert (np.abs(Bhat - B) <= bb).mean() >= 0.9
    assert not void


def test_row_dots_close_to_exact():
    p, dO = bounded_problem(14, 12)
    P = softmax_matrix(p)
    exact = (exact_dp(dO, p.V) * P).sum(axis=1)
    est, _ = estimate_row_dots(p, dO, BackwardConfig(epsilon=0.2, seed=6))
    assert (np.abs(est - exact) * np.abs(p.Q).max(axis=1) <= 0.2).all()


def test_dk_within_budget_and_notes():
    p, dO = bounded_problem(15, 16)
    est, budget = estimate_dk(p, dO, BackwardConfig(epsilon=0.2, seed=7))
    assert budget.within(est, exact_gradients(p, dO).dK).mean() >= 0.85
    assert np.allclose(budget.notes["part_a"] - budget.notes["part_b"], est)
    assert budget.notes["shift"] >= 0


def test_dk_single_token_is_zero():
    p, dO = bounded_problem(16, 1)
    est, budget = estimate_dk(p, dO, BackwardConfig())
    assert (est == 0).all() and (budget.bound == 0).all()


def test_dk_causal_within_budget():
    p, dO = bounded_problem(17, 12, causal=True)
    est, budget = estimate_dk(p, dO, BackwardConfig(epsilon=0.2, seed=8))
    assert budget.within(est, exact_gradients(p, dO).dK).mean() >= 0.85


def test_relative_option_scales_budgets():
    p, dO = bounded_problem(18, 12)
    small = dO * 1e-3
    est, budget = estimate_dv(p, small, BackwardConfig(epsilon=0.1, relative=True, seed=9))
    base, bbase = estimate_dv(p, dO, BackwardConfig(epsilon=0.1, seed=9))
    scale = np.abs(dO).max() * 1e-3
    assert np.allclose(est, base / np.abs(dO).max() * scale)
    assert np.allclose(budget.bound, bbase.bound / np.abs(dO).max() * scale)


def test_estimate_gradients_selection_and_reuse():
    p, dO = bounded_problem(19, 10)
    exact = exact_gradients(p, dO)
    g = estimate_gradients(p, dO, BackwardConfig(epsilon=0.3), which=("dv",), exact=exact)
    assert g.dQ is exact.dQ and g.dK is exact.dK
    assert set(g.budgets) == {"dv", "wall_time"}
    h = estimate_gradients(p, dO, BackwardConfig(epsilon=0.3), which=("dv",))
    assert h.dQ is None


def test_shape_and_config_checks():
    p, dO = bounded_problem(20, 5)
    with pytest.raises(ValueError):
        estimate_dv(p, dO[:3], BackwardConfig())
    for kw in (dict(epsilon=0.0), dict(delta=1.5), dict(walks=0), dict(k=0)):
        with pytest.raises(ValueError):
            BackwardConfig(**kw)


def test_same_seed_same_gradients():
    p, dO = bounded_problem(21, 10)
    cfg = BackwardConfig(epsilon=0.3, seed=11)
    a = estimate_gradients(p, dO, cfg)
    b = estimate_gradients(p, dO, cfg)
    for x, y in ((a.dQ, b.dQ), (a.dK, b.dK), (a.dV, b.dV)):
        assert np.array_equal(x, y)


def test_sampler_reuse_matches_fresh():
    p, dO = bounded_problem(22, 10)
    cfg = BackwardConfig(epsilon=0.3, seed=12)
    s = SoftmaxRowSampler.from_problem(p.Q, p.K, math.isqrt(9) + 1)
    a, _ = estimate_dv(p, dO, cfg, s)
    b, _ = estimate_dv(p, dO, cfg)
    assert np.array_equal(a, b)
