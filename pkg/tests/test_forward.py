import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from knnattn.forward import ForwardConfig, choose_parameters, knn_attention, knn_attention_mom, knn_attention_weighted
from knnattn.oracle import AttentionProblem, exact_attention, prefold_scale


def uniform_problem(seed, n, d=8, B=1.0, causal=False):
    rng = np.random.default_rng(seed)
    Q, K, V = (rng.uniform(-B, B, (n, d)) for _ in range(3))
    return AttentionProblem(Q, prefold_scale(K), V, causal=causal)


@pytest.mark.parametrize("estimator", ["weighted", "mom"])
def test_constant_values_reproduced_exactly(estimator):
    p = uniform_problem(0, 40)
    p = AttentionProblem(p.Q, p.K, np.full((40, 3), 2.5))
    out = knn_attention(p, ForwardConfig(k=4, l=4, estimator=estimator, max_samples=2000)).O_hat
    assert (out == 2.5).all()


@pytest.mark.parametrize("estimator", ["weighted", "mom"])
def test_single_token(estimator):
    p = AttentionProblem([[0.3, 1.0]], [[2.0, -1.0]], [[4.0, 5.0]])
    out = knn_attention(p, ForwardConfig(k=1, l=1, estimator=estimator)).O_hat
    assert np.allclose(out, [[4.0, 5.0]])


@pytest.mark.parametrize("causal", [False, True])
@pytest.mark.parametrize("seed", range(3))
def test_k_equals_n_is_exact(seed, causal):
    p = uniform_problem(seed, 100, B=2.0, causal=causal)
    out = knn_attention_weighted(p, ForwardConfig(k=100, l=5, causal=causal)).O_hat
    assert np.abs(out - exact_attention(p)).max() < 1e-10


def test_weighted_error_shrinks_with_budget():
    p = uniform_problem(1, 512, B=1.0)
    exact = exact_attention(p)
    errs = []
    for k in (8, 64, 256):
        out = knn_attention_weighted(p, ForwardConfig(k=k, l=k, seed=2)).O_hat
        errs.append(np.abs(out - exact).mean())
    assert errs[0] > errs[1] > errs[2]


def test_mom_meets_additive_tolerance():
    p = uniform_problem(3, 64, d=2)
    res = knn_attention_mom(p, ForwardConfig(k=8, epsilon=0.2, delta=0.1, estimator="mom", seed=1))
    assert np.abs(res.O_hat - exact_attention(p)).max() <= 0.2 * np.abs(p.V).max()
    assert not res.diagnostics["guarantee_void"]


def test_mom_flags_capped_samples():
    p = uniform_problem(3, 16, d=2)
    res = knn_attention_mom(p, ForwardConfig(k=2, estimator="mom", max_samples=50))
    assert res.diagnostics["guarantee_void"]


def test_mom_causal_rows_ignore_future_keys():
    p = uniform_problem(4, 20, d=2, causal=True)
    q = AttentionProblem(p.Q, p.K, np.vstack([p.V[:10], 100 + p.V[10:]]), causal=True)
    cfg = ForwardConfig(k=3, estimator="mom", causal=True, max_samples=4000)
    a = knn_attention_mom(p, cfg).O_hat
    b = knn_attention_mom(q, cfg).O_hat
    assert np.array_equal(a[:10], b[:10])


def test_weighted_causal_rows_ignore_future_keys():
    p = uniform_problem(5, 30, causal=True)
    exact = exact_attention(p)
    out = knn_attention_weighted(p, ForwardConfig(k=30, causal=True)).O_hat
    assert np.abs(out - exact).max() < 1e-10


def test_choose_parameters_conditions_and_minimality():
    for n, eps, delta in ((10**6, 0.5, 0.1), (10**8, 1.0, 0.05), (5000, 2.0, 0.2)):
        k, l = choose_parameters(n, eps, delta)
        c1 = 8 * n * n * math.log(4 / delta) / eps**2
        c2 = 2 * n * math.log(2 / delta) / eps**2
        if k < n:
            assert l == k
            assert k**3 >= c1 and k * k >= c2
            assert not ((k - 1) ** 3 >= c1 and (k - 1) ** 2 >= c2)


def test_choose_parameters_clamps():
    assert choose_parameters(1, 0.1, 0.1) == (1, 0)
    k, l = choose_parameters(256, 0.3, 0.1)
    assert k == 256 and l == 0
    with pytest.raises(ValueError):
        choose_parameters(10, 0.0, 0.1)


def test_choose_parameters_monotone_in_epsilon():
    ks = [choose_parameters(10**9, eps, 0.1)[0] for eps in (2.0, 1.0, 0.5, 0.25)]
    assert ks == sorted(ks)


@pytest.mark.parametrize("kw", [dict(k=0), dict(l=-1), dict(epsilon=0.0), dict(delta=1.0), dict(estimator="x"), dict(index="x")])
def test_config_validation(kw):
    args = dict(k=2)
    args.update(kw)
    with pytest.raises(ValueError):
        ForwardConfig(**args)


def test_weighted_deterministic_per_seed():
    p = uniform_problem(6, 128)
    a = knn_attention_weighted(p, ForwardConfig(k=8, l=8, seed=3)).O_hat
    b = knn_attention_weighted(p, ForwardConfig(k=8, l=8, seed=3)).O_hat
    assert np.array_equal(a, b)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**31), n=st.integers(1, 60), k=st.integers(1, 20), l=st.integers(0, 20), causal=st.booleans())
def test_weighted_output_in_value_range(seed, n, k, l, causal):
    p = uniform_problem(seed, n, d=3, B=3.0, causal=causal)
    out = knn_attention_weighted(p, ForwardConfig(k=k, l=l, seed=seed, causal=causal)).O_hat
    assert (out >= p.V.min(axis=0)).all() and (out <= p.V.max(axis=0)).all()


def test_lsh_backend_runs():
    p = uniform_problem(7, 256)
    out = knn_attention(p, ForwardConfig(k=32, l=32, index="lsh")).O_hat
    assert np.abs(out - exact_attention(p)).mean() < 0.2
