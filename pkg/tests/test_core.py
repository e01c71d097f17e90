import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from knnattn.core import (
    EULER_GAMMA,
    GumbelParams,
    InsufficientPopulation,
    MoMConfig,
    RngStream,
    as_generator,
    binomial_sample,
    complement_rank_to_index,
    distinct_ranks,
    gumbel_from_uniform,
    gumbel_sample,
    gumbel_sample_conditional_above,
    gumbel_tail_probability,
    median_of_means,
    open_uniform,
    sample_k_distinct_excluding,
)


def test_gumbel_inverse_cdf_points():
    assert gumbel_from_uniform(math.exp(-1.0)) == 0.0
    assert gumbel_from_uniform(math.exp(-math.exp(-2.0))) == pytest.approx(2.0, abs=1e-12)


def test_gumbel_location_scale():
    u = np.array([0.1, 0.5, 0.9])
    assert np.allclose(gumbel_from_uniform(u, 1.5, 2.0), 1.5 + 2.0 * gumbel_from_uniform(u))


def test_gumbel_mean_is_euler_gamma():
    x = gumbel_sample(RngStream(1), size=100_000)
    assert abs(x.mean() - EULER_GAMMA) < 0.02


def test_gumbel_matches_scipy_distribution():
    x = gumbel_sample(RngStream(2), GumbelParams(0.5, 2.0), size=50_000)
    assert stats.kstest(x, stats.gumbel_r(loc=0.5, scale=2.0).cdf).pvalue > 1e-3


def test_gumbel_params_validate():
    with pytest.raises(ValueError):
        GumbelParams(0.0, 0.0)


def test_open_uniform_never_zero():
    class ZeroFirst:
        """Generator stand-in returning zeros on the first call."""

        def __init__(self):
            self.calls = 0
            self.gen = np.random.default_rng(0)

        def random(self, size=None):
            self.calls += 1
            if self.calls == 1:
                return np.zeros(size) if size is not None else 0.0
            return self.gen.random(size)

    assert (open_uniform(ZeroFirst(), 5) > 0).all()
    assert open_uniform(ZeroFirst()) > 0


def test_conditional_gumbel_respects_cutoff():
    x = gumbel_sample_conditional_above(RngStream(3), 3.0, size=10_000)
    assert (x > 3.0).all()


def test_conditional_gumbel_large_cutoff_stays_above():
    x = gumbel_sample_conditional_above(RngStream(3), 60.0, size=1000)
    assert (x > 60.0).all() and np.isfinite(x).all()


def test_conditional_gumbel_unconditional_sentinel():
    x = gumbel_sample_conditional_above(RngStream(4), -np.inf, size=50_000)
    assert stats.kstest(x, stats.gumbel_r.cdf).statistic < 0.01


def test_conditional_gumbel_ks_at_zero():
    # analytic conditional CDF (F(x) - F(0)) / (1 - F(0)) with F(x) = exp(-exp(-x))
    F0 = math.exp(-1.0)

    def cdf(x):
        return np.clip((np.exp(-np.exp(-x)) - F0) / (1.0 - F0), 0.0, 1.0)

    x = gumbel_sample_conditional_above(RngStream(5), 0.0, size=100_000)
    assert stats.kstest(x, cdf).statistic < 0.01


def test_tail_probability():
    assert gumbel_tail_probability(0.0) == pytest.approx(1 - math.exp(-1))
    assert gumbel_tail_probability(-np.inf) == 1.0
    assert gumbel_tail_probability(800.0) == pytest.approx(math.exp(-800.0), rel=1e-12)


def test_binomial_degenerate_probabilities():
    assert binomial_sample(RngStream(0), 100, 0.0) == 0
    assert binomial_sample(RngStream(0), 100, 1.0) == 100


def test_binomial_mean():
    m = binomial_sample(RngStream(6), np.full(10_000, 1000), 0.3)
    se = math.sqrt(1000 * 0.3 * 0.7 / 10_000)
    assert abs(m.mean() - 300) < 3 * se


@pytest.mark.parametrize("trials,p", [(12, 0.3), (5, 0.9), (1, 0.5)])
def test_binomial_pmf_total_variation(trials, p):
    m = binomial_sample(RngStream(7), np.full(1_000_000, trials), p)
    freq = np.bincount(m, minlength=trials + 1) / m.size
    pmf = stats.binom.pmf(np.arange(trials + 1), trials, p)
    assert 0.5 * np.abs(freq - pmf).sum() < 0.01


def test_distinct_excluding_single_candidate():
    assert sample_k_distinct_excluding(RngStream(0), 5, {1, 2, 3, 4}, 1).tolist() == [0]


def test_distinct_excluding_exhaustive():
    out = sample_k_distinct_excluding(RngStream(0), 4, set(), 4)
    assert sorted(out.tolist()) == [0, 1, 2, 3]


def test_distinct_excluding_too_many():
    with pytest.raises(InsufficientPopulation):
        sample_k_distinct_excluding(RngStream(0), 10, range(5), 6)


def test_distinct_excluding_uniform():
    gen = as_generator(RngStream(8))
    reps = 100_000
    counts = np.zeros(100)
    for _ in range(reps):
        counts[sample_k_distinct_excluding(gen, 100, range(10), 5)] += 1
    assert counts[:10].sum() == 0
    p = 5 / 90
    se = math.sqrt(p * (1 - p) / reps)
    assert np.abs(counts[10:] / reps - p).max() < 3.5 * se


@settings(max_examples=60, deadline=None)
@given(
    n=st.integers(1, 60),
    data=st.data(),
    seed=st.integers(0, 2**32),
)
def test_distinct_excluding_properties(n, data, seed):
    excluded = data.draw(st.sets(st.integers(0, n - 1), max_size=n))
    m = data.draw(st.integers(0, n - len(excluded)))
    out = sample_k_distinct_excluding(RngStream(seed), n, excluded, m)
    assert out.size == m
    assert len(set(out.tolist())) == m
    assert not set(out.tolist()) & excluded
    assert ((out >= 0) & (out < n)).all()


@settings(max_examples=40, deadline=None)
@given(
    sizes=st.lists(st.integers(1, 20), min_size=1, max_size=30),
    seed=st.integers(0, 2**32),
    data=st.data(),
)
def test_distinct_ranks_segments(sizes, seed, data):
    bounds = np.array(sizes)
    counts = np.array([data.draw(st.integers(0, b)) for b in sizes])
    seg = np.repeat(np.arange(len(sizes)), counts)
    ranks = distinct_ranks(np.random.default_rng(seed), seg, bounds)
    for s in range(len(sizes)):
        r = ranks[seg == s]
        assert len(set(r.tolist())) == r.size
        assert ((r >= 0) & (r < bounds[s])).all()


@pytest.mark.parametrize("bound", [10, 63, 64, 200])
def test_distinct_ranks_uniform_subsets(bound):
    # small bounds take the bitmask path, large ones the rejection path
    m, reps = 4, 20_000
    seg = np.repeat(np.arange(reps), m)
    ranks = distinct_ranks(np.random.default_rng(bound), seg, np.full(reps, bound))
    r = ranks.reshape(reps, m)
    assert (np.sort(r, axis=1)[:, 1:] != np.sort(r, axis=1)[:, :-1]).all()
    counts = np.bincount(ranks, minlength=bound)
    assert stats.chisquare(counts).pvalue > 1e-3
    if bound == 10:
        # every 4-subset of 10 items should be equally likely
        code = (1 << np.sort(r, axis=1)).sum(axis=1)
        _, freq = np.unique(code, return_counts=True)
        assert freq.size == 210
        assert stats.chisquare(freq).pvalue > 1e-3


def test_distinct_ranks_unsorted_segments():
    seg = np.array([2, 0, 2, 1, 0, 2])
    ranks = distinct_ranks(np.random.default_rng(0), seg, np.array([2, 1, 3]))
    for s in range(3):
        assert sorted(ranks[seg == s].tolist()) == list(range([2, 1, 3][s]))


def test_complement_rank_to_index():
    excluded = np.array([0, 3, 4, 9])
    complement = [i for i in range(12) if i not in excluded]
    assert complement_rank_to_index(np.arange(8), excluded).tolist() == complement


def test_rng_stream_reproducible_and_distinct():
    a = RngStream(11, (2, 3)).generator().random(5)
    b = RngStream(11, (2, 3)).generator().random(5)
    c = RngStream(11, (2, 4)).generator().random(5)
    assert (a == b).all()
    assert not (a == c).any()
    assert RngStream(11).child(2, 3) == RngStream(11, (2, 3))


def test_rng_stream_rejects_bad_seed():
    with pytest.raises(ValueError):
        RngStream(-1)


def test_gumbel_max_stability():
    k = 20
    x = gumbel_sample(RngStream(9), size=(100_000, k)).max(axis=1)
    assert abs(x.mean() - (math.log(k) + EULER_GAMMA)) < 0.02
    assert abs(x.var() - math.pi**2 / 6) < 0.05


@settings(max_examples=40, deadline=None)
@given(
    c=st.floats(-1e6, 1e6, allow_nan=False),
    eps=st.floats(1e-3, 10.0),
    delta=st.floats(1e-6, 0.99),
    var=st.floats(0.0, 10.0),
)
def test_median_of_means_constant(c, eps, delta, var):
    cfg = MoMConfig(eps, delta, var, max_samples=5000)
    assert median_of_means(lambda g, s: np.full(s, c), cfg, RngStream(0)) == c


def test_median_of_means_bernoulli_multiplicative():
    cfg = MoMConfig(0.1, 0.1, 0.25, mean_lower_bound=0.5)
    root = RngStream(12)
    hits = 0
    for r in range(1000):
        est = median_of_means(lambda g, s: g.random(s) < 0.5, cfg, root.child(r))
        hits += 0.45 <= est <= 0.55
    assert hits >= 900


def test_median_of_means_uniform_additive():
    cfg = MoMConfig(0.2, 0.05, 8.25)
    root = RngStream(13)
    hits = 0
    for r in range(1000):
        est = median_of_means(lambda g, s: g.integers(0, 10, s), cfg, root.child(r))
        hits += abs(est - 4.5) <= 0.2
    assert hits >= 950


def test_median_of_means_vector_statistics():
    cfg = MoMConfig(0.05, 0.01, 1.0)
    est = median_of_means(lambda g, s: np.column_stack([g.random(s), 2 + g.random(s)]), cfg, RngStream(1))
    assert est.shape == (2,)
    assert np.allclose(est, [0.5, 2.5], atol=0.05)


def test_mom_config_sizes():
    cfg = MoMConfig(0.1, 0.1, 2.0)
    assert cfg.groups == math.ceil(8 * math.log(20))
    assert cfg.group_size == math.ceil(4 * 2.0 / 0.01)
    g, s, capped = MoMConfig(0.1, 0.1, 2.0, max_samples=100).plan()
    assert capped and g * s <= 100


@pytest.mark.parametrize("kw", [dict(epsilon=0.0), dict(delta=0.0), dict(delta=1.0), dict(variance_bound=-1.0), dict(mean_lower_bound=0.0)])
def test_mom_config_validation(kw):
    args = dict(epsilon=0.1, delta=0.1, variance_bound=1.0)
    args.update(kw)
    with pytest.raises(ValueError):
        MoMConfig(**args)


def test_reproducible_draws():
    a = gumbel_sample_conditional_above(RngStream(4, (1,)), 1.0, size=10)
    b = gumbel_sample_conditional_above(RngStream(4, (1,)), 1.0, size=10)
    assert (a == b).all()
