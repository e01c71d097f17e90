"""Seeded randomness, Gumbel/Binomial draws and median-of-means boosting."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Union

import numpy as np

EULER_GAMMA = 0.5772156649015329

# Chebyshev constant per group and the group-count multiplier for the median.
MOM_CONSTANT = 4.0
MOM_GROUP_FACTOR = 8.0


class DegenerateWeights(ValueError):
    """Raised when a weight vector cannot be normalised into a distribution."""


class InsufficientPopulation(ValueError):
    """Raised when more distinct items are requested than are available."""


@dataclass(frozen=True)
class RngStream:
    """A reproducible random stream identified by ``(seed, stream_id)``.

    Distinct stream ids map to statistically independent numpy generators
    through :class:`numpy.random.SeedSequence` spawn keys.
    """

    seed: int
    stream_id: tuple[int, ...] = ()

    def __post_init__(self):
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must be a 64-bit unsigned integer")
        if isinstance(self.stream_id, int):
            object.__setattr__(self, "stream_id", (self.stream_id,))

    def child(self, *ids: int) -> "RngStream":
        return RngStream(self.seed, self.stream_id + tuple(int(i) for i in ids))

    def generator(self) -> np.random.Generator:
        ss = np.random.SeedSequence(self.seed, spawn_key=self.stream_id)
        return np.random.Generator(np.random.PCG64(ss))


RngLike = Union[RngStream, np.random.Generator, int, None]


def as_generator(rng: RngLike) -> np.random.Generator:
    """Coerce a stream, seed or generator into a ``numpy.random.Generator``."""
    if isinstance(rng, np.random.Generator):
        return rng
    if isinstance(rng, RngStream):
        return rng.generator()
    return np.random.default_rng(rng)


@dataclass(frozen=True)
class GumbelParams:
    mu: float = 0.0
    beta: float = 1.0

    def __post_init__(self):
        if not self.beta > 0:
            raise ValueError("Gumbel scale beta must be positive")


def open_uniform(rng: np.random.Generator, size=None):
    """Uniform draws on the open interval (0, 1); exact zeros are re-drawn."""
    u = rng.random(size)
    if np.ndim(u) == 0:
        while u == 0.0:
            u = rng.random()
        return u
    bad = u == 0.0
    while bad.any():
        u[bad] = rng.random(int(bad.sum()))
        bad = u == 0.0
    return u


def gumbel_from_uniform(u, mu: float = 0.0, beta: float = 1.0):
    """Inverse-CDF transform ``mu - beta * ln(-ln(u))``."""
    return mu - beta * np.log(-np.log(u))


def gumbel_sample(rng: RngLike, params: GumbelParams = GumbelParams(), size=None):
    """Draw Gumbel(mu, beta) variates by the inverse-CDF transform."""
    rng = as_generator(rng)
    return gumbel_from_uniform(open_uniform(rng, size), params.mu, params.beta)


def gumbel_sample_conditional_above(rng: RngLike, cutoff, size=None):
    """Draw standard Gumbel variates conditioned to exceed ``cutoff``.

    ``cutoff`` may be an array (broadcast against ``size``) and may be
    ``-inf`` for an unconditional draw. The sampling works on the
    exponential scale ``E = exp(-G)``: conditioning ``G > B`` is the
    truncation ``E < exp(-B)``, which stays accurate when ``1 - F(B)``
    would underflow in the plain inverse-CDF form.
    """
    rng = as_generator(rng)
    cutoff = np.asarray(cutoff, dtype=float)
    if size is None:
        size = cutoff.shape
    v = open_uniform(rng, size)
    with np.errstate(over="ignore"):
        t = np.exp(-cutoff)
    e = -np.log1p(v * np.expm1(-t))
    g = -np.log(e)
    # rounding can land exactly on the cutoff for huge cutoffs
    return np.maximum(g, np.nextafter(cutoff, np.inf))


def gumbel_tail_probability(cutoff):
    """``P[G > cutoff]`` for a standard Gumbel, i.e. ``1 - exp(-exp(-cutoff))``."""
    with np.errstate(over="ignore"):
        return -np.expm1(-np.exp(-np.asarray(cutoff, dtype=float)))


def binomial_sample(rng: RngLike, trials, p):
    """Exact Binomial(trials, p) draws.

    numpy's sampler uses inversion for ``trials * p < 30`` and the BTPE
    rejection scheme otherwise; both are exact.
    """
    rng = as_generator(rng)
    p = np.clip(p, 0.0, 1.0)
    return rng.binomial(trials, p)


def distinct_ranks(rng: np.random.Generator, segment: np.ndarray, bounds: np.ndarray) -> np.ndarray:
    """For every position draw a rank in ``[0, bounds[segment])`` such that
    ranks are distinct within each segment.

    Positions are first filled independently; any position repeating an
    earlier position's rank in the same segment is re-drawn until no
    repeats remain. The procedure commutes with relabelling the universe,
    so each segment's rank set is a uniform subset of the requested size.
    Sorted segments with bounds below 64 use Floyd's subset sampler
    instead, which needs no sorting. Callers must ensure a segment never
    asks for more ranks than its bound.
    """
    segment = np.asarray(segment, dtype=np.int64)
    bounds = np.asarray(bounds, dtype=np.int64)
    if segment.size == 0:
        return np.empty(0, dtype=np.int64)
    if int(bounds[segment].max()) <= _FLOYD_MAX_BOUND and (np.diff(segment) >= 0).all():
        return _floyd_ranks(rng, segment, bounds)
    hi = bounds[segment]
    size = segment.size
    ranks = _bounded_integers(rng, hi)
    stride = int(bounds.max()) + 1
    keys = segment * stride + ranks
    # sorting (key << bits) | position orders ties by position without a
    # stable argsort; fall back when the packed key could overflow
    bits = max(1, (size - 1).bit_length())
    packed = ((int(segment.max()) + 1) * stride) << bits < 2**62
    mask = (1 << bits) - 1
    pos = np.arange(size)
    while True:
        kp = keys[pos]
        if packed:
            sc = np.sort((kp << bits) | pos)
            sk = sc >> bits
            later = (sc & mask)[1:]
        else:
            order = np.argsort(kp, kind="stable")
            sk = kp[order]
            later = pos[order[1:]]
        dup = later[sk[1:] == sk[:-1]]
        if dup.size == 0:
            return ranks
        ranks[dup] = _bounded_integers(rng, hi[dup])
        keys[dup] = segment[dup] * stride + ranks[dup]
        # only segments that just had a repeat can still hold one
        flag = np.zeros(int(segment.max()) + 1, dtype=bool)
        flag[segment[dup]] = True
        pos = pos[flag[segment[pos]]]


_FLOYD_MAX_BOUND = 63


def _floyd_ranks(rng: np.random.Generator, segment: np.ndarray, bounds: np.ndarray) -> np.ndarray:
    """Floyd's subset sampler run on all segments at once, tracking each
    segment's chosen set in a 64-bit mask. Needs sorted ``segment`` and
    bounds below 64. Step ``t`` of a segment of size ``m`` and bound ``u``
    draws ``r`` in ``[0, u - m + t]`` and keeps ``r``, or ``u - m + t`` if
    ``r`` was already taken."""
    nseg = int(segment[-1]) + 1
    counts = np.bincount(segment, minlength=nseg)
    start = np.cumsum(counts) - counts
    u = bounds[:nseg]
    mask = np.zeros(nseg, dtype=np.uint64)
    out = np.empty(segment.size, dtype=np.int64)
    one = np.uint64(1)
    segs = np.nonzero(counts)[0]
    for t in range(int(counts.max())):
        segs = segs[counts[segs] > t]
        j = u[segs] - counts[segs] + t
        r = _bounded_integers(rng, j + 1)
        taken = (mask[segs] >> r.astype(np.uint64)) & one
        r = np.where(taken.astype(bool), j, r)
        mask[segs] |= one << r.astype(np.uint64)
        out[start[segs] + t] = r
    return out


def _bounded_integers(rng: np.random.Generator, hi: np.ndarray) -> np.ndarray:
    """Uniform integers in ``[0, hi)``, using the faster scalar-bound path
    when every bound is equal."""
    if hi.size and (hi == hi[0]).all():
        return rng.integers(0, int(hi[0]), hi.size)
    return rng.integers(0, hi)


def sample_k_distinct_excluding(rng: RngLike, universe_size: int, excluded, m: int) -> np.ndarray:
    """Draw ``m`` distinct indices uniformly from ``range(universe_size)``
    minus ``excluded``."""
    rng = as_generator(rng)
    excl = np.unique(np.asarray(list(excluded), dtype=np.int64))
    excl = excl[(excl >= 0) & (excl < universe_size)]
    avail = universe_size - excl.size
    if m < 0 or m > avail:
        raise InsufficientPopulation(f"cannot draw {m} distinct items from {avail}")
    if m == 0:
        return np.empty(0, dtype=np.int64)
    ranks = distinct_ranks(rng, np.zeros(m, dtype=np.int64), np.array([avail]))
    return complement_rank_to_index(ranks, excl)


def complement_rank_to_index(ranks, excluded_sorted) -> np.ndarray:
    """Map ranks within the complement of a sorted index set to indices."""
    excluded_sorted = np.asarray(excluded_sorted, dtype=np.int64)
    shifted = excluded_sorted - np.arange(excluded_sorted.size)
    return ranks + np.searchsorted(shifted, ranks, side="right")


@dataclass(frozen=True)
class MoMConfig:
    """Accuracy target for :func:`median_of_means`.

    With ``mean_lower_bound`` set the target is multiplicative
    (``|est - mu| <= epsilon * mu``); otherwise it is additive.
    """

    epsilon: float
    delta: float
    variance_bound: float
    mean_lower_bound: float | None = None
    constant: float = MOM_CONSTANT
    group_factor: float = MOM_GROUP_FACTOR
    max_samples: int | None = None

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")
        if not 0 < self.delta < 1:
            raise ValueError("delta must lie in (0, 1)")
        if self.variance_bound < 0:
            raise ValueError("variance_bound must be nonnegative")
        if self.mean_lower_bound is not None and not self.mean_lower_bound > 0:
            raise ValueError("mean_lower_bound must be positive")

    @property
    def groups(self) -> int:
        return max(1, math.ceil(self.group_factor * math.log(2.0 / self.delta)))

    @property
    def group_size(self) -> int:
        ratio = self.variance_bound / self.epsilon**2
        if self.mean_lower_bound is not None:
            ratio /= self.mean_lower_bound**2
        return max(1, math.ceil(self.constant * ratio))

    @property
    def total_samples(self) -> int:
        return self.groups * self.group_size

    def plan(self) -> tuple[int, int, bool]:
        """Return ``(groups, group_size, capped)`` honouring ``max_samples``."""
        g, s = self.groups, self.group_size
        if self.max_samples is not None and g * s > self.max_samples:
            g = min(g, self.max_samples)
            s = max(1, self.max_samples // g)
            return g, s, True
        return g, s, False


Sampler = Callable[[np.random.Generator, int], np.ndarray]


def median_of_means(sampler: Sampler, cfg: MoMConfig, rng: RngLike):
    """Median of group means of draws from ``sampler``.

    ``sampler(gen, size)`` returns ``size`` independent draws stacked on
    axis 0; any trailing axes are estimated independently, so a single call
    can boost a whole vector of statistics.
    """
    rng = as_generator(rng)
    groups, size, _ = cfg.plan()
    draws = np.asarray(sampler(rng, groups * size), dtype=float)
    draws = draws.reshape((groups, size) + draws.shape[1:])
    means = draws.mean(axis=1)
    # a constant group must report its value exactly, not a rounded mean
    first = draws[:, 0]
    const = (draws == first[:, None]).all(axis=1)
    means = np.where(const, first, means)
    est = np.median(means, axis=0)
    return float(est) if np.ndim(est) == 0 else est
