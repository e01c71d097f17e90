"""Sampling from softmax rows without materialising them.

The main entry point is :class:`SoftmaxRowSampler`, which draws exact
samples from ``D_i(j) ~ exp(<q_i, k_j>)`` using lazy Gumbel sampling: Gumbel
noise is realised only on the retrieved top-k keys plus a Binomial-sized
set of outside keys whose noise clears the cutoff. The module also holds
the prefix-sum machinery used to sample proportionally to the shifted
``Y`` values in the key-gradient estimator.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import (
    DegenerateWeights,
    RngLike,
    as_generator,
    binomial_sample,
    distinct_ranks,
    gumbel_sample,
    gumbel_sample_conditional_above,
    gumbel_tail_probability,
    open_uniform,
)
from .mips import KnnIndex, augment_query, build_index


@dataclass(frozen=True)
class TopKSet:
    """Per-row retrieved key sets, padded to a common width.

    ``indices[i, :sizes[i]]`` are the retrieved keys of row ``i`` (best
    first) and ``scores`` the matching exact inner products. ``universe[i]``
    is the number of keys row ``i`` may attend to (``i + 1`` when causal).
    """

    indices: np.ndarray
    scores: np.ndarray
    sizes: np.ndarray
    universe: np.ndarray

    @property
    def n(self) -> int:
        return self.indices.shape[0]

    @property
    def width(self) -> int:
        return self.indices.shape[1]

    @property
    def s_min(self) -> np.ndarray:
        return np.where(np.isfinite(self.scores), self.scores, np.inf).min(axis=1)

    def row(self, i: int) -> np.ndarray:
        return self.indices[i, : self.sizes[i]]


def retrieve_topk(Q, K, k: int, index: KnnIndex | None = None, causal: bool = False, backend: str = "exact") -> TopKSet:
    """Query a kNN index with every row of ``Q`` and package the result.

    Scores are recomputed from the original (un-augmented) vectors so that
    sampling uses the same arithmetic for retrieved and spilled keys.
    """
    Q = np.asarray(Q, dtype=np.float64)
    K = np.asarray(K, dtype=np.float64)
    n = K.shape[0]
    k = max(1, min(int(k), n))
    if index is None:
        index = build_index(K, backend, k=k)
    limits = np.arange(Q.shape[0]) if causal else None
    idx, _ = index.query_batch(augment_query(Q), k, limits)
    valid = idx >= 0
    safe = np.where(valid, idx, 0)
    sc = np.einsum("id,ikd->ik", Q, K[safe])
    sc = np.where(valid, sc, -np.inf)
    sizes = valid.sum(axis=1)
    universe = np.arange(1, Q.shape[0] + 1) if causal else np.full(Q.shape[0], n)
    return TopKSet(idx, sc, sizes, universe)


class ComplementLookup:
    """Maps a rank within ``range(universe[i]) \\ S_i`` to a key index.

    Row ``i`` stores ``sorted(S_i)[c] - c``; the index of rank ``r`` is
    ``r`` plus the number of stored values ``<= r``. All rows live in one
    flat, globally sorted array offset by a per-row stride.
    """

    def __init__(self, topk: TopKSet):
        n = int(topk.universe.max()) if topk.n else 0
        w = topk.width
        valid = topk.indices >= 0
        srt = np.sort(np.where(valid, topk.indices, n + w), axis=1)
        self.stride = n + 2
        self.width = w
        # pads sort last and sit above every rank, keeping each row sorted
        shifted = np.where(np.sort(~valid, axis=1), n + 1, srt - np.arange(w))
        self.keys = (shifted + np.arange(topk.n)[:, None] * self.stride).ravel()

    def __call__(self, rows, ranks):
        pos = np.searchsorted(self.keys, ranks + rows * self.stride, side="right")
        return ranks + (pos - rows * self.width)

    def row(self, i: int, ranks):
        """Same as ``self(full(len(ranks), i), ranks)``, searching one row only."""
        keys = self.keys[i * self.width : (i + 1) * self.width] - i * self.stride
        return ranks + np.searchsorted(keys, ranks, side="right")


def sample_outside(topk: TopKSet, counts, rng: RngLike) -> tuple[np.ndarray, np.ndarray]:
    """Draw ``counts[i]`` distinct keys uniformly from outside ``S_i`` for
    every row; returns flat ``(rows, keys)``."""
    rng = as_generator(rng)
    counts = np.asarray(counts, dtype=np.int64)
    outside = topk.universe - topk.sizes
    if (counts > outside).any():
        raise ValueError("more outside keys requested than a row has")
    rows = np.repeat(np.arange(topk.n), counts)
    ranks = distinct_ranks(rng, rows, outside)
    return rows, ComplementLookup(topk)(rows, ranks)


class SoftmaxRowSampler:
    """Exact sampler for the rows of ``P = softmax(Q K^T)``.

    Sampling never touches more than the retrieved keys plus the spilled
    outsiders. ``cutoff_slack`` lowers the Gumbel cutoff to compensate for
    an approximate top-k set. Single entries of ``P`` can be evaluated via
    :meth:`entry`, which computes (and caches) the row normaliser exactly.
    """

    def __init__(self, Q, K, topk: TopKSet, cutoff_slack: float = 0.0):
        self.Q = np.asarray(Q, dtype=np.float64)
        self.K = np.asarray(K, dtype=np.float64)
        self.topk = topk
        self.cutoff_slack = float(cutoff_slack)
        if self.cutoff_slack < 0:
            raise ValueError("cutoff_slack must be nonnegative")
        self.n = self.K.shape[0]
        self._s_min = topk.s_min
        self._outside = topk.universe - topk.sizes
        self._complement = ComplementLookup(topk)
        self._lognorm: dict[int, float] = {}
        self.spill_total = 0
        self.draws_total = 0

    @classmethod
    def from_problem(cls, Q, K, k: int, causal: bool = False, backend: str = "exact", index=None, cutoff_slack: float = 0.0):
        return cls(Q, K, retrieve_topk(Q, K, k, index=index, causal=causal, backend=backend), cutoff_slack)

    def sample(self, rows, rng: RngLike) -> np.ndarray:
        """One draw from ``D_i`` for every entry ``i`` of ``rows``."""
        rng = as_generator(rng)
        rows = np.asarray(rows, dtype=np.int64).ravel()
        N = rows.size
        if N == 0:
            return np.empty(0, dtype=np.int64)
        tk = self.topk
        # a batch drawn from one row skips the per-draw gathers
        single = bool((rows == rows[0]).all())
        i = int(rows[0])
        G = gumbel_sample(rng, size=(N, tk.width))
        vals = (tk.scores[i] if single else tk.scores[rows]) + G
        best_pos = np.argmax(vals, axis=1)
        best_val = vals[np.arange(N), best_pos]
        best = tk.indices[i][best_pos] if single else tk.indices[rows, best_pos]

        outside = self._outside[i] if single else self._outside[rows]
        cutoff = best_val - self._s_min[rows] - self.cutoff_slack
        m = binomial_sample(rng, outside, gumbel_tail_probability(cutoff))
        total = int(m.sum())
        self.draws_total += N
        self.spill_total += total
        if total == 0:
            return best
        seg = np.repeat(np.arange(N), m)
        ranks = distinct_ranks(rng, seg, np.broadcast_to(outside, N))
        if single:
            keys = self._complement.row(i, ranks)
            z = self.K[keys] @ self.Q[i]
        else:
            srow = rows[seg]
            keys = self._complement(srow, ranks)
            z = np.einsum("ij,ij->i", self.Q[srow], self.K[keys])
        g = gumbel_sample_conditional_above(rng, cutoff[seg])
        v = z + g
        segmax = np.full(N, -np.inf)
        np.maximum.at(segmax, seg, v)
        hit = np.nonzero(v == segmax[seg])[0]
        winner = np.empty(N, dtype=np.int64)
        # reversed so the earliest hit in each segment is written last
        winner[seg[hit[::-1]]] = keys[hit[::-1]]
        swap = segmax > best_val
        best[swap] = winner[swap]
        return best

    def sample_row(self, i: int, size: int, rng: RngLike) -> np.ndarray:
        return self.sample(np.full(size, i, dtype=np.int64), rng)

    def row_scores(self, i: int) -> np.ndarray:
        """Exact scores of row ``i`` over its universe (O(n d), tests only)."""
        u = int(self.topk.universe[i])
        return self.K[:u] @ self.Q[i]

    def log_normalizer(self, i: int) -> float:
        if i not in self._lognorm:
            z = self.row_scores(i)
            mx = z.max()
            self._lognorm[i] = float(mx + np.log(np.exp(z - mx).sum()))
        return self._lognorm[i]

    def entry(self, i: int, k: int) -> float:
        """``P[i, k]`` in O(d) once the row normaliser is cached."""
        if k >= self.topk.universe[i]:
            return 0.0
        return float(np.exp(self.Q[i] @ self.K[k] - self.log_normalizer(i)))

    def row(self, i: int) -> np.ndarray:
        """Materialised row ``P[i, :]`` (O(n d), tests only)."""
        out = np.zeros(self.n)
        z = self.row_scores(i)
        out[: z.size] = np.exp(z - self.log_normalizer(i))
        return out


RowStochasticAccess = SoftmaxRowSampler


def lazy_gumbel_sample(sampler: SoftmaxRowSampler, i: int, rng: RngLike) -> int:
    """Single lazy-Gumbel draw from row ``i``."""
    return int(sampler.sample(np.array([i]), rng)[0])


def spill_counts(scores: np.ndarray, k: int, rng: RngLike) -> np.ndarray:
    """Spill size ``m`` of one lazy-Gumbel draw for each row of ``scores``.

    Uses the exact top-k of each row; only the Binomial count is drawn, the
    spilled keys themselves are not needed.
    """
    rng = as_generator(rng)
    scores = np.atleast_2d(np.asarray(scores, dtype=np.float64))
    t, n = scores.shape
    k = min(k, n)
    top = -np.sort(-scores, axis=1)[:, :k]
    G = gumbel_sample(rng, size=(t, k))
    cutoff = (top + G).max(axis=1) - top[:, -1]
    return binomial_sample(rng, np.full(t, n - k), gumbel_tail_probability(cutoff))


def expected_spill_count(n: int, k: int, trials: int, rng: RngLike, distribution: str = "normal") -> float:
    """Monte-Carlo mean spill size over ``trials`` random score rows.

    ``distribution`` is one of ``normal``, ``uniform``, ``equal`` or
    ``spike`` (a single large score among zeros).
    """
    if k > n:
        raise ValueError("k must not exceed n")
    rng = as_generator(rng)
    if k == n:
        return 0.0
    total = 0.0
    chunk = max(1, (1 << 21) // n)
    done = 0
    while done < trials:
        t = min(chunk, trials - done)
        if distribution == "normal":
            s = rng.standard_normal((t, n))
        elif distribution == "uniform":
            s = rng.uniform(-1.0, 1.0, (t, n))
        elif distribution == "equal":
            s = np.zeros((t, n))
        elif distribution == "spike":
            s = np.zeros((t, n))
            s[np.arange(t), rng.integers(0, n, t)] = 50.0
        else:
            raise ValueError(f"unknown score distribution {distribution!r}")
        total += spill_counts(s, k, rng).sum()
        done += t
    return total / trials


def cdf_sample(weights, rng: RngLike, size=None):
    """Draw indices with probability proportional to nonnegative ``weights``."""
    rng = as_generator(rng)
    w = np.asarray(weights, dtype=np.float64)
    if w.ndim != 1 or (w < 0).any():
        raise DegenerateWeights("weights must be a nonnegative vector")
    cum = np.cumsum(w)
    total = cum[-1] if cum.size else 0.0
    if not total > 0:
        raise DegenerateWeights("weights sum to zero")
    u = open_uniform(rng, size)
    idx = np.searchsorted(cum, u * total, side="right")
    # rounding may push past the end; fall back to the last positive weight
    last = int(np.nonzero(w > 0)[0][-1])
    return np.minimum(idx, last)


@dataclass(frozen=True)
class CdfTables:
    """Prefix tables ``prefix[j, l] = sum_{s<=l} Q[s, j] * dO[s, :]``.

    ``prefix`` has shape ``(d, n, d)``; ``totals[j]`` is the full column
    sum ``E_j``.
    """

    prefix: np.ndarray
    totals: np.ndarray

    @property
    def n(self) -> int:
        return self.prefix.shape[1]


def build_cdf_tables(Q, dO) -> CdfTables:
    Q = np.asarray(Q, dtype=np.float64)
    dO = np.asarray(dO, dtype=np.float64)
    if Q.shape[0] != dO.shape[0]:
        raise ValueError("Q and dO must have the same number of rows")
    terms = Q.T[:, :, None] * dO[None, :, :]
    prefix = np.cumsum(terms, axis=1)
    totals = terms.sum(axis=1)
    return CdfTables(prefix, totals)


@dataclass(frozen=True)
class ShiftBound:
    """Nonnegative shift making every ``Y^{(i)}_{kj} + M`` nonnegative."""

    M: float

    def __post_init__(self):
        if not self.M >= 0:
            raise ValueError("shift bound must be nonnegative")


def shift_bound(Q, dO, V, method: str = "box") -> ShiftBound:
    """Bound ``-min_{i,k,j} Q[k, j] <dO[k], V[i]>`` from above.

    ``box`` bounds ``<dO[k], V[i]>`` over all ``i`` with the coordinate-wise
    range of ``V`` in O(n d); ``exact`` evaluates every pair in O(n^2 d).
    """
    Q = np.asarray(Q, dtype=np.float64)
    dO = np.asarray(dO, dtype=np.float64)
    V = np.asarray(V, dtype=np.float64)
    if method == "exact":
        G = dO @ V.T  # G[k, i]
        lo = np.minimum(Q.T[:, :, None] * G[None], 0.0).min() if G.size else 0.0
        return ShiftBound(float(max(0.0, -lo)))
    if method != "box":
        raise ValueError(f"unknown shift-bound method {method!r}")
    vmin, vmax = V.min(axis=0), V.max(axis=0)
    gmin = np.minimum(dO * vmin, dO * vmax).sum(axis=1)
    gmax = np.maximum(dO * vmin, dO * vmax).sum(axis=1)
    # Q[k, j] * g with g in [gmin_k, gmax_k] is minimised at an endpoint
    low = np.minimum(Q * gmin[:, None], Q * gmax[:, None]).min()
    return ShiftBound(float(max(0.0, -low)))


def shifted_normalizer(tables: CdfTables, V_rows, cols, M: float):
    """``N_j^{(i)} = <V_i, E_j> + n M`` for paired rows/columns."""
    V_rows = np.atleast_2d(V_rows)
    return np.einsum("ij,ij->i", V_rows, tables.totals[cols]) + tables.n * M


def shifted_prefix(tables: CdfTables, V_rows, cols, ell, M: float):
    """Lazy prefix ``sum_{s<=ell}(Y_s + M) = (ell+1) M + <V_i, prefix[j, ell]>``
    for 0-based ``ell``."""
    return (ell + 1) * M + np.einsum("ij,ij->i", np.atleast_2d(V_rows), tables.prefix[cols, ell])


def sample_shifted_y_batch(tables: CdfTables, V_rows, cols, M: ShiftBound | float, rng: RngLike, normalizer=None):
    """Vectorised draws ``k ~ Y^{(i)}_{kj} + M`` by binary search on the
    lazily evaluated prefix; one draw per (``V_rows[t]``, ``cols[t]``)."""
    rng = as_generator(rng)
    M = M.M if isinstance(M, ShiftBound) else float(M)
    V_rows = np.atleast_2d(np.asarray(V_rows, dtype=np.float64))
    cols = np.asarray(cols, dtype=np.int64)
    if normalizer is None:
        normalizer = shifted_normalizer(tables, V_rows, cols, M)
    if (normalizer <= 0).any():
        raise DegenerateWeights("shifted normaliser is not positive; the shift bound is too small")
    x = open_uniform(rng, cols.size) * normalizer
    lo = np.zeros(cols.size, dtype=np.int64)
    hi = np.full(cols.size, tables.n - 1, dtype=np.int64)
    # smallest ell with prefix(ell) > x
    while True:
        active = lo < hi
        if not active.any():
            return lo
        mid = (lo + hi) // 2
        val = shifted_prefix(tables, V_rows, cols, mid, M)
        right = val <= x
        lo = np.where(active & right, mid + 1, lo)
        hi = np.where(active & ~right, mid, hi)


def sample_shifted_y(tables: CdfTables, V_row, j: int, M: ShiftBound | float, rng: RngLike, size=None):
    """Draw ``k`` with probability proportional to ``Q[k, j] <dO[k], V_row> + M``."""
    shape = () if size is None else size
    count = int(np.prod(shape))
    V_rows = np.broadcast_to(np.asarray(V_row, dtype=np.float64), (count, tables.prefix.shape[2]))
    out = sample_shifted_y_batch(tables, V_rows, np.full(count, j), M, rng)
    return int(out[0]) if size is None else out.reshape(shape)
