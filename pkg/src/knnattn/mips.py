"""Maximum-inner-product search through norm-equalised key augmentation.

Keys are lifted to ``[k_j, sqrt(M - |k_j|^2)]`` so every augmented key has
squared norm ``M``; queries get a trailing zero. Inner products are
unchanged, and top-k by inner product becomes a nearest-neighbour problem.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .core import RngLike, as_generator

# soft cap (in float64 entries) on temporary score blocks
_BLOCK_ENTRIES = 1 << 22


@dataclass(frozen=True)
class AugmentedKeys:
    K_aug: np.ndarray
    M_norm: float

    @property
    def n(self) -> int:
        return self.K_aug.shape[0]

    @property
    def keys(self) -> np.ndarray:
        """The original (un-augmented) keys."""
        return self.K_aug[:, :-1]


def augment_keys(K: np.ndarray) -> AugmentedKeys:
    K = np.asarray(K, dtype=np.float64)
    sq = np.einsum("ij,ij->i", K, K)
    M = float(sq.max()) if sq.size else 0.0
    extra = np.sqrt(np.maximum(M - sq, 0.0))
    return AugmentedKeys(np.column_stack([K, extra]), M)


def augment_query(q: np.ndarray) -> np.ndarray:
    """Append a zero coordinate to a query vector (or to each row of a matrix)."""
    q = np.asarray(q, dtype=np.float64)
    pad = np.zeros(q.shape[:-1] + (1,))
    return np.concatenate([q, pad], axis=-1)


@dataclass(frozen=True)
class LshParams:
    num_tables: int = 4
    hash_bits: int = 4
    seed: int = 0

    def __post_init__(self):
        if self.num_tables < 1 or self.hash_bits < 1:
            raise ValueError("num_tables and hash_bits must be at least 1")

    @classmethod
    def auto(cls, n: int, k: int, num_tables: int = 4, seed: int = 0) -> "LshParams":
        """Pick bits so that the union of buckets holds roughly 3k keys."""
        target = max(1.0, num_tables * n / (3.0 * max(k, 1)))
        bits = max(1, min(30, int(math.floor(math.log2(target)))))
        return cls(num_tables=num_tables, hash_bits=bits, seed=seed)


def _select_topk(S: np.ndarray, cols: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Top-k of each row of a score block, ties to the lower column index.

    ``cols`` holds the key index of every column, either one ascending
    vector shared by all rows or a matrix ascending along each row. Rows
    may contain ``-inf`` for masked entries. Returns indices and scores sorted
    by descending score, padded with -1 / -inf when a row has fewer than k
    finite entries.
    """
    b, m = S.shape
    kk = min(k, m)
    if kk == 0:
        return np.full((b, k), -1, dtype=np.int64), np.full((b, k), -np.inf)
    if kk < m:
        kth = np.partition(S, m - kk, axis=1)[:, m - kk]
        greater = S > kth[:, None]
        need = kk - greater.sum(axis=1)
        eq = S == kth[:, None]
        mask = greater | (eq & (np.cumsum(eq, axis=1) <= need[:, None]))
        pos = np.nonzero(mask)[1].reshape(b, kk)
    else:
        pos = np.broadcast_to(np.arange(m), (b, m))
    sel = np.take_along_axis(S, pos, axis=1)
    order = np.lexsort((pos, -sel), axis=1)
    pos = np.take_along_axis(pos, order, axis=1)
    sel = np.take_along_axis(sel, order, axis=1)
    idx = cols[pos] if cols.ndim == 1 else np.take_along_axis(cols, pos, axis=1)
    idx = np.where(np.isfinite(sel), idx, -1)
    if kk < k:
        idx = np.pad(idx, ((0, 0), (0, k - kk)), constant_values=-1)
        sel = np.pad(sel, ((0, 0), (0, k - kk)), constant_values=-np.inf)
    return idx, sel


class KnnIndex:
    """Top-k inner-product index over augmented keys.

    ``query_batch`` returns ``(indices, scores)`` arrays of shape
    ``(n_queries, k)`` sorted by descending inner product, padded with
    ``-1`` / ``-inf`` where fewer than ``k`` keys are eligible. ``limits``
    restricts query ``i`` to keys ``0..limits[i]`` (causal attention).
    """

    backend = "abstract"

    def __init__(self, aug: AugmentedKeys):
        self.aug = aug
        self.n = aug.n

    def query_batch(self, Q_aug, k, limits=None):
        raise NotImplementedError

    def query(self, q_aug, k, limit=None):
        lim = None if limit is None else np.array([limit])
        idx, _ = self.query_batch(np.atleast_2d(q_aug), k, lim)
        row = idx[0]
        return row[row >= 0]

    def _exact_scan(self, Q_aug, k, limits):
        Q_aug = np.atleast_2d(np.asarray(Q_aug, dtype=np.float64))
        nq = Q_aug.shape[0]
        block = max(1, _BLOCK_ENTRIES // max(self.n, 1))
        out_i = np.empty((nq, k), dtype=np.int64)
        out_s = np.empty((nq, k))
        cols = np.arange(self.n)
        for lo in range(0, nq, block):
            hi = min(nq, lo + block)
            S = Q_aug[lo:hi] @ self.aug.K_aug.T
            if limits is not None:
                S[cols[None, :] > np.asarray(limits[lo:hi])[:, None]] = -np.inf
            out_i[lo:hi], out_s[lo:hi] = _select_topk(S, cols, k)
        return out_i, out_s


class ExactIndex(KnnIndex):
    backend = "exact"

    def query_batch(self, Q_aug, k, limits=None):
        if k < 1:
            raise ValueError("k must be at least 1")
        return self._exact_scan(Q_aug, k, limits)


class LshIndex(KnnIndex):
    """Multi-table random-hyperplane LSH with exact re-ranking.

    Each table hashes a vector to the sign pattern of ``hash_bits`` random
    projections. A query collects every key sharing its bucket in any
    table, keeps the ``k`` best by true inner product, and falls back to an
    exact scan when fewer than ``k`` eligible candidates were found.
    """

    backend = "lsh"

    def __init__(self, aug: AugmentedKeys, params: LshParams):
        super().__init__(aug)
        self.params = params
        gen = as_generator(params.seed)
        dim = aug.K_aug.shape[1]
        self.planes = gen.standard_normal((params.num_tables, params.hash_bits, dim))
        self._weights = 1 << np.arange(params.hash_bits, dtype=np.int64)
        codes = self._codes(aug.K_aug)
        self._order = np.argsort(codes, axis=0, kind="stable").T.copy()
        self._sorted = np.take_along_axis(codes, self._order.T, axis=0).T.copy()
        self.fallbacks = 0

    def _codes(self, X):
        bits = np.einsum("tbd,nd->ntb", self.planes, X) > 0
        return (bits * self._weights).sum(axis=2)

    def candidates(self, Q_aug):
        """Deduplicated ``(query, key)`` candidate pairs for a block of queries."""
        codes = self._codes(Q_aug)
        nq = Q_aug.shape[0]
        qs, ks = [], []
        for t in range(self.params.num_tables):
            srt = self._sorted[t]
            lo = np.searchsorted(srt, codes[:, t], side="left")
            hi = np.searchsorted(srt, codes[:, t], side="right")
            cnt = hi - lo
            tot = int(cnt.sum())
            if tot == 0:
                continue
            qid = np.repeat(np.arange(nq), cnt)
            start = np.cumsum(cnt) - cnt
            pos = lo[qid] + (np.arange(tot) - start[qid])
            qs.append(qid)
            ks.append(self._order[t][pos])
        if not qs:
            return np.empty(0, dtype=np.int64), np.empty(0, dtype=np.int64)
        pair = np.unique(np.concatenate(qs) * self.n + np.concatenate(ks))
        return pair // self.n, pair % self.n

    def query_batch(self, Q_aug, k, limits=None):
        if k < 1:
            raise ValueError("k must be at least 1")
        Q_aug = np.atleast_2d(np.asarray(Q_aug, dtype=np.float64))
        nq = Q_aug.shape[0]
        out_i = np.full((nq, k), -1, dtype=np.int64)
        out_s = np.full((nq, k), -np.inf)
        expected = k * self.params.num_tables * 3
        block = max(1, _BLOCK_ENTRIES // max(expected, 1))
        for lo in range(0, nq, block):
            hi = min(nq, lo + block)
            qid, key = self.candidates(Q_aug[lo:hi])
            if limits is not None:
                lim = np.asarray(limits[lo:hi])
                keep = key <= lim[qid]
                qid, key = qid[keep], key[keep]
                eligible = np.minimum(lim + 1, self.n)
            else:
                eligible = np.full(hi - lo, self.n)
            sc = np.einsum("ij,ij->i", Q_aug[lo:hi][qid], self.aug.K_aug[key])
            # candidates come grouped by query with ascending keys, so a
            # padded score matrix keeps the lower-key tie-break by position
            counts = np.bincount(qid, minlength=hi - lo)
            start = np.cumsum(counts) - counts
            width = max(int(counts.max(initial=0)), 1)
            S = np.full((hi - lo, width), -np.inf)
            C = np.full((hi - lo, width), self.n, dtype=np.int64)
            col = np.arange(qid.size) - start[qid]
            S[qid, col] = sc
            C[qid, col] = key
            out_i[lo:hi], out_s[lo:hi] = _select_topk(S, C, k)
            short = np.nonzero(counts < np.minimum(k, eligible))[0]
            if short.size:
                self.fallbacks += short.size
                sub_lim = None if limits is None else np.asarray(limits[lo:hi])[short]
                fi, fs = self._exact_scan(Q_aug[lo:hi][short], k, sub_lim)
                out_i[lo + short], out_s[lo + short] = fi, fs
        return out_i, out_s


def build_exact_index(aug: AugmentedKeys) -> ExactIndex:
    return ExactIndex(aug)


def build_lsh_index(aug: AugmentedKeys, params: LshParams) -> LshIndex:
    return LshIndex(aug, params)


def build_index(K: np.ndarray, backend: str = "exact", params: LshParams | None = None, k: int | None = None) -> KnnIndex:
    """Augment ``K`` and build an index of the requested backend."""
    aug = augment_keys(K)
    if backend == "exact":
        return ExactIndex(aug)
    if backend == "lsh":
        if params is None:
            params = LshParams.auto(aug.n, k or max(1, int(math.isqrt(aug.n))))
        return LshIndex(aug, params)
    raise ValueError(f"unknown index backend {backend!r}")


def query_topk(index: KnnIndex, q_aug: np.ndarray, k: int) -> np.ndarray:
    """Indices of the ``min(k, n)`` keys with largest inner product, best first."""
    return index.query(q_aug, k)
