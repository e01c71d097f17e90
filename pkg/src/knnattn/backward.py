"""Sub-quadratic estimators of the attention gradients.

``dV = P^T dO`` is estimated column by column with one-step random walks
on the row-stochastic matrix ``P``: a walk starts at ``i`` with probability
proportional to ``x_i`` and moves to ``k ~ D_i``; the visit histogram is an
unbiased estimate of ``P^T x``. Signed vectors are shifted to be
nonnegative first, and the shift is removed with a shared estimate
``s_hat`` of ``P^T 1``.

``dQ`` is written as three expectations under the softmax rows and ``dK``
is split as ``A - B``; both reuse the lazy-Gumbel row sampler, so ``P`` is
never materialised.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from .core import DegenerateWeights, MoMConfig, RngLike, RngStream, as_generator, median_of_means
from .oracle import AttentionProblem, GradientSet
from .sampling import (
    CdfTables,
    ShiftBound,
    SoftmaxRowSampler,
    build_cdf_tables,
    cdf_sample,
    sample_shifted_y_batch,
    shift_bound,
    shifted_normalizer,
)

# stream tags, so each estimator owns a disjoint family of sub-streams
_S_HAT, _DV, _DQ, _DK_A, _DK_D, _DK_B = range(6)

# cap (in draws) on one vectorised batch of the key-gradient Part A sampler
_BATCH_DRAWS = 1 << 20


@dataclass(frozen=True)
class BackwardConfig:
    epsilon: float = 0.1
    delta: float = 0.1
    walks: int | None = None
    seed: int = 0
    k: int | None = None
    causal: bool = False
    index: str = "exact"
    max_samples: int | None = None
    relative: bool = False
    shift_method: str = "box"

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")
        if not 0 < self.delta < 1:
            raise ValueError("delta must lie in (0, 1)")
        if self.walks is not None and self.walks < 1:
            raise ValueError("walk count must be at least 1")
        if self.k is not None and self.k < 1:
            raise ValueError("k must be at least 1")


@dataclass
class ErrorBudget:
    """Per-entry additive error bounds, returned as data rather than asserted."""

    bound: np.ndarray
    guarantee_void: bool = False
    notes: dict = field(default_factory=dict)

    def within(self, estimate, exact) -> np.ndarray:
        """Boolean mask of entries whose error is inside the bound."""
        return np.abs(np.asarray(estimate) - np.asarray(exact)) <= self.bound


def walk_count(n: int, d: int, epsilon: float) -> int:
    """``max(2 lg n, ln(n^2 d)) / eps^2`` walks, rounded up."""
    n = max(n, 2)
    return max(1, math.ceil(max(2.0 * math.log2(n), math.log(n * n * max(d, 1))) / epsilon**2))


def row_sampler(p: AttentionProblem, cfg: BackwardConfig) -> SoftmaxRowSampler:
    k = cfg.k if cfg.k is not None else math.isqrt(max(p.n - 1, 0)) + 1
    return SoftmaxRowSampler.from_problem(p.Q, p.K, min(k, p.n), causal=p.causal or cfg.causal, backend=cfg.index)


def approx_pos_prod(P: SoftmaxRowSampler, x, epsilon: float, rng: RngLike, n_walks: int | None = None) -> np.ndarray:
    """Unbiased estimate of ``P^T x`` for a nonnegative ``x``.

    Each walk starts at ``i`` with probability ``x_i / sum(x)`` and takes one
    step ``k ~ D_i``. The visit histogram, divided by the walk count and
    scaled by ``sum(x)``, estimates ``P^T x``. A zero ``x`` gives zero.
    """
    x = np.asarray(x, dtype=np.float64)
    if (x < 0).any():
        raise DegenerateWeights("approx_pos_prod needs a nonnegative vector")
    n = x.size
    total = float(x.sum())
    if total == 0.0:
        return np.zeros(n)
    N = n_walks if n_walks is not None else walk_count(n, 1, epsilon)
    rng = as_generator(rng)
    src = cdf_sample(x, rng, N)
    dst = P.sample(src, rng)
    return np.bincount(dst, minlength=n) / N * total


def estimate_product(P: SoftmaxRowSampler, x, epsilon: float, s_hat, rng: RngLike, n_walks: int | None = None):
    """Estimate ``P^T x`` for a signed ``x`` with shift ``M = max(0, -min x)``.

    Returns ``(estimate, bound)`` where ``bound = eps <x, 1> + 2 eps n M``
    is the per-entry additive budget.
    """
    x = np.asarray(x, dtype=np.float64)
    n = x.size
    M = float(max(0.0, -x.min())) if n else 0.0
    shifted = x + M
    est = approx_pos_prod(P, shifted, epsilon, rng, n_walks)
    if M > 0:
        est = est - M * np.asarray(s_hat, dtype=np.float64)
    # eps <x, 1> + 2 eps n M, written so rounding cannot make it negative
    bound = epsilon * float(shifted.sum()) + epsilon * n * M
    return est, bound


def estimate_s_hat(P: SoftmaxRowSampler, epsilon: float, rng: RngLike, n_walks: int | None = None) -> np.ndarray:
    """Estimate of ``P^T 1``; its entries are within ``eps n`` w.h.p."""
    return approx_pos_prod(P, np.ones(P.n), epsilon, rng, n_walks)


def _walks(p: AttentionProblem, cfg: BackwardConfig) -> int:
    return cfg.walks if cfg.walks is not None else walk_count(p.n, p.V.shape[1], cfg.epsilon)


def _scaled(dO: np.ndarray, cfg: BackwardConfig) -> tuple[np.ndarray, float]:
    """Optionally rescale ``dO`` to unit max-norm so tolerances are relative."""
    if not cfg.relative:
        return dO, 1.0
    s = float(np.abs(dO).max()) if dO.size else 0.0
    if s == 0.0:
        return dO, 1.0
    return dO / s, s


def _check(p: AttentionProblem, dO) -> np.ndarray:
    dO = np.asarray(dO, dtype=np.float64)
    if dO.shape != (p.n, p.V.shape[1]):
        raise ValueError("dO must have the shape of the attention output")
    return dO


def estimate_dv(p: AttentionProblem, dO, cfg: BackwardConfig, P: SoftmaxRowSampler | None = None, s_hat=None):
    """Column-wise random-walk estimate of ``dV = P^T dO``.

    Column ``j`` uses its own sub-stream, so permuting the columns of
    ``dO`` permutes the output columns identically.
    """
    dO = _check(p, dO)
    dO, scale = _scaled(dO, cfg)
    P = P if P is not None else row_sampler(p, cfg)
    root = RngStream(cfg.seed)
    N = _walks(p, cfg)
    if s_hat is None:
        s_hat = estimate_s_hat(P, cfg.epsilon, root.child(_S_HAT), N)
    n, d = dO.shape
    out = np.empty((n, d))
    per_col = np.empty(d)
    for j in range(d):
        out[:, j], per_col[j] = estimate_product(P, dO[:, j], cfg.epsilon, s_hat, root.child(_DV, j), N)
    budget = ErrorBudget(np.broadcast_to(per_col * scale, (n, d)).copy(), notes={"walks": N, "per_column": per_col * scale})
    return out * scale, budget


def _dp_range(dO: np.ndarray, V: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-row interval containing ``<dO[i], V[k]>`` for every ``k``, in O(n d)."""
    vmin, vmax = V.min(axis=0), V.max(axis=0)
    lo = np.minimum(dO * vmin, dO * vmax).sum(axis=1)
    hi = np.maximum(dO * vmin, dO * vmax).sum(axis=1)
    return lo, hi


def _product_range(alo, ahi, blo, bhi):
    c = np.stack([alo * blo, alo * bhi, ahi * blo, ahi * bhi])
    return c.min(axis=0), c.max(axis=0)


def estimate_dq(p: AttentionProblem, dO, cfg: BackwardConfig, P: SoftmaxRowSampler | None = None):
    """``dQ[i, j] = E1 - E2 * E3`` with expectations under ``D_i``.

    ``E1 = E[<dO_i, V_k> K_kj]``, ``E2 = E[K_kj]`` and ``E3 = E[<dO_i, V_k>]``
    are boosted with additive median-of-means at tolerance ``eps``. All
    three share one batch of draws per row; the union bound over the
    ``3 n d`` estimates does not need them to be independent. Variance
    bounds come from value ranges computed in O(n d).
    """
    dO = _check(p, dO)
    dO, scale = _scaled(dO, cfg)
    P = P if P is not None else row_sampler(p, cfg)
    n, d = p.n, p.K.shape[1]
    eps = cfg.epsilon
    delta = cfg.delta / (3 * n * d)
    dlo, dhi = _dp_range(dO, p.V)
    klo, khi = p.K.min(axis=0), p.K.max(axis=0)
    root = RngStream(cfg.seed)
    out = np.empty((n, d))
    bound = np.empty((n, d))
    samples = np.empty(n, dtype=np.int64)
    void = False
    for i in range(n):
        plo, phi = _product_range(dlo[i], dhi[i], klo, khi)
        var = max(((phi - plo) ** 2).max(), ((khi - klo) ** 2).max(), (dhi[i] - dlo[i]) ** 2) / 4.0
        mom = MoMConfig(eps, delta, var, max_samples=cfg.max_samples)
        g, s, capped = mom.plan()
        void |= capped
        samples[i] = g * s
        dOi = dO[i]

        def draws(gen, size, i=i, dOi=dOi):
            k = P.sample_row(i, size, gen)
            dp = p.V[k] @ dOi
            Kk = p.K[k]
            return np.column_stack([dp[:, None] * Kk, Kk, dp])

        est = median_of_means(draws, mom, root.child(_DQ, i))
        e1, e2, e3 = est[:d], est[d : 2 * d], est[2 * d]
        out[i] = e1 - e2 * e3
        bound[i] = eps + eps**2 + eps * (np.abs(e2) + abs(e3))
    budget = ErrorBudget(bound * scale, void, {"samples_per_row": samples})
    return out * scale, budget


def estimate_dk_part_a(p: AttentionProblem, dO, tables: CdfTables, M: ShiftBound | float, s_hat, cfg: BackwardConfig, P: SoftmaxRowSampler | None = None):
    """Estimate ``A[i, j] = sum_k P[k, i] Y^(i)_kj`` with ``Y^(i)_kj = Q[k, j] <dO[k], V[i]>``.

    For each ``(i, j)`` draw ``k`` proportionally to ``Y^(i)_kj + M`` from
    the prefix tables, then ``l ~ D_k``; the hit rate of ``l = i`` times
    the normaliser estimates ``sum_k P[k, i] (Y_kj + M)``, and ``M s_hat_i``
    removes the shift. Returns ``(A_hat, bound)``.
    """
    dO = _check(p, dO)
    P = P if P is not None else row_sampler(p, cfg)
    Mv = M.M if isinstance(M, ShiftBound) else float(M)
    n, d = p.n, p.Q.shape[1]
    N = _walks(p, cfg)
    eps = cfg.epsilon
    s_hat = np.asarray(s_hat, dtype=np.float64)
    rows = np.repeat(np.arange(n), d)
    cols = np.tile(np.arange(d), n)
    norm = shifted_normalizer(tables, p.V[rows], cols, Mv)
    scale = np.abs(tables.totals).sum() * np.abs(p.V).max(initial=0.0) + n * Mv
    tol = 1e-12 * max(scale, 1.0)
    if (norm < -tol).any():
        raise DegenerateWeights("shifted normaliser is negative; the shift bound is too small")
    # an all-zero shifted distribution contributes nothing to the positive part
    live = norm > tol
    hits = np.zeros(n * d)
    gen = as_generator(RngStream(cfg.seed, (_DK_A,)))
    pairs = np.nonzero(live)[0]
    per_batch = max(1, _BATCH_DRAWS // N)
    for lo in range(0, pairs.size, per_batch):
        sel = pairs[lo : lo + per_batch]
        t = np.repeat(sel, N)
        k = sample_shifted_y_batch(tables, p.V[rows[t]], cols[t], Mv, gen, normalizer=norm[t])
        ell = P.sample(k, gen)
        hits += np.bincount(t, weights=(ell == rows[t]), minlength=n * d)
    pos = np.where(live, hits / N * np.maximum(norm, 0.0), 0.0)
    A = (pos - Mv * s_hat[rows]).reshape(n, d)
    # eps <V_i, E_j> + 2 eps n M
    bound = (eps * np.maximum(norm, 0.0) + eps * n * Mv).reshape(n, d)
    return A, bound


def estimate_row_dots(p: AttentionProblem, dO, cfg: BackwardConfig, P: SoftmaxRowSampler | None = None):
    """``D_hat_k ~ <dP_k, P_k> = E_{s ~ D_k}[<dO_k, V_s>]`` for every row.

    Row ``k`` is boosted to tolerance ``eps / max_j |Q[k, j]|`` so that
    ``X[k, j] = Q[k, j] D_k`` is within ``eps``.
    """
    dO = _check(p, dO)
    P = P if P is not None else row_sampler(p, cfg)
    n = p.n
    dlo, dhi = _dp_range(dO, p.V)
    qmax = np.abs(p.Q).max(axis=1)
    root = RngStream(cfg.seed)
    out = np.empty(n)
    void = False
    for k in range(n):
        if dhi[k] == dlo[k]:
            # every draw is the same value
            out[k] = dlo[k]
            continue
        tol = cfg.epsilon / max(qmax[k], np.finfo(float).tiny)
        mom = MoMConfig(tol, cfg.delta / n, (dhi[k] - dlo[k]) ** 2 / 4.0, max_samples=cfg.max_samples)
        void |= mom.plan()[2]
        dOk = dO[k]

        def draws(gen, size, k=k, dOk=dOk):
            return p.V[P.sample_row(k, size, gen)] @ dOk

        out[k] = median_of_means(draws, mom, root.child(_DK_D, k))
    return out, void


def estimate_dk_part_b(p: AttentionProblem, dO, s_hat, cfg: BackwardConfig, P: SoftmaxRowSampler | None = None, row_dots=None):
    """Estimate ``B = P^T X`` with ``X[k, j] = Q[k, j] <dP_k, P_k>``.

    ``X_hat`` is formed from one boosted ``D_hat_k`` per row, then each
    column goes through :func:`estimate_product`. Returns
    ``(B_hat, bound, guarantee_void)``.
    """
    dO = _check(p, dO)
    P = P if P is not None else row_sampler(p, cfg)
    n, d = p.n, p.Q.shape[1]
    eps = cfg.epsilon
    void = False
    if row_dots is None:
        row_dots, void = estimate_row_dots(p, dO, cfg, P)
    s_hat = np.asarray(s_hat, dtype=np.float64)
    N = _walks(p, cfg)
    root = RngStream(cfg.seed)
    B = np.empty((n, d))
    bound = np.empty((n, d))
    for j in range(d):
        x = p.Q[:, j] * row_dots
        B[:, j], b = estimate_product(P, x, eps, s_hat, root.child(_DK_B, j), N)
        # estimate_product budget plus the error carried in from X_hat
        bound[:, j] = b + eps * np.maximum(s_hat, 0.0) + eps**2 * n
    return B, bound, void


def estimate_dk(p: AttentionProblem, dO, cfg: BackwardConfig, P: SoftmaxRowSampler | None = None, s_hat=None):
    """``dK = A - B`` with the combined per-entry budget."""
    dO = _check(p, dO)
    if p.n == 1:
        # one key: the softmax is constant, so the key gradient vanishes
        z = np.zeros_like(p.K)
        return z, ErrorBudget(z.copy(), notes={"part_a": z.copy(), "part_b": z.copy(), "bound_a": z.copy(), "bound_b": z.copy(), "shift": 0.0})
    dO, scale = _scaled(dO, cfg)
    P = P if P is not None else row_sampler(p, cfg)
    root = RngStream(cfg.seed)
    if s_hat is None:
        s_hat = estimate_s_hat(P, cfg.epsilon, root.child(_S_HAT), _walks(p, cfg))
    tables = build_cdf_tables(p.Q, dO)
    M = shift_bound(p.Q, dO, p.V, cfg.shift_method)
    A, ba = estimate_dk_part_a(p, dO, tables, M, s_hat, cfg, P)
    B, bb, void = estimate_dk_part_b(p, dO, s_hat, cfg, P)
    budget = ErrorBudget(
        (ba + bb) * scale,
        void,
        {"part_a": A * scale, "part_b": B * scale, "bound_a": ba * scale, "bound_b": bb * scale, "shift": M.M * scale},
    )
    return (A - B) * scale, budget


def estimate_gradients(p: AttentionProblem, dO, cfg: BackwardConfig, which=("dq", "dk", "dv"), exact: GradientSet | None = None) -> GradientSet:
    """Estimate the requested gradients, sharing the sampler and ``s_hat``.

    Gradients not listed in ``which`` are taken from ``exact`` (computed by
    the caller) or left as ``None``.
    """
    t0 = time.perf_counter()
    dO = _check(p, dO)
    P = row_sampler(p, cfg)
    s_hat = None
    if "dv" in which or "dk" in which:
        s_hat = estimate_s_hat(P, cfg.epsilon, RngStream(cfg.seed, (_S_HAT,)), _walks(p, cfg))
    out, budgets = {}, {}
    for name, fn in (("dq", estimate_dq), ("dk", estimate_dk), ("dv", estimate_dv)):
        if name in which:
            kw = {} if name == "dq" else {"s_hat": s_hat}
            out[name], budgets[name] = fn(p, dO, cfg, P, **kw)
        else:
            out[name] = None if exact is None else getattr(exact, name[0] + name[1].upper())
    budgets["wall_time"] = time.perf_counter() - t0
    return GradientSet(dQ=out["dq"], dK=out["dk"], dV=out["dv"], budgets=budgets)
