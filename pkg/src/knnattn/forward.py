"""Sub-quadratic estimators of the attention output.

Two estimators are provided. :func:`knn_attention_mom` boosts single
lazy-Gumbel draws ``V[k, j]``, ``k ~ D_i`` with median-of-means.
:func:`knn_attention_weighted` combines the exact top-k contribution with a
uniformly sampled, up-weighted set of outside keys.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from .core import MoMConfig, RngStream, as_generator, median_of_means
from .mips import LshParams, build_index
from .oracle import AttentionProblem
from .sampling import SoftmaxRowSampler, TopKSet, retrieve_topk, sample_outside

# cap (in float64 entries) on the gathered value block of the weighted estimator
_GATHER_ENTRIES = 1 << 22


@dataclass(frozen=True)
class ForwardConfig:
    k: int
    l: int = 0
    epsilon: float = 0.1
    delta: float = 0.1
    estimator: str = "weighted"
    index: str = "exact"
    causal: bool = False
    seed: int = 0
    cutoff_slack: float = 0.0
    lsh: LshParams | None = None
    mean_lower_bound: float | None = None
    max_samples: int | None = None

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("k must be at least 1")
        if self.l < 0:
            raise ValueError("l must be nonnegative")
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")
        if not 0 < self.delta < 1:
            raise ValueError("delta must lie in (0, 1)")
        if self.estimator not in ("mom", "weighted"):
            raise ValueError(f"unknown estimator {self.estimator!r}")
        if self.index not in ("exact", "lsh"):
            raise ValueError(f"unknown index backend {self.index!r}")


@dataclass
class ApproxOutput:
    O_hat: np.ndarray
    diagnostics: dict = field(default_factory=dict)


def choose_parameters(n: int, epsilon: float, delta: float) -> tuple[int, int]:
    """Smallest ``k = l`` with ``k^2 l >= 8 n^2 eps^-2 ln(4/delta)`` and
    ``k l >= 2 n eps^-2 ln(2/delta)``, clamped so that ``k <= n`` and
    ``l <= n - k``."""
    if not epsilon > 0 or not 0 < delta < 1:
        raise ValueError("need epsilon > 0 and 0 < delta < 1")
    c1 = 8.0 * n * n * math.log(4.0 / delta) / epsilon**2
    c2 = 2.0 * n * math.log(2.0 / delta) / epsilon**2
    k = max(1, math.ceil(max(c1 ** (1.0 / 3.0), math.sqrt(c2))))
    while k**3 < c1 or k * k < c2:
        k += 1
    while k > 1 and (k - 1) ** 3 >= c1 and (k - 1) ** 2 >= c2:
        k -= 1
    k_eff = min(k, n)
    return k_eff, min(k, n - k_eff)


def _topk(p: AttentionProblem, cfg: ForwardConfig, k: int) -> TopKSet:
    params = cfg.lsh
    if cfg.index == "lsh" and params is None:
        params = LshParams.auto(p.n, k, seed=cfg.seed)
    index = build_index(p.K, cfg.index, params=params, k=k)
    return retrieve_topk(p.Q, p.K, k, index=index, causal=cfg.causal)


def knn_attention_mom(p: AttentionProblem, cfg: ForwardConfig) -> ApproxOutput:
    """Median-of-means over lazy-Gumbel draws, independently per entry.

    Without ``cfg.mean_lower_bound`` the target is additive with tolerance
    ``epsilon * ||V||_inf`` and variance bound ``||V[:, j]||_inf^2``; with
    it, the boosting is multiplicative relative to that lower bound. Each
    row uses its own sub-stream of ``cfg.seed``, so rows are independent.
    """
    t0 = time.perf_counter()
    n, d = p.n, p.V.shape[1]
    k = min(cfg.k, n)
    sampler = SoftmaxRowSampler(p.Q, p.K, _topk(p, cfg, k), cfg.cutoff_slack)
    vmax = float(np.abs(p.V).max()) if p.V.size else 0.0
    var = float(np.max(p.V**2)) if p.V.size else 0.0
    # union bound over all n*d entries
    delta = cfg.delta / (n * d)
    if cfg.mean_lower_bound is None:
        eps = cfg.epsilon * max(vmax, np.finfo(float).tiny)
        mom = MoMConfig(eps, delta, var, max_samples=cfg.max_samples)
    else:
        mom = MoMConfig(cfg.epsilon, delta, var, cfg.mean_lower_bound, max_samples=cfg.max_samples)
    cols = np.arange(d)

    def draw_values(i):
        def draws(gen, size):
            idx = sampler.sample_row(i, size * d, gen).reshape(size, d)
            return p.V[idx, cols]

        return draws

    root = RngStream(cfg.seed)
    out = np.empty((n, d))
    for i in range(n):
        out[i] = median_of_means(draw_values(i), mom, root.child(i))
    groups, size, capped = mom.plan()
    diag = {
        "samples_per_entry": groups * size,
        "mean_spill": sampler.spill_total / max(sampler.draws_total, 1),
        "guarantee_void": bool(capped or vmax > max(math.log(n), 1.0)),
        "wall_time": time.perf_counter() - t0,
    }
    return ApproxOutput(out, diag)


def knn_attention_weighted(p: AttentionProblem, cfg: ForwardConfig) -> ApproxOutput:
    """Top-k plus up-weighted uniform spill estimator.

    Row ``i`` averages ``V`` over its retrieved keys ``S_i`` with weights
    ``exp(z)`` and over ``l`` uniformly drawn outside keys ``T_i`` with
    weights ``(u_i - k) / l * exp(z)``, where ``u_i`` is the number of keys
    the row may see. Scores are shifted by the row maximum before
    exponentiation and values by their column minimum, so a constant
    ``V`` is reproduced exactly and outputs stay inside the column range.
    """
    t0 = time.perf_counter()
    rng = as_generator(RngStream(cfg.seed))
    n, dv = p.n, p.V.shape[1]
    k = min(cfg.k, n)
    topk = _topk(p, cfg, k)
    t_index = time.perf_counter() - t0
    counts = np.minimum(cfg.l, topk.universe - topk.sizes)
    seg, keys = sample_outside(topk, counts, rng)

    vmin = p.V.min(axis=0)
    vmax = p.V.max(axis=0)
    Vc = p.V - vmin
    spill_z = np.einsum("ij,ij->i", p.Q[seg], p.K[keys])
    rowmax = np.where(np.isfinite(topk.scores), topk.scores, -np.inf).max(axis=1)
    if spill_z.size:
        sm = np.full(n, -np.inf)
        np.maximum.at(sm, seg, spill_z)
        rowmax = np.maximum(rowmax, sm)
    outside = topk.universe - topk.sizes
    scale = np.where(counts > 0, outside / np.maximum(counts, 1), 0.0)

    num = np.zeros((n, dv))
    den = np.zeros(n)
    block = max(1, _GATHER_ENTRIES // max(topk.width * dv, 1))
    for lo in range(0, n, block):
        hi = min(n, lo + block)
        sc = topk.scores[lo:hi]
        w = np.exp(sc - rowmax[lo:hi, None])  # -inf pads give weight 0
        idx = np.maximum(topk.indices[lo:hi], 0)
        num[lo:hi] = np.einsum("rk,rkd->rd", w, Vc[idx])
        den[lo:hi] = w.sum(axis=1)
    if spill_z.size:
        ws = scale[seg] * np.exp(spill_z - rowmax[seg])
        np.add.at(den, seg, ws)
        for c in range(dv):
            num[:, c] += np.bincount(seg, weights=ws * Vc[keys, c], minlength=n)
    out = np.clip(vmin + num / den[:, None], vmin, vmax)
    diag = {
        "k": k,
        "l": int(cfg.l),
        "spill_sizes": counts,
        "index_time": t_index,
        "wall_time": time.perf_counter() - t0,
    }
    return ApproxOutput(out, diag)


def knn_attention(p: AttentionProblem, cfg: ForwardConfig) -> ApproxOutput:
    if cfg.estimator == "mom":
        return knn_attention_mom(p, cfg)
    return knn_attention_weighted(p, cfg)
