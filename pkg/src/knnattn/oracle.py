"""Exact O(n^2 d) attention and gradients used as ground truth."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np


@dataclass(frozen=True)
class AttentionProblem:
    """Query, key and value matrices with an optional causal mask.

    Any ``1/sqrt(d)`` scaling is expected to be folded into ``K`` already;
    see :func:`prefold_scale`.
    """

    Q: np.ndarray
    K: np.ndarray
    V: np.ndarray
    causal: bool = False

    def __post_init__(self):
        arrs = []
        for name in ("Q", "K", "V"):
            a = np.ascontiguousarray(getattr(self, name), dtype=np.float64)
            if a.ndim != 2:
                raise ValueError(f"{name} must be a 2-d matrix")
            if not np.isfinite(a).all():
                raise ValueError(f"{name} has non-finite entries")
            object.__setattr__(self, name, a)
            arrs.append(a)
        if not (arrs[0].shape == arrs[1].shape and arrs[0].shape[0] == arrs[2].shape[0]):
            raise ValueError("Q and K must be n x d and V must have n rows")

    @property
    def n(self) -> int:
        return self.Q.shape[0]

    @property
    def d(self) -> int:
        return self.Q.shape[1]


@dataclass
class GradientSet:
    dQ: np.ndarray
    dK: np.ndarray
    dV: np.ndarray
    budgets: dict = field(default_factory=dict)


def prefold_scale(K: np.ndarray) -> np.ndarray:
    """Fold the usual ``1/sqrt(d)`` score scaling into the keys."""
    K = np.asarray(K, dtype=np.float64)
    return K / np.sqrt(K.shape[1])


def scores(p: AttentionProblem) -> np.ndarray:
    """Raw score matrix ``Q K^T`` with masked entries set to ``-inf``."""
    A = p.Q @ p.K.T
    if p.causal:
        A[np.triu_indices(p.n, k=1)] = -np.inf
    return A


def softmax_matrix(p: AttentionProblem) -> np.ndarray:
    """Row-stochastic matrix P = softmax(Q K^T), max-subtracted per row."""
    A = scores(p)
    A -= A.max(axis=1, keepdims=True)
    np.exp(A, out=A)
    A /= A.sum(axis=1, keepdims=True)
    return A


def exact_attention(p: AttentionProblem) -> np.ndarray:
    return softmax_matrix(p) @ p.V


def exact_dp(dO: np.ndarray, V: np.ndarray) -> np.ndarray:
    """``D^P[i, j] = <dO[i], V[j]>``."""
    return np.asarray(dO, dtype=np.float64) @ np.asarray(V, dtype=np.float64).T


def exact_gradients(p: AttentionProblem, dO: np.ndarray) -> GradientSet:
    dO = np.asarray(dO, dtype=np.float64)
    if dO.shape != (p.n, p.V.shape[1]):
        raise ValueError("dO must have the shape of the attention output")
    P = softmax_matrix(p)
    DP = exact_dp(dO, p.V)
    # dS = P * (DP - rowwise <DP_i, P_i>)
    dS = P * (DP - np.einsum("ij,ij->i", DP, P)[:, None])
    return GradientSet(dQ=dS @ p.K, dK=dS.T @ p.Q, dV=P.T @ dO)


def exact_dk_parts(p: AttentionProblem, dO: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Split ``dK = A - B`` with ``A = (P * DP)^T Q`` and
    ``B = P^T (diag(<DP_k, P_k>) Q)``."""
    P = softmax_matrix(p)
    DP = exact_dp(dO, p.V)
    A = (P * DP).T @ p.Q
    rowdot = np.einsum("ij,ij->i", DP, P)
    B = P.T @ (rowdot[:, None] * p.Q)
    return A, B


def finite_diff_gradients(
    p: AttentionProblem,
    loss: Callable[[np.ndarray], float],
    h: float = 1e-5,
) -> GradientSet:
    """Central-difference gradient of ``loss(exact_attention(.))`` with
    respect to every entry of Q, K and V."""
    if not h > 0:
        raise ValueError("step h must be positive")
    mats = {"Q": p.Q, "K": p.K, "V": p.V}
    grads = {}
    for name, M in mats.items():
        g = np.zeros_like(M)
        for idx in np.ndindex(M.shape):
            vals = []
            for step in (h, -h):
                W = M.copy()
                W[idx] += step
                q = AttentionProblem(**{**mats, name: W}, causal=p.causal)
                vals.append(loss(exact_attention(q)))
            g[idx] = (vals[0] - vals[1]) / (2 * h)
        grads[name] = g
    return GradientSet(dQ=grads["Q"], dK=grads["K"], dV=grads["V"])
