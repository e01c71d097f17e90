"""Estimated attention gradients next to the exact ones.

Every estimate comes with a per-entry error budget; the script prints
the largest error and the share of entries inside the budget.
"""

import numpy as np

from knnattn import AttentionProblem, BackwardConfig, estimate_gradients, exact_gradients

n, d = 48, 3
rng = np.random.default_rng(3)
Q, K, V, dO = (rng.uniform(-1, 1, (n, d)) for _ in range(4))
p = AttentionProblem(Q, K, V)

exact = exact_gradients(p, dO)
est = estimate_gradients(p, dO, BackwardConfig(epsilon=0.1, delta=0.05, seed=0))

for name, a, b in (("dQ", est.dQ, exact.dQ), ("dK", est.dK, exact.dK), ("dV", est.dV, exact.dV)):
    budget = est.budgets[name.lower()]
    print(f"{name}: max err {np.abs(a - b).max():.4f}, inside budget {budget.within(a, b).mean():.0%}")
print(f"wall time {est.budgets['wall_time']:.1f}s")
