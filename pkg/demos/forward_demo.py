"""Forward pass with the top-k plus spill estimator.

Sweeps k on one random instance and prints the mean and max entry error
against exact attention, then the time of both at a larger size.
"""

import time

import numpy as np

from knnattn import AttentionProblem, ForwardConfig, exact_attention, knn_attention, prefold_scale

n, d = 1024, 16
rng = np.random.default_rng(0)
Q, K, V = (rng.uniform(-2, 2, (n, d)) for _ in range(3))
p = AttentionProblem(Q, prefold_scale(K), V)
O = exact_attention(p)

print(" k     mean err   max err")
for k in (4, 16, 32, 128, 256, n):
    out = knn_attention(p, ForwardConfig(k=k, l=min(k, n - k), seed=1)).O_hat
    err = np.abs(out - O)
    print(f"{k:4d}   {err.mean():.5f}    {err.max():.5f}")

n = 8192
Q, K, V = (rng.uniform(-1, 1, (n, d)) for _ in range(3))
p = AttentionProblem(Q, prefold_scale(K), V)
k = int(np.ceil(n ** (2 / 3)))
t0 = time.perf_counter()
knn_attention(p, ForwardConfig(k=k, l=k, index="lsh"))
t1 = time.perf_counter()
exact_attention(p)
t2 = time.perf_counter()
print(f"n={n}: estimator {1000 * (t1 - t0):.0f} ms, exact {1000 * (t2 - t1):.0f} ms")
