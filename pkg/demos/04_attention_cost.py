"""
How attention cost grows with the number of tokens
==================================================

Spiking self-attention multiplies ``Q K^T`` and then ``V``, so its cost grows
with the square of the token count N. Pooling attention touches each token's
3x3 neighbourhood only, so it grows linearly. The "core" scope below times
just the token mixing. The "block" scope adds the projections, which are
linear in N and dominate at small N.
"""

import numpy as np

from spikepool.attention import AttentionVariant, bench_attention

ssa, pool = AttentionVariant("ssa"), AttentionVariant("pool_max2d")
for scope in ("core", "block"):
    print(f"\nscope={scope}, D=256, T=4")
    means = {"ssa": [], "pool_max2d": []}
    ns = (64, 128, 256, 512)
    for n in ns:
        rep = bench_attention(ssa, pool, (4, 1, n, 256), trials=5, warmup=2, scope=scope)
        for k in means:
            means[k].append(rep.mean(k))
        print(f"  N={n:4d}  ssa {rep.mean('ssa'):7.1f} ms   pool {rep.mean('pool_max2d'):7.1f} ms")
    for k, v in means.items():
        print(f"  log-log slope {k}: {np.polyfit(np.log(ns), np.log(v), 1)[0]:.2f}")
