"""
Low-rank spatial priors from inducing points
============================================

How well does a q-point feature map reproduce the dense Gram matrix,
and how fast does the gap close as q grows?
"""

import numpy as np

import spatialcausal.gp as G

rng = np.random.default_rng(1)
coords = rng.uniform(0.0, 1.0, size=(300, 2))
kernel = G.KernelSpec("exponential", sigma=1.0, lengthscale=0.3, noise=1e-8)

dense = G.gram_matrix(kernel, coords)
print("dense Gram:", dense.shape, "trace", dense.trace())

# the trace gap is the summed variance the low-rank map fails to carry
for q in (10, 25, 50, 100, 200):
    inducing = G.select_inducing(coords, q, strategy="grid")
    nmap = G.build_nystrom(inducing, kernel)
    approx = nmap.low_rank_gram(coords)
    gap = dense.trace() - approx.trace()
    worst = np.max(np.abs(dense - approx))
    print(f"q={q:3d}  trace gap {gap:8.3f}  max entry gap {worst:.4f}")

# with inducing = data the map reproduces the jittered Gram exactly
sub = coords[:64]
nmap = G.build_nystrom(G.InducingSet(sub.copy()), kernel)
target = G.gram_matrix(kernel, sub) + kernel.noise * np.eye(64)
print("full-rank max gap:", np.max(np.abs(nmap.low_rank_gram(sub) - target)))

# sampling: empirical covariance of many draws approaches K + noise*I
pts = (0.1 * np.arange(10)).reshape(-1, 1)
k2 = G.KernelSpec("rbf", sigma=1.0, lengthscale=2.0, noise=1e-6)
draws = G.sample_gp(pts, k2, seed=0, n_draws=5000)
emp = np.cov(draws, rowvar=False)
want = G.gram_matrix(k2, pts) + k2.noise * np.eye(10)
print("sampler max relative gap:", np.max(np.abs(emp - want) / np.abs(want)))

# a stationary field over a full raster, drawn in one shot
field = G.sample_gp_grid(32, 32, k2, resolution=0.1, seed=3)
print("grid field:", field.shape, "sd", field.std())
