"""
Sparse versus dense attention
=============================

Sparsemax and softmax both map a score vector onto the probability simplex.
Sparsemax can put exactly zero weight on low-scoring entries, which is what
makes its attention maps easy to read.
"""

import numpy as np

from minnsa.kernels import softmax, sparsemax, sparsemax_threshold

np.set_printoptions(precision=3, suppress=True)

# %%
# A single score vector. Sparsemax subtracts a threshold and clips at zero.
z = np.array([2.0, 1.2, 0.9, -0.5, -1.0])
tau, k = sparsemax_threshold(z)
print("scores   ", z)
print("softmax  ", softmax(z))
print("sparsemax", sparsemax(z))
print("threshold", float(tau), "support size", int(k))

# %%
# Masked slots (padding in a bag) get zero weight and are ignored by the
# threshold.
mask = np.array([False, True, True, True, False])
print("masked sparsemax", sparsemax(z, mask))

# %%
# With two entries the map has a closed form: p1 = clip((z1 - z2 + 1) / 2, 0, 1).
for gap in (-1.5, -0.5, 0.0, 0.4, 2.0):
    p = sparsemax(np.array([gap, 0.0]))
    print(f"z1 - z2 = {gap:+.1f}  ->  p1 = {p[0]:.2f}")

# %%
# How often does each map produce exact zeros on wide random scores?
rng = np.random.default_rng(0)
Z = rng.normal(scale=10.0, size=(1000, 20))
print("rows with an exact zero: sparsemax", (sparsemax(Z) == 0).any(axis=1).mean(),
      "softmax", (softmax(Z) == 0).any(axis=1).mean())
print("mean support size of sparsemax:", (sparsemax(Z) > 0).sum(axis=1).mean())
