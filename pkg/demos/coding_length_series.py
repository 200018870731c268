"""
Coding length of a feature block and its series surrogate
=========================================================

The entropy proxy behind the regularizer is a log-det coding length.
Inside the training loop it is replaced by a truncated matrix power
series; this script shows how fast the series closes in on the exact
value, and what happens when the spectrum leaves the convergence disc.
"""

import numpy as np

import mecq.linalg as linalg
import mecq.mec as mec

rng = np.random.default_rng(1)

# 32 features of dimension 24, columns normalized, distortion chosen
# adaptively so the Gram spectrum has unit mean.
cfg = mec.MecConfig()
z, ctx = mec.prepare_features(rng.normal(size=(24, 32)), cfg)
exact = mec.coding_length_exact(z, ctx)
print(f"block {ctx.d} x {ctx.m}, gram scale {ctx.gram_scale:.4f}")
print(f"exact coding length {exact:.6f}\n")

print("order   series value   rel error   in radius")
for k in (1, 2, 4, 8, 16, 32):
    sv = mec.coding_length_taylor(z, ctx, k)
    print(f"{k:5d}   {sv.value:12.6f}   {abs(sv.value - exact) / exact:.2e}   {sv.in_radius}")

# Shrink the spectrum and the same orders converge much faster.
z_small, ctx_small = mec.prepare_features(z, mec.MecConfig(eps_sq=4.0, normalize_columns=False))
norm = linalg.spectral_norm(linalg.gram(z_small, ctx_small.gram_scale))
exact_small = mec.coding_length_exact(z_small, ctx_small)
print(f"\nsame block at spectral norm {norm:.3f}:")
for k in (1, 2, 4, 8):
    sv = mec.coding_length_taylor(z_small, ctx_small, k)
    print(f"{k:5d}   {sv.value:12.6f}   {abs(sv.value - exact_small) / exact_small:.2e}")

# A spectrum pushed outside the unit disc breaks the origin expansion:
# the series is evaluated anyway but flagged as out of radius.
z_big = 3.0 * z
_, ctx_big = mec.prepare_features(z_big, mec.MecConfig(eps_sq=0.05, normalize_columns=False))
sv = mec.coding_length_taylor(z_big, ctx_big, 8)
print(f"\nout-of-radius example: value {sv.value:.2f}, in_radius {sv.in_radius}")
