"""
Diagnosing feature collapse and loss sharpness
==============================================

Two lenses on a trained model: the rectified entropy of its feature
spectrum (how evenly the representation spreads across directions) and
the dominant eigenvalue of the loss Hessian (how sharp the minimum is).
Both come with closed-form warm-ups before the real model.
"""

import numpy as np

import mecq.autodiff as ad
import mecq.data as data
import mecq.diagnostics as diag
import mecq.trainer as trainer
from mecq.trainer import TrainConfig

rng = np.random.default_rng(2)

# Entropy warm-up on hand-built spectra. One direction: zero bits. Six
# equally used directions: log2(6) bits.
flat = np.zeros((6, 20))
flat[0] = rng.normal(size=20)
print("one direction:   ", diag.rectified_entropy(flat).entropy_bits, "bits")
q, _ = np.linalg.qr(rng.normal(size=(20, 6)))
print("six equal dirs:  ", round(diag.rectified_entropy(q.T).entropy_bits, 6),
      "bits (= log2 6 =", round(np.log2(6), 6), ")")

# Hessian warm-up on an analytic quadratic with eigenvalues 1..6: the
# power iteration should report 6, the trace probe a mean of 3.5.
c = ad.constant(np.arange(1.0, 7.0))
rep = diag.hessian_spectrum(
    lambda w: ad.scale(ad.reduce_sum(ad.mul(ad.mul(w, w), c)), 0.5),
    np.ones(6), power_iters=50, probes=20, seed=0)
print(f"quadratic: max eig {rep.max_eig:.4f}  mean eig {rep.mean_eig:.4f}\n")

# Now a real model: short low-bit run on blobs, then both diagnostics.
ds = data.synth_blobs(classes=4, per_class=150, dim=24, sep=3.0, seed=5)
train_ds, val_ds = data.split_dataset(ds, 0.2, seed=5)
cfg = TrainConfig(epochs=6, batch_size=32, lr0=0.02, strength=1e-4, warmup_epochs=3,
                  seed=1, model={"kind": "mlp", "dims": [24, 32, 4]})
best, _ = trainer.train(cfg, train_ds, val_ds)
model, _, _ = trainer.model_from_checkpoint(best)
print(f"trained to val acc {best.val_acc:.3f}")

_, backbone = model.forward(ad.constant(val_ds.x))
z = np.asarray(backbone.values, np.float64).T
rep = diag.rectified_entropy(z)
print(f"feature entropy {rep.entropy_bits:.3f} bits, rank {rep.rank}/{rep.rank_ceiling}")
print("top singular values:", np.round(rep.singular_values[:5], 3))

# The flat-parameter adapter exposes the whole network as one vector so
# the curvature probe can drive it.
loss_fn, w0 = diag.flat_param_loss(model, val_ds.x, val_ds.y)
rep = diag.hessian_spectrum(loss_fn, w0, power_iters=40, probes=10, seed=0)
print(f"loss sharpness: max eig {rep.max_eig:.3f} over {w0.size} parameters "
      f"(converged: {rep.converged})")
