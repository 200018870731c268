"""
Low-bit training with and without the entropy term
==================================================

Trains the same small network twice on synthetic Gaussian clusters:
once as a plain low-bit run, once with the coding-length regularizer
switched on. Prints the per-epoch trace and the resulting feature
entropy side by side.
"""

import numpy as np

import mecq.autodiff as ad
import mecq.data as data
import mecq.diagnostics as diag
import mecq.trainer as trainer
from mecq.trainer import TrainConfig

ds = data.synth_blobs(classes=5, per_class=200, dim=32, sep=2.5, seed=11)
train_ds, val_ds = data.split_dataset(ds, 0.2, seed=11)
print(f"{len(train_ds)} train / {len(val_ds)} val samples, {ds.classes} classes")

# Batch size matches the backbone width so each batch can span the whole
# feature space, which is the regime the expansion points are placed for.
common = dict(w_bits=2, a_bits=4, epochs=8, batch_size=32, lr0=0.02,
              strength=1e-4, warmup_epochs=4, seed=0,
              model={"kind": "mlp", "dims": [32, 32, 5]})

results = {}
for name, extra in (("plain", {"baseline_mode": True}), ("regularized", {})):
    cfg = TrainConfig(**common, **extra)
    best, metrics = trainer.train(cfg, train_ds, val_ds)
    print(f"\n--- {name} ---")
    for row in metrics:
        print(f"epoch {row['epoch']:2d}  lr {row['lr']:.4f}  lambda {row['lambda']:.2e}  "
              f"task {row['task']:.4f}  val acc {row['val_acc']:.3f}")
    model, _, _ = trainer.model_from_checkpoint(best)
    _, backbone = model.forward(ad.constant(val_ds.x))
    rep = diag.rectified_entropy(np.asarray(backbone.values, np.float64).T)
    results[name] = (best.val_acc, rep)

print("\nsummary")
for name, (acc, rep) in results.items():
    print(f"{name:12s} val acc {acc:.3f}   feature entropy {rep.entropy_bits:.3f} bits"
          f"   rank {rep.rank}/{rep.rank_ceiling}")
