"""
Fake quantization from calibration to gradients
===============================================

Walks one tensor through the full low-bit pipeline: observe its range,
derive an affine grid, quantize, and inspect the straight-through
gradients that make the operation trainable.
"""

import numpy as np

import mecq.autodiff as ad
import mecq.quant as quant

rng = np.random.default_rng(0)

# A skewed activation batch: mostly positive with a short negative tail,
# the kind of range an asymmetric grid is built for.
x = np.concatenate([rng.uniform(-0.2, 1.5, 500), [-0.2, 1.5]])

spec = quant.QuantSpec(bits=4, granularity="per_tensor", role="activation", learnable=False)
state = quant.observe(quant.ObserverState(spec), x)
params = quant.calibrate(state, spec)
print(f"observed range [{state.min}, {state.max}]")
print(f"step {float(params.step):.6f}  zero point {float(params.zero_point)}")

# Quantize: every output lands on one of at most 2^bits grid levels, and
# re-quantizing is a no-op.
y = quant.fake_quant(x, params, spec.bits).values
levels = np.unique(y)
print(f"{levels.size} distinct levels (max {2 ** spec.bits})")
print("idempotent:", np.array_equal(quant.fake_quant(y, params, spec.bits).values, y))

# Weights get one grid per output channel. Scaling a single row only
# moves that row's step.
w = rng.normal(size=(3, 16))
w[2] *= 8.0
wspec = quant.QuantSpec(bits=3, granularity="per_channel", channel_axis=0, role="weight",
                        learnable=False)
wp = quant.calibrate(quant.observe(quant.ObserverState(wspec), w), wspec)
print("per-channel steps:", np.round(wp.step, 4))

# The backward pass: inputs inside the representable range pass their
# gradient straight through, saturated inputs block it.
xt = ad.Tensor(np.array([-5.0, 0.3, 0.9, 7.0]), requires_grad=True)
with ad.Tape() as tape:
    out = quant.fake_quant_ste(xt, float(params.step), float(params.zero_point), spec.bits)
    loss = ad.reduce_sum(out)
g = ad.backward(tape, loss)[xt]
print("input grad mask:", g, "(saturated entries get zero)")
