"""Fake quantization: range observers, calibration, and the quantize op.

The forward clips and rounds onto 2^bits uniform levels and immediately
dequantizes; the backward is straight-through inside the representable
range and zero outside. Step sizes can stay trainable after calibration,
zero points are frozen integers.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import DataError, ValidationError

STEP_FLOOR = 1e-8


def round_half_away(x):
    """Round with ties away from zero (np.round ties to even, which would
    shift quantization levels)."""
    x = np.asarray(x)
    return np.floor(np.abs(x) + 0.5) * np.sign(x)


@dataclass(frozen=True)
class QuantSpec:
    """Static description of one quantization site."""

    bits: int
    granularity: str = "per_tensor"  # or "per_channel"
    channel_axis: int = 0
    symmetric: bool = False
    learnable: bool = True
    role: str = "activation"  # or "weight"

    def __post_init__(self):
        if not (2 <= self.bits <= 8):
            raise ValidationError(f"bits must be in [2, 8], got {self.bits}")
        if self.granularity not in ("per_tensor", "per_channel"):
            raise ValidationError(f"unknown granularity {self.granularity!r}")
        if self.role not in ("weight", "activation"):
            raise ValidationError(f"unknown role {self.role!r}")
        if self.granularity == "per_channel" and self.role != "weight":
            raise ValidationError("per_channel granularity is for weights only")

    @property
    def levels(self) -> int:
        return 2**self.bits - 1

    def with_bits(self, bits: int) -> "QuantSpec":
        return QuantSpec(bits, self.granularity, self.channel_axis, self.symmetric, self.learnable, self.role)


@dataclass
class QuantParams:
    """Calibrated step and zero point; arrays are scalars () or (C,)."""

    step: np.ndarray
    zero_point: np.ndarray


class ObserverState:
    """Running min/max of everything observed so far."""

    def __init__(self, spec: QuantSpec):
        self.spec = spec
        self.min = None
        self.max = None
        self.count = 0


def _channel_view(v: np.ndarray, axis: int) -> np.ndarray:
    # (C, rest) view for per-channel reductions
    return np.moveaxis(v, axis, 0).reshape(v.shape[axis], -1)


def observe(state: ObserverState, x) -> ObserverState:
    v = x.values if isinstance(x, ad.Tensor) else np.asarray(x)
    if not np.all(np.isfinite(v)):
        raise DataError("observed tensor contains non-finite values")
    if state.spec.granularity == "per_channel":
        flat = _channel_view(v, state.spec.channel_axis)
        mn, mx = flat.min(axis=1), flat.max(axis=1)
    else:
        mn, mx = v.min(), v.max()
    mn = np.asarray(mn, dtype=np.float64)
    mx = np.asarray(mx, dtype=np.float64)
    if state.count == 0:
        state.min, state.max = mn, mx
    else:
        if state.min.shape != mn.shape:
            raise ValidationError("observed tensor changed channel count mid-calibration")
        state.min = np.minimum(state.min, mn)
        state.max = np.maximum(state.max, mx)
    state.count += 1
    return state


def calibrate(state: ObserverState, spec: QuantSpec, floor_degenerate: bool = False) -> QuantParams:
    """Turn observed ranges into (step, zero_point).

    Asymmetric: step spans [min, max]; zero_point = clip(round(-min/step)).
    Symmetric: step spans [-bound, bound] with bound = max(|min|, |max|)
    and the zero point pinned to mid-range.

    A zero-width range is rejected unless floor_degenerate is set, in
    which case the step is floored at STEP_FLOOR with zero_point 0 and a
    warning.
    """
    if state.count == 0:
        raise ValidationError("calibrate before any observations")
    n = spec.levels
    xmin = np.asarray(state.min, dtype=np.float64)
    xmax = np.asarray(state.max, dtype=np.float64)

    if spec.symmetric:
        bound = np.maximum(np.abs(xmin), np.abs(xmax))
        step = 2.0 * bound / n
        zero = np.full_like(step, float(2 ** (spec.bits - 1)))
    else:
        step = (xmax - xmin) / n

    degenerate = step <= 0.0
    if np.any(degenerate):
        if not floor_degenerate:
            raise ValidationError("degenerate calibration range: max == min over observations")
        warnings.warn("degenerate calibration range, flooring step", RuntimeWarning)
        step = np.where(degenerate, STEP_FLOOR, step)

    if not spec.symmetric:
        zero = np.clip(round_half_away(-xmin / step), 0, n)
        zero = np.where(degenerate, 0.0, zero)

    return QuantParams(step=np.asarray(step, dtype=np.float64), zero_point=np.asarray(zero, dtype=np.int64))


def _broadcast_shape(param: np.ndarray, ndim: int, axis: int):
    if param.ndim == 0:
        return param
    shape = [1] * ndim
    shape[axis] = param.shape[0]
    return param.reshape(shape)


def _fq_forward(v, step, *, zero, bits, axis, step_grad_scale=None):
    n = float(2**bits - 1)
    s = _broadcast_shape(step, v.ndim, axis)
    z = _broadcast_shape(zero, v.ndim, axis)
    pre = round_half_away(v / s) + z
    return (np.clip(pre, 0.0, n) - z) * s


def _fq_backward(g, v, step, *, zero, bits, axis, step_grad_scale=None):
    n = float(2**bits - 1)
    s = _broadcast_shape(step, v.ndim, axis)
    z = _broadcast_shape(zero, v.ndim, axis)
    ratio = v / s
    pre = round_half_away(ratio) + z
    inside = (pre >= 0.0) & (pre <= n)
    gx = g * inside  # straight-through estimate on the clipped round

    if step_grad_scale is None:
        return gx, None
    # trainable step: d(out)/d(step) is round(v/s) - v/s inside the range
    # and the saturated level outside
    d = np.where(inside, round_half_away(ratio) - ratio, np.where(pre < 0.0, -z, n - z))
    gs = g * d
    if step.ndim == 0:
        gs = np.asarray(gs.sum())
    else:
        keep = axis % v.ndim
        gs = gs.sum(axis=tuple(i for i in range(v.ndim) if i != keep))
    return gx, gs * step_grad_scale


_fake_quant_op = ad.custom_gradient(_fq_forward, _fq_backward, name="fake_quant")


def fake_quant(x, params: QuantParams, bits: int, channel_axis: int = 0) -> ad.Tensor:
    """Fake-quantize with frozen calibration params (no step gradient)."""
    return fake_quant_ste(x, params.step, params.zero_point, bits, channel_axis)


def fake_quant_ste(x, step, zero_point, bits: int, channel_axis: int = 0,
                   step_grad_scale=None) -> ad.Tensor:
    """The quantize op. `step` may be a trainable Tensor; when
    step_grad_scale is given its gradient follows the learned-step rule
    scaled by that factor. zero_point is always frozen."""
    xt = ad.as_tensor(x)
    st = ad.as_tensor(step)
    if np.any(st.values <= 0.0):
        raise ValidationError("quantization step must be positive")
    zero = np.asarray(zero_point, dtype=np.float64)
    if np.any(zero < 0) or np.any(zero > 2**bits - 1):
        raise ValidationError("zero_point outside representable range")
    if st.values.ndim not in (0, 1) or st.values.shape != zero.shape:
        raise ValidationError(
            f"step shape {st.values.shape} and zero_point shape {zero.shape} must match and be scalar or 1-d"
        )
    return _fake_quant_op(
        xt, st, zero=zero, bits=bits, axis=channel_axis, step_grad_scale=step_grad_scale
    )


class TensorQuantizer:
    """One quantization site: observe ranges, freeze params, then quantize.

    While `observing` is set, calls pass inputs through untouched and fold
    them into the running range. After freeze(), calls apply fake_quant
    with the calibrated params; if the spec is learnable the step lives in
    a requires_grad Tensor suitable for an optimizer group.
    """

    def __init__(self, spec: QuantSpec, name: str = "quantizer"):
        self.spec = spec
        self.name = name
        self.observer = ObserverState(spec)
        self.params: QuantParams | None = None
        self.step_tensor: ad.Tensor | None = None
        self.observing = False

    def freeze(self, floor_degenerate: bool = True, dtype=np.float32):
        self.params = calibrate(self.observer, self.spec, floor_degenerate=floor_degenerate)
        self.observing = False
        if self.spec.learnable:
            self.step_tensor = ad.Tensor(self.params.step.astype(dtype), requires_grad=True)

    def set_params(self, step: np.ndarray, zero_point: np.ndarray, dtype=np.float32):
        """Install params directly (checkpoint load path)."""
        self.params = QuantParams(np.asarray(step, dtype=np.float64),
                                  np.asarray(zero_point, dtype=np.int64))
        self.observing = False
        if self.spec.learnable:
            self.step_tensor = ad.Tensor(np.asarray(step, dtype=dtype), requires_grad=True)

    def current_step(self) -> np.ndarray:
        if self.step_tensor is not None:
            return self.step_tensor.values
        return self.params.step

    def clamp_step(self):
        # optimizer steps can push the scale to or below zero; keep it valid
        if self.step_tensor is not None:
            np.maximum(self.step_tensor.values, STEP_FLOOR, out=self.step_tensor.values)

    def grad_scale(self, numel: int) -> float:
        per_channel = numel
        if self.params is not None and self.params.step.ndim == 1:
            per_channel = max(1, numel // self.params.step.shape[0])
        return 1.0 / np.sqrt(per_channel * self.spec.levels)

    def __call__(self, x) -> ad.Tensor:
        xt = ad.as_tensor(x)
        if self.observing:
            observe(self.observer, xt.values)
            return xt
        if self.params is None:
            raise ValidationError(f"{self.name}: used before calibration")
        if self.step_tensor is not None:
            return fake_quant_ste(
                xt,
                self.step_tensor,
                self.params.zero_point,
                self.spec.bits,
                self.spec.channel_axis,
                step_grad_scale=self.grad_scale(xt.values.size),
            )
        return fake_quant(xt, self.params, self.spec.bits, self.spec.channel_axis)


class QuantizedLayer:
    """Wraps a weighted layer with a weight quantizer and an input quantizer."""

    def __init__(self, inner, weight_spec: QuantSpec, act_spec: QuantSpec, name: str = "layer"):
        self.inner = inner
        self.name = name
        self.weight_q = TensorQuantizer(weight_spec, name=f"{name}.weight_q")
        self.input_q = TensorQuantizer(act_spec, name=f"{name}.input_q")

    def set_observing(self, flag: bool):
        self.weight_q.observing = flag
        self.input_q.observing = flag

    def freeze(self, floor_degenerate: bool = True):
        self.weight_q.freeze(floor_degenerate)
        self.input_q.freeze(floor_degenerate)

    def forward(self, x) -> ad.Tensor:
        x = self.input_q(x)
        if self.weight_q.observing:
            observe(self.weight_q.observer, self.inner.weight.values)
            w = self.inner.weight
        else:
            w = self.weight_q(self.inner.weight)
        return self.inner.forward_with_weight(x, w)

    @property
    def weight(self):
        return self.inner.weight

    def quantizers(self):
        return [("weight", self.weight_q), ("input", self.input_q)]


def wrap_layer(layer, weight_spec: QuantSpec, act_spec: QuantSpec,
               force_bits: int | None = None, name: str = "layer") -> QuantizedLayer:
    """Wrap one layer; force_bits overrides both specs (protocol pins the
    first and last layers at 8 bits regardless of the global setting)."""
    if force_bits is not None:
        weight_spec = weight_spec.with_bits(force_bits)
        act_spec = act_spec.with_bits(force_bits)
    return QuantizedLayer(layer, weight_spec, act_spec, name=name)


def export_quant_params(named_quantizers) -> dict:
    """JSON-ready dump of every calibrated site: step, zero point, bits."""
    sites = {}
    for name, q in named_quantizers:
        if q.params is None:
            continue
        sites[name] = {
            "bits": q.spec.bits,
            "granularity": q.spec.granularity,
            "symmetric": q.spec.symmetric,
            "step": np.asarray(q.current_step(), dtype=float).ravel().tolist(),
            "zero_point": np.asarray(q.params.zero_point).ravel().tolist(),
        }
    return sites


def export_quant_params_json(named_quantizers) -> str:
    return json.dumps(export_quant_params(named_quantizers), indent=2, sort_keys=True)
