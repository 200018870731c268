"""Coding-length regularizer on backbone features.

Features sit in the columns of Z (d x m: dimension by batch). The exact
coding length is mu * log det(I_m + lambda_g Z^T Z). Training never pays
for the determinant: it uses truncated matrix-series surrogates expanded
at one or several points a >= 0, mixed by a small learned gate. Each
series converges where ||X - aI||_2 < 1 + a, so a grid of points covers a
much wider eigenvalue range than the plain expansion at zero.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple, Optional, Union

import numpy as np

from . import autodiff as ad
from . import linalg
from .errors import ValidationError

ZERO_COLUMN_TOL = 0.0  # a column is "zero" only if its norm is exactly 0


@dataclass(frozen=True)
class MecConfig:
    eps_sq: Union[float, str] = "adaptive"
    order: int = 2
    points: tuple = (0.0, 1.0, 3.0, 7.0)
    experts: Optional[int] = None  # defaults to len(points)
    maximize_entropy: bool = True
    normalize_columns: bool = True

    def __post_init__(self):
        pts = tuple(float(a) for a in self.points)
        object.__setattr__(self, "points", pts)
        n = len(pts) if self.experts is None else int(self.experts)
        object.__setattr__(self, "experts", n)
        if n != len(pts):
            raise ValidationError(f"experts={n} but {len(pts)} points given")
        if n < 1:
            raise ValidationError("need at least one expansion point")
        if any(a < 0 for a in pts):
            raise ValidationError("expansion points must be >= 0")
        if any(b <= a for a, b in zip(pts, pts[1:])):
            raise ValidationError("expansion points must be strictly increasing")
        if self.order < 1:
            raise ValidationError(f"series order must be >= 1, got {self.order}")
        if isinstance(self.eps_sq, str):
            if self.eps_sq != "adaptive":
                raise ValidationError(f"eps_sq must be positive or 'adaptive', got {self.eps_sq!r}")
        elif not (self.eps_sq > 0):
            raise ValidationError(f"eps_sq must be positive, got {self.eps_sq}")


@dataclass(frozen=True)
class CodingContext:
    """Per-batch constants: mu = (m+d)/2 and the Gram scale d/(m*eps^2)."""

    m: int
    d: int
    mu: float
    gram_scale: float


class SeriesValue(NamedTuple):
    value: float
    in_radius: bool  # False means the truncated series is outside its convergence disc


class GatingNet:
    """Linear gate on mean-pooled features, softmaxed into expert weights.

    Zero init makes the initial mix exactly uniform.
    """

    def __init__(self, n_experts: int, feature_dim: int):
        if n_experts < 1 or feature_dim < 1:
            raise ValidationError("gating net needs n_experts >= 1 and feature_dim >= 1")
        self.weight = ad.Tensor(np.zeros((n_experts, feature_dim)), requires_grad=True)

    @property
    def n_experts(self) -> int:
        return self.weight.values.shape[0]


def series_coeff(a: float, j: int) -> float:
    """Coefficient of Tr((X - aI)^j) in the expansion of log det(I + X)."""
    return (-1.0) ** (j + 1) / (j * (1.0 + a) ** j)


def _normalize_columns_np(z: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(z, axis=0, keepdims=True)
    safe = np.where(norms > ZERO_COLUMN_TOL, norms, 1.0)
    return z / safe


def prepare_features(z_raw, cfg: MecConfig):
    """Normalize a raw d x m feature block and fix the batch constants.

    Returns (Z, CodingContext). With adaptive eps^2 the Gram scale is set
    so trace(lambda_g Z^T Z) == m, i.e. the mean Gram eigenvalue is 1.
    """
    if isinstance(z_raw, ad.Tensor):
        z_raw = z_raw.values
    z = linalg.as_matrix(z_raw, "feature block")
    d, m = z.shape
    if cfg.normalize_columns:
        z = _normalize_columns_np(z)
    sq = float(np.sum(z * z))
    if cfg.eps_sq == "adaptive":
        if sq == 0.0:
            raise ValidationError("degenerate batch: all features are zero")
        gram_scale = m / sq
        eps_sq = d / (m * gram_scale)
    else:
        eps_sq = float(cfg.eps_sq)
        gram_scale = d / (m * eps_sq)
    return z, CodingContext(m=m, d=d, mu=(m + d) / 2.0, gram_scale=gram_scale)


def _check_ctx(z: np.ndarray, ctx: CodingContext):
    if z.shape != (ctx.d, ctx.m):
        raise ValidationError(f"feature block {z.shape} does not match context ({ctx.d}, {ctx.m})")


def coding_length_exact(z, ctx: CodingContext) -> float:
    """mu * log det(I_m + lambda_g Z^T Z), natural log."""
    z = linalg.as_matrix(z, "feature block")
    _check_ctx(z, ctx)
    g = linalg.gram(z, ctx.gram_scale)
    return ctx.mu * linalg.logdet_plus_identity(g)


def expert_length(z, ctx: CodingContext, a: float, k: int) -> SeriesValue:
    """Truncated series for the coding length expanded at X = a*I.

    L_a = mu * [ m*ln(1+a) + sum_{j=1..k} c_j(a) * Tr((X - aI)^j) ]
    with X = lambda_g Z^T Z. in_radius reports ||X - aI||_2 < 1 + a.
    """
    if a < 0:
        raise ValidationError(f"expansion point must be >= 0, got {a}")
    if k < 1:
        raise ValidationError(f"series order must be >= 1, got {k}")
    z = linalg.as_matrix(z, "feature block")
    _check_ctx(z, ctx)
    x = linalg.gram(z, ctx.gram_scale)
    d = x - a * np.eye(ctx.m)
    in_radius = linalg.spectral_norm(d) < 1.0 + a
    coeffs = {j: series_coeff(a, j) for j in range(1, k + 1)}
    val = ctx.mu * (ctx.m * math.log1p(a) + linalg.poly_trace(d, coeffs))
    return SeriesValue(float(val), bool(in_radius))


def coding_length_taylor(z, ctx: CodingContext, k: int) -> SeriesValue:
    """Series expanded at zero; converges where ||lambda_g Z^T Z||_2 < 1."""
    return expert_length(z, ctx, 0.0, k)


# ---------------------------------------------------------------------------
# differentiable path (tape ops only)


def _normalize_fwd(v):
    return _normalize_columns_np(np.asarray(v, dtype=np.float64))


def _normalize_bwd(g, v):
    v = np.asarray(v, dtype=np.float64)
    norms = np.linalg.norm(v, axis=0, keepdims=True)
    safe = np.where(norms > ZERO_COLUMN_TOL, norms, 1.0)
    y = v / safe
    # d(v/||v||) pulls out the radial component; zero columns pass through
    return (g - y * np.sum(y * g, axis=0, keepdims=True)) / safe


normalize_columns = ad.custom_gradient(_normalize_fwd, _normalize_bwd, name="normalize_columns")


def _promote64_fwd(v):
    return np.asarray(v, dtype=np.float64)


def _promote64_bwd(g, v):
    return g  # backward() casts to the input dtype on accumulation


promote64 = ad.custom_gradient(_promote64_fwd, _promote64_bwd, name="promote64")


def _softmax_fwd(v, axis=0):
    s = v - v.max(axis=axis, keepdims=True)
    e = np.exp(s)
    return e / e.sum(axis=axis, keepdims=True)


def _softmax_bwd(g, v, axis=0):
    p = _softmax_fwd(v, axis=axis)
    return p * (g - np.sum(p * g, axis=axis, keepdims=True))


softmax_probs = ad.custom_gradient(_softmax_fwd, _softmax_bwd, name="softmax_probs")


def gate(z, gnet: GatingNet) -> ad.Tensor:
    """Expert weights: softmax(W_g @ column_mean(Z)), an (n, 1) tensor."""
    zt = ad.as_tensor(z)
    if zt.values.ndim != 2:
        raise ValidationError(f"gate input must be 2-d, got shape {zt.values.shape}")
    if gnet.weight.values.shape[1] != zt.values.shape[0]:
        raise ValidationError(
            f"gating weight is {gnet.weight.values.shape}, features have dimension {zt.values.shape[0]}"
        )
    pooled = ad.reduce_mean(zt, axis=1, keepdims=True)  # (d, 1)
    logits = ad.matmul(gnet.weight, pooled)  # (n, 1)
    return softmax_probs(logits, axis=0)


def _expert_series_tensor(x: ad.Tensor, ctx: CodingContext, a: float, k: int) -> ad.Tensor:
    """Tape-op version of expert_length on a precomputed X = lambda_g Z^T Z."""
    eye = ad.constant(np.eye(ctx.m))
    d = ad.add(x, ad.constant(-a * np.eye(ctx.m)))
    total = ad.constant(np.float64(ctx.mu * ctx.m * math.log1p(a)))
    p = None
    for j in range(1, k + 1):
        p = d if p is None else ad.matmul(p, d)
        tr = ad.reduce_sum(ad.mul(p, eye))
        total = ad.add(total, ad.scale(tr, ctx.mu * series_coeff(a, j)))
    return total


def mec_loss(z, cfg: MecConfig, gnet: GatingNet, ctx: CodingContext) -> ad.Tensor:
    """Gated mixture of truncated-series coding lengths; a scalar Tensor.

    Gradients flow to Z (through normalization, the Gram, and the gate)
    and to the gating weights. ctx is treated as a per-batch constant, so
    the adaptive Gram scale does not contribute gradient terms.
    """
    zt = ad.as_tensor(z)
    if zt.values.ndim != 2:
        raise ValidationError(f"mec_loss input must be 2-d, got shape {zt.values.shape}")
    _check_ctx(zt.values, ctx)
    if gnet.n_experts != cfg.experts:
        raise ValidationError(f"gating net has {gnet.n_experts} experts, config wants {cfg.experts}")

    zn = normalize_columns(zt) if cfg.normalize_columns else promote64(zt)
    x = ad.scale(ad.matmul(zn, zn, transpose_a=True), ctx.gram_scale)  # (m, m)

    weights = gate(zn, gnet)  # (n, 1)
    total = None
    for i, a in enumerate(cfg.points):
        li = _expert_series_tensor(x, ctx, a, cfg.order)  # scalar
        pick = np.zeros((cfg.experts, 1))
        pick[i, 0] = 1.0
        wi = ad.reduce_sum(ad.mul(weights, ad.constant(pick)))  # scalar weight i
        term = ad.mul(wi, li)
        total = term if total is None else ad.add(total, term)
    return total
