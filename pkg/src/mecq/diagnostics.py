"""Collapse and sharpness instruments.

rectified_entropy scores how evenly the feature spectrum spreads its mass
(0 = fully collapsed, log2(rank ceiling) = perfectly balanced). The
Hessian probes estimate the dominant eigenvalue (power iteration) and the
mean eigenvalue (Hutchinson trace / n) of the loss surface around a
parameter vector, using only finite-difference Hessian-vector products.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from . import linalg
from . import models
from .errors import NumericalError, ValidationError
from .losses import cross_entropy

RANK_TOL = 1e-6


@dataclass
class CollapseReport:
    entropy_bits: float
    rank: int
    rank_ceiling: int
    singular_values: np.ndarray  # descending
    degenerate: bool


@dataclass
class HessianReport:
    max_eig: float
    mean_eig: float
    iterations: int
    residual: float
    converged: bool
    probes: int


def rectified_entropy(z, rank_tol: float = RANK_TOL) -> CollapseReport:
    """Entropy of the singular-value distribution, scaled by rank fill.

    p_i = sigma_i / sum(sigma); H = (rank / min(d, m)) * (-sum p_i log2 p_i)
    with rank counting sigma_i > rank_tol * sigma_max. An all-zero block
    reports H = 0 with the degenerate flag set.
    """
    zm = linalg.as_matrix(z, "feature block")
    d, m = zm.shape
    n_rank = min(d, m)
    # eigenvalues of the smaller Gram side are the squared singular values
    g = zm @ zm.T if d <= m else zm.T @ zm
    g = 0.5 * (g + g.T)
    w = linalg.sym_eig(g).eigenvalues
    if w.min() < -1e-6 * max(1.0, float(w.max())):
        raise NumericalError("Gram matrix unexpectedly indefinite")
    sigma = np.sqrt(np.clip(w, 0.0, None))

    if sigma[0] == 0.0:
        return CollapseReport(0.0, 0, n_rank, sigma, True)

    rank = int(np.sum(sigma > rank_tol * sigma[0]))
    p = sigma / sigma.sum()
    nz = p[p > 0.0]
    shannon = float(-np.sum(nz * np.log2(nz)))
    h = (rank / n_rank) * shannon + 0.0  # + 0.0 folds -0.0 into 0.0
    return CollapseReport(h, rank, n_rank, sigma, False)


def _grad_at(loss_fn: Callable, w: np.ndarray) -> np.ndarray:
    wt = ad.Tensor(w.copy(), requires_grad=True)
    with ad.Tape() as tape:
        loss = loss_fn(wt)
    grads = ad.backward(tape, loss)
    return np.asarray(grads[wt], dtype=np.float64)


def hvp(loss_fn: Callable, w, v, h: float = None) -> np.ndarray:
    """Hessian-vector product by central differencing of the gradient.

    loss_fn maps a flat parameter Tensor (shape (n,)) to a scalar loss
    Tensor built from taped ops. The default step is
    1e-3 * (1 + ||w||) / ||v||.
    """
    w = np.asarray(w, dtype=np.float64).ravel()
    v = np.asarray(v, dtype=np.float64).ravel()
    if w.shape != v.shape:
        raise ValidationError(f"direction shape {v.shape} does not match parameters {w.shape}")
    vn = float(np.linalg.norm(v))
    if vn == 0.0:
        raise ValidationError("direction vector must be nonzero")
    if h is None:
        h = 1e-3 * (1.0 + float(np.linalg.norm(w))) / vn
    gp = _grad_at(loss_fn, w + h * v)
    gm = _grad_at(loss_fn, w - h * v)
    if not (np.all(np.isfinite(gp)) and np.all(np.isfinite(gm))):
        raise NumericalError("non-finite gradient while probing the Hessian")
    return (gp - gm) / (2.0 * h)


def hessian_spectrum(
    loss_fn: Callable,
    w,
    power_iters: int = 100,
    probes: int = 100,
    seed: int = 0,
    tol: float = 1e-6,
) -> HessianReport:
    """Dominant and mean Hessian eigenvalues around w.

    Power iteration with Rayleigh quotients gives the dominant (largest
    magnitude) eigenvalue; hitting the iteration cap is reported through
    converged/residual, not raised. The mean eigenvalue is the Hutchinson
    trace estimate over Rademacher probes divided by the parameter count.
    """
    if power_iters < 10:
        raise ValidationError(f"power_iters must be >= 10, got {power_iters}")
    if probes < 10:
        raise ValidationError(f"probes must be >= 10, got {probes}")
    w = np.asarray(w, dtype=np.float64).ravel()
    n = w.size
    rng = np.random.default_rng(seed)

    v = rng.normal(size=n)
    v /= np.linalg.norm(v)
    lam = 0.0
    residual = np.inf
    converged = False
    used = 0
    for used in range(1, power_iters + 1):
        hv = hvp(loss_fn, w, v)
        lam = float(v @ hv)
        residual = float(np.linalg.norm(hv - lam * v))
        if residual <= tol * max(1.0, abs(lam)):
            converged = True
            break
        nv = float(np.linalg.norm(hv))
        if nv == 0.0:
            lam = 0.0
            converged = True
            break
        v = hv / nv

    total = 0.0
    for _ in range(probes):
        r = rng.integers(0, 2, size=n) * 2.0 - 1.0  # Rademacher
        total += float(r @ hvp(loss_fn, w, r))
    mean_eig = total / probes / n

    return HessianReport(lam, mean_eig, used, residual, converged, probes)


def _slice_forward(v, *, start, stop):
    return v[start:stop]


def _slice_backward(g, v, *, start, stop):
    full = np.zeros_like(v)
    full[start:stop] = g
    return (full,)


_slice_op = ad.custom_gradient(_slice_forward, _slice_backward, name="slice_1d")


def flat_param_loss(model, x, y):
    """Task loss as a function of one flat parameter vector.

    Returns (loss_fn, w0) where w0 stacks every trainable tensor of the
    model and loss_fn(wt) re-runs the model forward with slices of wt
    substituted for its parameters (quantizers, if present, stay active
    with their calibrated steps as constants). The substitution is
    transient per call, so the model is unchanged afterwards. This is the
    adapter that lets hvp/hessian_spectrum probe a real network.
    """
    sites = models.parameter_sites(model)
    w0 = np.concatenate(
        [getattr(o, a).values.astype(np.float64).ravel() for _, o, a in sites]
    )
    x = np.asarray(x)
    y = np.asarray(y)

    def loss_fn(wt: ad.Tensor) -> ad.Tensor:
        saved = [(o, a, getattr(o, a)) for _, o, a in sites]
        try:
            off = 0
            for _, o, a in sites:
                t = getattr(o, a)
                size = t.values.size
                seg = ad.reshape(_slice_op(wt, start=off, stop=off + size), t.values.shape)
                setattr(o, a, seg)
                off += size
            logits, _ = model.forward(ad.constant(x))
            return cross_entropy(ad.transpose(logits), y)
        finally:
            for o, a, t in saved:
                setattr(o, a, t)

    return loss_fn, w0
