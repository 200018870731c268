"""Dense symmetric linear algebra on float64 arrays.

Everything here is the slow-but-transparent path: a cyclic Jacobi
eigensolver, Gram matrices, log-determinants of I + G, spectral norms and
traces of matrix polynomials. Inputs are promoted to float64 and results
are deterministic for identical inputs. Intended scale is matrices up to
a couple thousand on a side.
"""

from __future__ import annotations

import struct
from typing import Mapping, NamedTuple

import numpy as np

from .errors import DataError, NumericalError, ValidationError

# Jacobi stops when the off-diagonal Frobenius mass falls below this
# fraction of the full Frobenius norm (which rotations preserve).
JACOBI_TOL = 1e-12
JACOBI_MAX_SWEEPS = 100

# Gram eigenvalues in [PSD_CLAMP, 0) are treated as round-off and clamped
# to zero; anything below PSD_REJECT means the input was not a Gram matrix.
PSD_CLAMP = -1e-10
PSD_REJECT = -1e-6

MATRIX_MAGIC = b"MECM"


class EigResult(NamedTuple):
    eigenvalues: np.ndarray  # sorted descending
    eigenvectors: np.ndarray  # orthonormal columns, aligned with eigenvalues


def as_matrix(a, name: str = "matrix") -> np.ndarray:
    """Validate and promote to a finite 2-d float64 array."""
    m = np.asarray(a, dtype=np.float64)
    if m.ndim != 2:
        raise ValidationError(f"{name} must be 2-d, got shape {m.shape}")
    if m.size == 0:
        raise ValidationError(f"{name} must be non-empty")
    if not np.all(np.isfinite(m)):
        raise ValidationError(f"{name} contains non-finite entries")
    return m


def _require_symmetric(m: np.ndarray, name: str) -> None:
    if m.shape[0] != m.shape[1]:
        raise ValidationError(f"{name} must be square, got shape {m.shape}")
    scale = float(np.abs(m).max())
    if scale > 0.0 and float(np.abs(m - m.T).max()) > 1e-12 * scale:
        raise ValidationError(f"{name} is not symmetric")


def _offdiag_norm(a: np.ndarray) -> float:
    off = a - np.diag(np.diag(a))
    return float(np.linalg.norm(off))


def sym_eig(m) -> EigResult:
    """Full eigendecomposition of a symmetric matrix by cyclic Jacobi sweeps.

    Rotations zero one off-diagonal pair at a time; the accumulated
    rotation matrix holds the eigenvectors. Raises NumericalError with the
    residual if the off-diagonal mass has not dropped below JACOBI_TOL
    (relative to the Frobenius norm) within JACOBI_MAX_SWEEPS sweeps.
    """
    a = as_matrix(m, "sym_eig input").copy()
    _require_symmetric(a, "sym_eig input")
    n = a.shape[0]
    v = np.eye(n)
    norm = float(np.linalg.norm(a))
    if norm == 0.0:
        return EigResult(np.zeros(n), v)

    # Rotations below this size cannot move the off-diagonal mass past the
    # stopping threshold, so skipping them is safe and avoids 0/0.
    skip = 1e-16 * norm

    for _ in range(JACOBI_MAX_SWEEPS):
        if _offdiag_norm(a) <= JACOBI_TOL * norm:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if abs(apq) <= skip:
                    continue
                theta = (a[q, q] - a[p, p]) / (2.0 * apq)
                # stable root of t^2 + 2*theta*t - 1 = 0 (t = tan of the angle);
                # theta == 0 is a plain 45-degree rotation
                if theta == 0.0:
                    t = 1.0
                else:
                    t = np.sign(theta) / (abs(theta) + np.hypot(1.0, theta))
                c = 1.0 / np.hypot(1.0, t)
                s = t * c

                # two-sided rotation of rows/columns p and q
                ap, aq = a[:, p].copy(), a[:, q].copy()
                a[:, p] = c * ap - s * aq
                a[:, q] = s * ap + c * aq
                ap, aq = a[p, :].copy(), a[q, :].copy()
                a[p, :] = c * ap - s * aq
                a[q, :] = s * ap + c * aq
                a[p, q] = a[q, p] = 0.0

                vp, vq = v[:, p].copy(), v[:, q].copy()
                v[:, p] = c * vp - s * vq
                v[:, q] = s * vp + c * vq
    else:
        res = _offdiag_norm(a) / norm
        raise NumericalError(
            f"Jacobi eigensolver did not converge in {JACOBI_MAX_SWEEPS} sweeps;"
            f" relative off-diagonal residual {res:.3e}"
        )

    w = np.diag(a).copy()
    order = np.argsort(-w, kind="stable")
    return EigResult(w[order], v[:, order])


def gram(z, scale: float = 1.0) -> np.ndarray:
    """scale * Z^T Z for Z with features in columns (d x m). Output is m x m."""
    zm = as_matrix(z, "gram input")
    if not np.isscalar(scale) or not np.isfinite(scale) or scale <= 0.0:
        raise ValidationError(f"gram scale must be a positive finite scalar, got {scale!r}")
    g = float(scale) * (zm.T @ zm)
    # the product is symmetric up to round-off; make it exact
    return 0.5 * (g + g.T)


def logdet_plus_identity(g) -> float:
    """log det(I + G) for a PSD matrix G, via the eigenvalues of G.

    Eigenvalues in [PSD_CLAMP, 0) are clamped to zero; an eigenvalue below
    PSD_REJECT raises NumericalError because the input was not PSD to
    working precision.
    """
    gm = as_matrix(g, "logdet input")
    _require_symmetric(gm, "logdet input")
    w = sym_eig(gm).eigenvalues
    lo = float(w.min())
    if lo < PSD_REJECT:
        raise NumericalError(f"matrix is not PSD: smallest eigenvalue {lo:.3e}")
    w = np.where((w >= PSD_CLAMP) & (w < 0.0), 0.0, w)
    return float(np.sum(np.log1p(w)))


def spectral_norm(m) -> float:
    """Largest |eigenvalue| of a symmetric matrix."""
    a = as_matrix(m, "spectral_norm input")
    _require_symmetric(a, "spectral_norm input")
    w = sym_eig(a).eigenvalues
    return float(np.abs(w).max())


def poly_trace(g, coeffs: Mapping[int, float]) -> float:
    """Trace of a matrix polynomial: sum_j coeffs[j] * Tr(G^j).

    coeffs maps integer powers (>= 0) to real coefficients; power 0
    contributes coeffs[0] * n. Powers are evaluated by iterated
    multiplication so the cost is max-power matmuls.
    """
    gm = as_matrix(g, "poly_trace input")
    _require_symmetric(gm, "poly_trace input")
    if not coeffs:
        return 0.0
    powers = sorted(coeffs)
    if powers[0] < 0 or any(int(j) != j for j in powers):
        raise ValidationError("poly_trace powers must be integers >= 0")
    total = 0.0
    if powers and powers[0] == 0:
        total += float(coeffs[0]) * gm.shape[0]
        powers = powers[1:]
    p = None
    j = 0
    for target in powers:
        if p is None:
            p, j = gm, 1
        while j < target:
            p = p @ gm
            j += 1
        total += float(coeffs[target]) * float(np.trace(p))
    return total


def save_matrix(path, m) -> None:
    """Write a matrix as magic + u32 rows + u32 cols + row-major float64."""
    a = as_matrix(m, "save_matrix input")
    rows, cols = a.shape
    with open(path, "wb") as fh:
        fh.write(MATRIX_MAGIC)
        fh.write(struct.pack("<II", rows, cols))
        fh.write(np.ascontiguousarray(a, dtype="<f8").tobytes())


def load_matrix(path) -> np.ndarray:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 12 or raw[:4] != MATRIX_MAGIC:
        raise DataError(f"{path}: not a matrix dump (bad magic)")
    rows, cols = struct.unpack("<II", raw[4:12])
    want = 12 + 8 * rows * cols
    if len(raw) != want:
        raise DataError(f"{path}: expected {want} bytes for {rows}x{cols}, got {len(raw)}")
    if rows == 0 or cols == 0:
        raise DataError(f"{path}: empty matrix")
    return np.frombuffer(raw, dtype="<f8", offset=12).reshape(rows, cols).astype(np.float64)
