"""Dense symmetric linear-algebra kernels.

Everything downstream (model assembly, constraint handling, both inference
stages) is built on the four operations here: Cholesky factorization,
eigenvalue-cutoff pseudoinverse, the low-rank covariance update used to fold
likelihood information into a (possibly singular) prior covariance, and
Kronecker products for interaction structures.

All matrices are plain dense row-major ``numpy`` arrays; there is no sparse
path anywhere in the package.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .errors import (
    DimensionOverflow,
    NonFiniteInput,
    NotPositiveDefinite,
    SingularInnerSystem,
)

# Relative eigenvalue cutoff below which a PSD matrix is treated as singular.
DEFAULT_EIG_TOL = 1e-9

# Dense matrices above this dimension do not fit the desk-scale memory budget.
MAX_KRON_DIM = 32768

SYMMETRY_RTOL = 1e-12


def require_symmetric(m: np.ndarray, rtol: float = SYMMETRY_RTOL) -> np.ndarray:
    """Validate that ``m`` is a finite symmetric square matrix.

    Returns the symmetrized float64 copy, 0.5 * (M + M^T), so downstream
    code can rely on exact symmetry.
    """
    m = np.asarray(m, dtype=float)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise NonFiniteInput("matrix contains NaN or Inf")
    scale = max(np.abs(m).max(), 1.0)
    if np.abs(m - m.T).max() > rtol * scale:
        raise ValueError("matrix is not symmetric within tolerance")
    return 0.5 * (m + m.T)


@dataclass(frozen=True)
class CholeskyFactor:
    """Lower-triangular factor L with L L^T = M and its log determinant."""

    lower: np.ndarray
    log_det: float

    @property
    def n(self) -> int:
        return self.lower.shape[0]

    def solve(self, b: np.ndarray) -> np.ndarray:
        """Solve M x = b via forward/back substitution."""
        y = scipy.linalg.solve_triangular(self.lower, b, lower=True)
        return scipy.linalg.solve_triangular(self.lower.T, y, lower=False)


@dataclass(frozen=True)
class PseudoInverseResult:
    """Moore-Penrose inverse of a symmetric PSD matrix.

    ``rank`` plus the number of columns of ``null_basis`` equals the
    dimension; the orthonormal ``null_basis`` spans the dropped eigenspace.
    """

    pinv: np.ndarray
    rank: int
    null_basis: np.ndarray
    eigvals: np.ndarray
    eigvecs: np.ndarray

    @property
    def n(self) -> int:
        return self.pinv.shape[0]

    @property
    def deficiency(self) -> int:
        return self.n - self.rank

    def log_pdet(self) -> float:
        """Log pseudo-determinant: sum of logs of the retained eigenvalues."""
        return float(np.sum(np.log(self.eigvals[self.n - self.rank:])))

    def range_basis(self) -> np.ndarray:
        """Orthonormal basis of the range (eigenvectors of retained eigenvalues)."""
        return self.eigvecs[:, self.n - self.rank:]


def cholesky(m: np.ndarray) -> CholeskyFactor:
    """Factor a symmetric positive definite matrix.

    Raises NotPositiveDefinite on failure; adding jitter or switching to the
    eigenvalue path is the caller's policy, never done silently here.
    """
    m = require_symmetric(m)
    try:
        lower = scipy.linalg.cholesky(m, lower=True)
    except scipy.linalg.LinAlgError as exc:
        raise NotPositiveDefinite(str(exc)) from exc
    log_det = 2.0 * float(np.sum(np.log(np.diag(lower))))
    return CholeskyFactor(lower=lower, log_det=log_det)


def pseudo_inverse(m: np.ndarray, tol: float = DEFAULT_EIG_TOL) -> PseudoInverseResult:
    """Eigenvalue-cutoff Moore-Penrose inverse of a symmetric PSD matrix.

    Eigenvalues below ``tol`` times the largest eigenvalue are treated as
    exact zeros; their eigenvectors form the returned null-space basis.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    m = require_symmetric(m)
    w, v = np.linalg.eigh(m)
    cutoff = tol * max(w[-1], 0.0)
    keep = w > cutoff
    rank = int(np.count_nonzero(keep))
    inv = np.zeros_like(w)
    inv[keep] = 1.0 / w[keep]
    pinv = (v * inv) @ v.T
    null_basis = v[:, ~keep]
    # eigenvalues are stored ascending: dropped ones first, retained last
    order = np.argsort(keep, kind="stable")
    return PseudoInverseResult(
        pinv=0.5 * (pinv + pinv.T),
        rank=rank,
        null_basis=null_basis,
        eigvals=w[order],
        eigvecs=v[:, order],
    )


def woodbury_posterior_cov(prior_pinv: np.ndarray, q_like: np.ndarray) -> np.ndarray:
    """Fold likelihood curvature into a (pseudo)inverse prior covariance.

    Computes S = P - P (I + Q P)^{-1} Q P with P the prior covariance
    (possibly a pseudoinverse) and Q the negative likelihood Hessian mapped
    to the latent space.  When P has a null space, the output stays zero on
    it, so linear constraints spanning that null space hold automatically.
    """
    p = require_symmetric(prior_pinv)
    q = require_symmetric(q_like)
    if p.shape != q.shape:
        raise ValueError(f"dimension mismatch: {p.shape} vs {q.shape}")
    n = p.shape[0]
    qp = q @ p
    inner = np.eye(n) + qp
    try:
        correction = p @ np.linalg.solve(inner, qp)
    except np.linalg.LinAlgError as exc:
        raise SingularInnerSystem(str(exc)) from exc
    if not np.all(np.isfinite(correction)):
        raise SingularInnerSystem("inner solve produced non-finite values")
    out = p - correction
    return 0.5 * (out + out.T)


def kronecker(a: np.ndarray, b: np.ndarray, max_dim: int = MAX_KRON_DIM) -> np.ndarray:
    """Kronecker product of two dense symmetric matrices.

    Entry ((i*nb + k), (j*nb + l)) equals a[i, j] * b[k, l].  Refuses to
    build results larger than ``max_dim`` on a side.
    """
    a = require_symmetric(a)
    b = require_symmetric(b)
    out_dim = a.shape[0] * b.shape[0]
    if out_dim > max_dim:
        raise DimensionOverflow(
            f"kronecker result would be {out_dim}x{out_dim}, cap is {max_dim}"
        )
    return np.kron(a, b)
