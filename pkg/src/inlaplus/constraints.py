"""Identifiability machinery for interaction models.

Sum-to-zero constraint counting for spatio-temporal interaction designs, the
conditioning-by-kriging correction used as an oracle, and extraction of the
constraint set implied by a singular prior's null space.  The inference
modules never form the constraint matrix in their solve path; it exists here
for counting, validation, and the comparison oracle.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import FrozenSet, Optional

import numpy as np
import scipy.linalg

from .errors import DegenerateConstraints
from .linalg import PseudoInverseResult, require_symmetric

INTERACTION_TERMS = frozenset({"txa", "txs", "sxa", "txaxs"})


@dataclass(frozen=True)
class ConstraintSet:
    """k independent linear constraints C x = 0."""

    matrix: np.ndarray

    def __post_init__(self):
        c = np.atleast_2d(np.asarray(self.matrix, dtype=float))
        object.__setattr__(self, "matrix", c)

    @property
    def k(self) -> int:
        return self.matrix.shape[0]

    @property
    def s(self) -> int:
        return self.matrix.shape[1]


@dataclass(frozen=True)
class InteractionPlan:
    """Shape of a time x age x space interaction design.

    ``n_a is None`` means the model has no age dimension (time-space only).
    Orders are random-walk orders for the time and age main effects; space
    is always an intrinsic CAR effect with a single connected component.
    """

    n_t: int
    n_s: int
    o_t: int = 1
    n_a: Optional[int] = None
    o_a: int = 1
    interactions: FrozenSet[str] = frozenset()

    def __post_init__(self):
        object.__setattr__(self, "interactions", frozenset(self.interactions))
        if self.o_t not in (1, 2) or self.o_a not in (1, 2):
            raise ValueError("random-walk orders must be 1 or 2")
        unknown = self.interactions - INTERACTION_TERMS
        if unknown:
            raise ValueError(f"unknown interaction terms: {sorted(unknown)}")
        needs_age = {"txa", "sxa", "txaxs"} & self.interactions
        if needs_age and self.n_a is None:
            raise ValueError("age interactions require n_a")

    @property
    def has_age(self) -> bool:
        return self.n_a is not None


def _product_deficiency(dims_orders) -> int:
    """Deficiency of a Kronecker interaction: prod(n) - prod(n - o')."""
    total = 1
    rank = 1
    for n, o in dims_orders:
        total *= n
        rank *= n - o
    return total - rank


def count_constraints(plan: InteractionPlan) -> int:
    """Number of sum-to-zero constraints making the plan identifiable.

    Main random-walk effects contribute their order, the spatial effect one;
    every interaction contributes its structure's rank deficiency, computed
    with effective order o for random walks and 1 for the spatial factor.
    """
    k = plan.o_t + 1  # time main + space main
    if plan.has_age:
        k += plan.o_a
    t = (plan.n_t, plan.o_t)
    s = (plan.n_s, 1)
    a = (plan.n_a, plan.o_a) if plan.has_age else None
    if "txa" in plan.interactions:
        k += _product_deficiency([t, a])
    if "txs" in plan.interactions:
        k += _product_deficiency([t, s])
    if "sxa" in plan.interactions:
        k += _product_deficiency([s, a])
    if "txaxs" in plan.interactions:
        k += _product_deficiency([t, a, s])
    return k


def latent_dimension(plan: InteractionPlan) -> int:
    """Size of the stacked latent field: intercept, linear trends for
    order-2 walks, main effects, and interaction blocks."""
    s = 1 + plan.n_t + plan.n_s  # intercept + mains
    if plan.o_t == 2:
        s += 1
    if plan.has_age:
        s += plan.n_a
        if plan.o_a == 2:
            s += 1
    if "txa" in plan.interactions:
        s += plan.n_t * plan.n_a
    if "txs" in plan.interactions:
        s += plan.n_t * plan.n_s
    if "sxa" in plan.interactions:
        s += plan.n_s * plan.n_a
    if "txaxs" in plan.interactions:
        s += plan.n_t * plan.n_a * plan.n_s
    return s


@dataclass
class OpCounter:
    """Multiply-add counts split by what the work scales with.

    ``constraint_ops`` covers forming, factorizing, and solving with the
    k x k constraint Gram matrix (grows like s*k^2 + k^3); ``projection_ops``
    covers the dense projections of the covariance through C (grows like
    s^2*k).
    """

    constraint_ops: int = 0
    projection_ops: int = 0

    @property
    def total(self) -> int:
        return self.constraint_ops + self.projection_ops


def kriging_correct(cov_unconstrained: np.ndarray, c: ConstraintSet,
                    mean: Optional[np.ndarray] = None,
                    ops: Optional[OpCounter] = None):
    """Condition a Gaussian on C x = 0: Sigma - Sigma C^T (C Sigma C^T)^-1 C Sigma.

    Constraint rows are orthonormalized first to stabilize the inner solve.
    With ``mean`` given, returns (cov_out, mean_out); otherwise cov_out only.
    Raises DegenerateConstraints when rows are dependent or the Gram matrix
    is singular.
    """
    sigma = require_symmetric(cov_unconstrained)
    s = sigma.shape[0]
    if c.k == 0:
        return (sigma, mean) if mean is not None else sigma
    if c.s != s:
        raise ValueError(f"constraints have {c.s} columns, covariance is {s}x{s}")

    q, r = np.linalg.qr(c.matrix.T)
    if np.abs(np.diag(r)).min() < 1e-12 * max(np.abs(np.diag(r)).max(), 1.0):
        raise DegenerateConstraints("constraint rows are linearly dependent")
    cmat = q.T  # orthonormal rows spanning the same space
    k = cmat.shape[0]

    w = sigma @ cmat.T                      # s x k
    gram = cmat @ w                         # k x k
    if ops is not None:
        ops.projection_ops += s * s * k
        ops.constraint_ops += s * k * k
    try:
        chol = scipy.linalg.cholesky(gram, lower=True)
    except scipy.linalg.LinAlgError as exc:
        raise DegenerateConstraints("C Sigma C^T is numerically singular") from exc
    z = scipy.linalg.cho_solve((chol, True), w.T)   # k x s
    if ops is not None:
        ops.constraint_ops += k ** 3 // 3 + s * k * k
    out = sigma - w @ z
    if ops is not None:
        ops.projection_ops += s * s * k
    out = 0.5 * (out + out.T)
    if mean is not None:
        mean = np.asarray(mean, dtype=float)
        mean_out = mean - w @ scipy.linalg.cho_solve((chol, True), cmat @ mean)
        if ops is not None:
            ops.constraint_ops += k * k
            ops.projection_ops += 2 * s * k
        return out, mean_out
    return out


def null_space_constraints(prior: PseudoInverseResult) -> ConstraintSet:
    """Constraint set implied by a singular prior: C = null basis transposed."""
    return ConstraintSet(prior.null_basis.T.copy())


KRIGING_JITTER = 1e-4


def kriging_gaussian_approx(model, data, theta, eps: float = KRIGING_JITTER,
                            ops: Optional[OpCounter] = None,
                            tol: float = 1e-8, max_iter: int = 100):
    """Conditional latent posterior through the jitter-and-condition route.

    The oracle counterpart of the pseudoinverse path: invert the jittered
    posterior precision, then condition mean and covariance on the prior's
    null-space constraints by kriging each Newton iteration.  Returns
    (mean, covariance, iterations).
    """
    import math

    from .errors import OverflowGuard
    from .model import (PrecisionStructure, assemble_prior_precision,
                        likelihood_derivatives, log_likelihood)

    theta = np.asarray(theta, dtype=float)
    y = np.asarray(data, dtype=float)
    spectrum = PrecisionStructure(model)
    q_x = assemble_prior_precision(model, theta)
    a = model.design
    s = model.total_size
    cset = ConstraintSet(spectrum.null_basis().T)
    range_basis = spectrum.range_basis()

    def kernel(x_val, eta_val):
        try:
            return log_likelihood(model, eta_val, y, theta) - 0.5 * float(x_val @ q_x @ x_val)
        except OverflowGuard:
            return -math.inf

    x = np.zeros(s)
    eta = a @ x
    grad, w = likelihood_derivatives(model, eta, y, theta)
    scale = 1.0 + float(np.abs(grad).max(initial=0.0))
    current = kernel(x, eta)
    # the jitter only exists to make a singular prior invertible
    eps_eff = eps if cset.k else 0.0
    cov = None
    for it in range(1, max_iter + 1):
        b = a.T @ (grad + w * eta)
        sigma_un = np.linalg.inv(q_x + (a.T * w) @ a + eps_eff * np.eye(s))
        sigma_un = 0.5 * (sigma_un + sigma_un.T)
        if cset.k:
            cov, x_new = kriging_correct(sigma_un, cset, mean=sigma_un @ b, ops=ops)
        else:
            cov, x_new = sigma_un, sigma_un @ b

        # same step damping as the pseudoinverse path
        direction = x_new - x
        alpha = 1.0
        while alpha >= 1e-4:
            x_try = x + alpha * direction
            eta_try = a @ x_try
            value = kernel(x_try, eta_try)
            if value >= current - 1e-12 * (1.0 + abs(current)):
                break
            alpha *= 0.5
        else:
            raise DegenerateConstraints("kriging path: Newton step rejected to zero length")
        x_new, eta_new = x_try, eta_try
        current = value

        step = float(np.abs(x_new - x).max())
        x, eta = x_new, eta_new
        grad, w = likelihood_derivatives(model, eta, y, theta)
        score = a.T @ grad - q_x @ x
        score = range_basis @ (range_basis.T @ score)
        if step < tol or float(np.abs(score).max()) < tol * scale:
            # refresh the covariance at the converged curvature
            sigma_un = np.linalg.inv(q_x + (a.T * w) @ a + eps_eff * np.eye(s))
            sigma_un = 0.5 * (sigma_un + sigma_un.T)
            if cset.k:
                cov = kriging_correct(sigma_un, cset, ops=ops)
            else:
                cov = sigma_un
            return x, cov, it
    raise DegenerateConstraints(f"kriging path: no fixed point in {max_iter} iterations")
