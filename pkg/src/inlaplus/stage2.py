"""Latent-field stage: conditional posteriors, exploration designs, marginals.

Per hyperparameter point this computes the Gaussian approximation of the
conditional latent posterior (iterated Newton solves), optionally corrects
its mean by a variational step driven by Gauss-Hermite expectations, and
finally mixes the per-point conditionals over an exploration plan (grid,
central composite design, or a single empirical-Bayes point) into latent
marginals and the deviance information criterion.

Rank-deficient priors never form constraints: the conditional covariance is
updated through the prior pseudoinverse, so every sum-to-zero constraint
spanning the null space holds automatically.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import List, Optional, Sequence

import numpy as np
import scipy.linalg

from . import linalg
from .errors import (
    EmptyPlan,
    IndefiniteQc,
    NoConvergence,
    NotPositiveDefinite,
    OverflowGuard,
    UnsupportedDimension,
)
from .model import (
    LatentModel,
    PoissonLikelihood,
    PrecisionStructure,
    assemble_prior_precision,
    likelihood_derivatives,
    log_likelihood,
)

GA_TOL = 1e-8
GA_MAX_ITER = 100
VB_TOL = 1e-8
VB_MAX_ITER = 50
DEFAULT_QUAD_ORDER = 9

# central composite design scaling: design points sit at f0 standard
# deviations of the unit Gaussian radius
CCD_F0 = 1.1
CCD_MAX_DIM = 20

# Column catalog for minimum-run resolution-V two-level fractions.  Powers
# of two are base factors; other values name the interaction of base factors
# in their binary mask.  Verified to give resolution >= V through 20 factors.
_RESV_COLUMNS = (
    1, 2, 4, 8, 15, 16, 32, 51, 64, 85, 106, 128, 150, 171, 219, 237, 247,
    256, 279, 297,
)

# Catalog run counts for factor counts beyond the constructible range,
# used only to report the cost of rejected designs.
_RESV_RUNS_BREAKPOINTS = (
    (4, 16), (5, 16), (6, 32), (8, 64), (11, 128), (17, 256), (22, 512),
    (29, 1024), (38, 2048), (52, 4096), (69, 8192), (120, 16384),
)


# ---------------------------------------------------------------------------
# Gauss-Hermite quadrature


def gauss_hermite(d: int):
    """Nodes and weights for the weight function exp(-x^2) on the real line.

    Built from the symmetric tridiagonal Jacobi matrix (Golub-Welsch):
    eigenvalues are the nodes, weights are sqrt(pi) times the squared first
    eigenvector components.
    """
    if d < 1:
        raise ValueError("need at least one node")
    if d == 1:
        return np.zeros(1), np.array([math.sqrt(math.pi)])
    off = np.sqrt(np.arange(1, d) / 2.0)
    nodes, vecs = scipy.linalg.eigh_tridiagonal(np.zeros(d), off)
    weights = math.sqrt(math.pi) * vecs[0] ** 2
    return nodes, weights


# ---------------------------------------------------------------------------
# conditional posterior (Algorithm: iterated Gaussian approximation)


@dataclass(frozen=True)
class ConditionalPosterior:
    """Gaussian approximation of the latent field at one hyperparameter point.

    ``log_norm`` is the unnormalized log posterior density of theta filled in
    by the hyperparameter stage; ``log_pdet_cov`` is the log (pseudo)
    determinant of the covariance over its rank-``rank`` support.  The full
    covariance is only materialized on request (``var_diag`` carries the
    marginal variances); ``slim()`` drops it once downstream quantities are
    extracted.
    """

    theta: np.ndarray
    mean: np.ndarray
    rank: int
    log_pdet_cov: float
    n_iter: int
    converged: bool
    var_diag: Optional[np.ndarray] = None
    cov: Optional[np.ndarray] = None
    log_norm: float = math.nan
    vb_correction: Optional[np.ndarray] = None

    @property
    def sd(self) -> np.ndarray:
        if self.var_diag is None:
            raise ValueError("conditional was computed without covariance output")
        return np.sqrt(np.clip(self.var_diag, 0.0, None))

    def slim(self) -> "ConditionalPosterior":
        return replace(self, cov=None)


def gaussian_approx(model: LatentModel, data: np.ndarray, theta: np.ndarray,
                    spectrum: Optional[PrecisionStructure] = None,
                    want_cov: bool = True,
                    tol: float = GA_TOL, max_iter: int = GA_MAX_ITER) -> ConditionalPosterior:
    """Iterated Newton solve for the conditional latent posterior.

    Full-rank priors factor Q* = Q_x + A^T W A directly; rank-deficient
    priors run in covariance form, updating the prior pseudoinverse through
    the low-rank identity so the null-space constraints hold automatically
    (the mean is Sigma* times the linearized score).

    Convergence is declared when the max-norm step or the posterior score at
    the new iterate drops below ``tol``; a Gaussian likelihood therefore
    converges in exactly one solve.  ``want_cov=False`` skips materializing
    the covariance on the full-rank path (the log determinant still comes
    from the factor), which is all the hyperparameter objective needs.
    """
    theta = np.asarray(theta, dtype=float)
    y = np.asarray(data, dtype=float)
    if spectrum is None:
        spectrum = PrecisionStructure(model)
    a = model.design
    s = model.total_size
    q_x = assemble_prior_precision(model, theta)

    full_rank = spectrum.is_full_rank
    prior_pinv = None if full_rank else spectrum.pinv(theta)
    range_basis = None if full_rank else spectrum.range_basis()

    def kernel(x_val, eta_val):
        # log posterior kernel; -inf signals an overflowing candidate
        try:
            return log_likelihood(model, eta_val, y, theta) - 0.5 * float(x_val @ q_x @ x_val)
        except OverflowGuard:
            return -math.inf

    x = np.zeros(s)
    eta = a @ x
    grad, w = likelihood_derivatives(model, eta, y, theta)
    scale = 1.0 + float(np.abs(grad).max(initial=0.0))
    current = kernel(x, eta)

    cov = None
    n_iter = 0
    converged = False
    for _ in range(max_iter):
        b = a.T @ (grad + w * eta)
        if full_rank:
            q_star = q_x + (a.T * w) @ a
            factor = linalg.cholesky(q_star)
            x_new = factor.solve(b)
        else:
            q_like = (a.T * w) @ a
            cov = linalg.woodbury_posterior_cov(prior_pinv, q_like)
            x_new = cov @ b
        n_iter += 1

        # damp the Newton step until the posterior kernel does not decrease;
        # a full step is always accepted for a quadratic (Gaussian) kernel
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
            raise NoConvergence("Newton step rejected down to zero length")
        x_new, eta_new = x_try, eta_try
        current = value

        step = float(np.abs(x_new - x).max())
        x, eta = x_new, eta_new
        grad, w = likelihood_derivatives(model, eta, y, theta)
        score = a.T @ grad - q_x @ x
        if not full_rank:
            # only the component of the score on the prior range must vanish
            score = range_basis @ (range_basis.T @ score)
        if step < tol or float(np.abs(score).max()) < tol * scale:
            converged = True
            break

    if not converged:
        raise NoConvergence(f"Gaussian approximation: no fixed point in {max_iter} iterations")

    var_diag = None
    if full_rank:
        q_star = q_x + (a.T * w) @ a
        factor = linalg.cholesky(q_star)
        log_pdet_cov = -factor.log_det
        rank = s
        if want_cov:
            linv = scipy.linalg.solve_triangular(factor.lower, np.eye(s), lower=True)
            cov = linv.T @ linv
            cov = 0.5 * (cov + cov.T)
            var_diag = np.diag(cov).copy()
    else:
        # pseudo-determinant over the prior range: Sigma* = U (U^T Q* U)^-1 U^T
        q_like = (a.T * w) @ a
        m = range_basis.T @ (q_x + q_like) @ range_basis
        try:
            mf = linalg.cholesky(m)
        except NotPositiveDefinite as exc:
            raise NoConvergence(f"projected posterior precision not SPD: {exc}") from exc
        log_pdet_cov = -mf.log_det
        rank = spectrum.rank
        var_diag = np.diag(cov).copy()
        if not want_cov:
            cov = None

    return ConditionalPosterior(
        theta=theta,
        mean=x,
        rank=rank,
        log_pdet_cov=log_pdet_cov,
        n_iter=n_iter,
        converged=converged,
        var_diag=var_diag,
        cov=cov,
    )


# ---------------------------------------------------------------------------
# variational mean correction


def _loglik_derivs_pointwise(model: LatentModel, eta: np.ndarray, y: np.ndarray,
                             theta: np.ndarray):
    """First and second derivatives of the negative log likelihood in eta."""
    if isinstance(model.likelihood, PoissonLikelihood):
        rate = model.likelihood.offsets * np.exp(eta)
        return rate - y, rate
    tau = model.obs_precision(theta)
    return tau * (eta - y), np.full_like(eta, tau)


def expected_loglik_derivs(model: LatentModel, center: np.ndarray, sigma: np.ndarray,
                           y: np.ndarray, theta: np.ndarray,
                           quad_order: int = DEFAULT_QUAD_ORDER):
    """Gauss-Hermite expectations of the negative log-likelihood derivatives
    under eta_i ~ N(center_i, sigma_i^2): the slope and curvature of the
    expected loss in a mean shift of the linear predictor."""
    nodes, weights = gauss_hermite(quad_order)
    weights = weights / math.sqrt(math.pi)
    i1 = np.zeros(len(y))
    i2 = np.zeros(len(y))
    for j in range(quad_order):
        eta_j = center + math.sqrt(2.0) * sigma * nodes[j]
        d1, d2 = _loglik_derivs_pointwise(model, eta_j, y, theta)
        i1 += weights[j] * d1
        i2 += weights[j] * d2
    return i1, i2


def vb_correct_mean(cond: ConditionalPosterior, model: LatentModel, data: np.ndarray,
                    quad_order: int = DEFAULT_QUAD_ORDER,
                    spectrum: Optional[PrecisionStructure] = None,
                    tol: float = VB_TOL, max_iter: int = VB_MAX_ITER,
                    return_trace: bool = False):
    """Newton iteration minimizing the variational objective over a mean shift.

    Per observation the expected negative log likelihood under
    eta_i ~ N((A mu)_i, sigma_i^2) is expanded to second order; the expansion
    coefficients come from Gauss-Hermite quadrature with ``quad_order`` nodes.
    The linearization variances sigma_i^2 are read off the Gaussian
    approximation once and held fixed.  Returns the corrected mean (and the
    iterate trace when asked).
    """
    y = np.asarray(data, dtype=float)
    a = model.design
    theta = cond.theta
    if cond.cov is None:
        raise ValueError("mean correction needs the conditional covariance")
    if spectrum is None:
        spectrum = PrecisionStructure(model)
    q_x = assemble_prior_precision(model, theta)
    full_rank = spectrum.is_full_rank
    prior_pinv = None if full_rank else spectrum.pinv(theta)

    sigma = np.sqrt(np.clip(np.einsum("ij,jk,ik->i", a, cond.cov, a), 0.0, None))

    mu = cond.mean.copy()
    trace = [mu.copy()]
    converged = False
    for _ in range(max_iter):
        i1, i2 = expected_loglik_derivs(model, a @ mu, sigma, y, theta, quad_order)
        if np.any(i2 < 0):
            raise IndefiniteQc("negative curvature in the expected log likelihood")

        c = a.T @ i1 + q_x @ mu
        if full_rank:
            try:
                factor = linalg.cholesky(q_x + (a.T * i2) @ a)
            except NotPositiveDefinite as exc:
                raise IndefiniteQc(str(exc)) from exc
            lam = -factor.solve(c)
        else:
            cov_c = linalg.woodbury_posterior_cov(prior_pinv, (a.T * i2) @ a)
            lam = -(cov_c @ c)
        mu = mu + lam
        trace.append(mu.copy())
        if float(np.abs(lam).max()) < tol:
            converged = True
            break
    if not converged:
        raise NoConvergence(f"variational mean correction: no fixed point in {max_iter} iterations")
    if return_trace:
        return mu, trace
    return mu


def vb_objective(mu: np.ndarray, cond: ConditionalPosterior, model: LatentModel,
                 data: np.ndarray, quad_order: int = DEFAULT_QUAD_ORDER) -> float:
    """The functional the mean correction minimizes, up to mu-free constants:
    sum_i E[-log lik_i] under N((A mu)_i, sigma_i^2) plus the prior quadratic."""
    y = np.asarray(data, dtype=float)
    a = model.design
    q_x = assemble_prior_precision(model, cond.theta)
    sigma = np.sqrt(np.clip(np.einsum("ij,jk,ik->i", a, cond.cov, a), 0.0, None))
    nodes, weights = gauss_hermite(quad_order)
    weights = weights / math.sqrt(math.pi)
    center = a @ mu
    total = 0.0
    for j in range(quad_order):
        eta_j = center + math.sqrt(2.0) * sigma * nodes[j]
        total -= weights[j] * log_likelihood(model, eta_j, y, cond.theta)
    return float(total + 0.5 * mu @ q_x @ mu)


# ---------------------------------------------------------------------------
# exploration designs


@dataclass(frozen=True)
class PlanPoint:
    theta: np.ndarray
    weight: float
    z: np.ndarray


@dataclass(frozen=True)
class ExplorationPlan:
    """Weighted hyperparameter evaluation points in the standardized frame.

    ``log_volume`` is the log Jacobian of the z-to-theta map, needed when the
    plan approximates integrals over theta.
    """

    points: tuple
    strategy: str
    log_volume: float = 0.0

    def __len__(self) -> int:
        return len(self.points)

    def normalized(self) -> "ExplorationPlan":
        total = sum(p.weight for p in self.points)
        if total <= 0:
            raise ValueError("plan weights must have positive total mass")
        pts = tuple(replace(p, weight=p.weight / total) for p in self.points)
        return replace(self, points=pts)


def _resv_corner_design(t: int) -> np.ndarray:
    """Two-level +-1 fraction with orthogonal columns, resolution >= V."""
    if t <= 4:
        cols = [1 << i for i in range(t)]
    elif t <= CCD_MAX_DIM:
        cols = list(_RESV_COLUMNS[:t])
    else:
        raise UnsupportedDimension(f"no corner design constructed above t={CCD_MAX_DIM}")
    base = [c for c in cols if c & (c - 1) == 0]
    k = len(base)
    runs = 1 << k
    base_signs = np.ones((runs, k))
    for j in range(k):
        period = 1 << j
        base_signs[:, j] = np.where((np.arange(runs) // period) % 2 == 0, 1.0, -1.0)
    design = np.ones((runs, t))
    for idx, c in enumerate(cols):
        col = np.ones(runs)
        for j in range(k):
            if c >> int(math.log2(base[j])) & 1:
                col = col * base_signs[:, j]
        design[:, idx] = col
    return design


def ccd_runs(t: int) -> int:
    """Corner count of the resolution-V fraction for t factors."""
    if t <= 4:
        return 1 << t
    for upper, runs in _RESV_RUNS_BREAKPOINTS:
        if t <= upper:
            return runs
    raise UnsupportedDimension(f"no catalog entry for t={t}")


def ccd_point_count(t: int) -> int:
    """Total design points: fraction corners, 2t axial points, one center."""
    return ccd_runs(t) + 2 * t + 1


def ccd_evaluation_count(t: int) -> int:
    """New objective evaluations a CCD exploration needs; the center point is
    the already-evaluated mode."""
    return ccd_point_count(t) - 1


def _ccd_z_points(t: int, f0: float = CCD_F0):
    corners = f0 * _resv_corner_design(t)
    stars = np.zeros((2 * t, t))
    radius = f0 * math.sqrt(t)
    for i in range(t):
        stars[2 * i, i] = radius
        stars[2 * i + 1, i] = -radius
    sphere = np.vstack([corners, stars])
    n_sphere = sphere.shape[0]
    w_sphere = 1.0 / (f0 * f0 * n_sphere)
    w_center = 1.0 - 1.0 / (f0 * f0)
    zs = [np.zeros(t)] + [sphere[i] for i in range(n_sphere)]
    ws = [w_center] + [w_sphere] * n_sphere
    return zs, ws


def build_plan(posture, strategy: str, f0: float = CCD_F0,
               grid_step: float = 1.0) -> ExplorationPlan:
    """Exploration plan in the standardized hyperparameter frame.

    ``grid``: mode plus +-grid_step on each axis, weights proportional to the
    standard Gaussian density at the points (2t new evaluations).
    ``ccd``: resolution-V fraction corners plus axial points on the sphere of
    radius f0*sqrt(t), weights solved from second-moment exactness.
    ``empirical_bayes``: the mode alone.
    """
    theta_star = np.asarray(posture.theta, dtype=float)
    t = len(theta_star)
    if strategy == "empirical_bayes" or t == 0:
        pts = (PlanPoint(theta_star, 1.0, np.zeros(t)),)
        log_volume = 0.0 if t == 0 else posture.log_volume
        return ExplorationPlan(pts, "empirical_bayes", log_volume)

    if strategy == "grid":
        zs = [np.zeros(t)]
        for i in range(t):
            for sign in (+1.0, -1.0):
                z = np.zeros(t)
                z[i] = sign * grid_step
                zs.append(z)
        raw = np.array([math.exp(-0.5 * float(z @ z)) for z in zs])
        ws = raw / raw.sum()
    elif strategy == "ccd":
        if t > CCD_MAX_DIM:
            raise UnsupportedDimension(
                f"ccd above t={CCD_MAX_DIM} not built here; the design would "
                f"need {ccd_evaluation_count(t)} evaluations"
            )
        zs, ws = _ccd_z_points(t, f0)
    else:
        raise ValueError(f"unknown strategy {strategy!r}")

    pts = tuple(
        PlanPoint(posture.theta_of_z(z), float(w), np.asarray(z, dtype=float))
        for z, w in zip(zs, ws)
    )
    return ExplorationPlan(pts, strategy, posture.log_volume)


# ---------------------------------------------------------------------------
# mixing over the plan


@dataclass(frozen=True)
class LatentMarginal:
    """Gaussian mixture marginal of one latent coordinate."""

    index: int
    mean: float
    sd: float
    weights: np.ndarray
    means: np.ndarray
    sds: np.ndarray

    def cdf(self, x: float) -> float:
        from scipy.special import ndtr

        zs = (x - self.means) / self.sds
        return float(self.weights @ ndtr(zs))

    def quantile(self, q: float) -> float:
        lo = float(np.min(self.means - 10 * self.sds))
        hi = float(np.max(self.means + 10 * self.sds))
        for _ in range(200):
            mid = 0.5 * (lo + hi)
            if self.cdf(mid) < q:
                lo = mid
            else:
                hi = mid
            if hi - lo < 1e-12 * (1 + abs(mid)):
                break
        return 0.5 * (lo + hi)


def mixture_log_weights(plan: ExplorationPlan, conds: Sequence[ConditionalPosterior]) -> np.ndarray:
    """Posterior mixture weights: plan weights reweighted by the density
    ratio of the evaluated posterior to the standard Gaussian kernel in z."""
    if len(plan) == 0:
        raise EmptyPlan("plan has no points")
    if len(conds) != len(plan):
        raise ValueError("one conditional per plan point required")
    lw = np.empty(len(plan))
    for j, (pt, cond) in enumerate(zip(plan.points, conds)):
        if math.isnan(cond.log_norm):
            raise ValueError("conditional posteriors need log_norm filled in")
        if pt.weight <= 0.0:
            lw[j] = -math.inf
        else:
            lw[j] = math.log(pt.weight) + cond.log_norm + 0.5 * float(pt.z @ pt.z)
    top = lw.max()
    w = np.exp(lw - top)
    return np.log(w / w.sum(), out=np.full_like(w, -math.inf), where=w > 0)


def conditional_mean(cond: ConditionalPosterior, use_vb_mean: bool = False) -> np.ndarray:
    """Conditional mean, with the variational shift applied when available."""
    if use_vb_mean and cond.vb_correction is not None:
        return cond.mean + cond.vb_correction
    return cond.mean


def integrate_marginals(plan: ExplorationPlan, conds: Sequence[ConditionalPosterior],
                        use_vb_mean: bool = False) -> List[LatentMarginal]:
    """Mix the per-point conditionals into one Gaussian-mixture marginal per
    latent coordinate, summing in plan order."""
    log_w = mixture_log_weights(plan, conds)
    weights = np.exp(log_w)
    means = np.stack([conditional_mean(c, use_vb_mean) for c in conds])  # p x s
    sds = np.stack([c.sd for c in conds])
    mix_mean = weights @ means
    mix_second = weights @ (sds ** 2 + means ** 2)
    mix_var = np.clip(mix_second - mix_mean ** 2, 0.0, None)
    out = []
    for i in range(means.shape[1]):
        out.append(LatentMarginal(
            index=i,
            mean=float(mix_mean[i]),
            sd=float(math.sqrt(mix_var[i])),
            weights=weights,
            means=means[:, i].copy(),
            sds=sds[:, i].copy(),
        ))
    return out


def dic(plan: ExplorationPlan, conds: Sequence[ConditionalPosterior],
        model: LatentModel, data: np.ndarray, use_vb_mean: bool = False):
    """Deviance information criterion from the plan mixture.

    The mean deviance is the mixture-weighted deviance at the conditional
    means (plug-in, no second-order covariance term); the effective number of
    parameters is its gap to the deviance at the mixed posterior mean.
    """
    y = np.asarray(data, dtype=float)
    log_w = mixture_log_weights(plan, conds)
    weights = np.exp(log_w)
    a = model.design

    devs = np.array([
        -2.0 * log_likelihood(model, a @ conditional_mean(c, use_vb_mean), y, c.theta)
        for c in conds
    ])
    d_bar = float(weights @ devs)
    x_bar = weights @ np.stack([conditional_mean(c, use_vb_mean) for c in conds])
    theta_bar = weights @ np.stack([c.theta for c in conds]) if len(conds[0].theta) else conds[0].theta
    d_at_mean = -2.0 * log_likelihood(model, a @ x_bar, y, theta_bar)
    p_eff = d_bar - d_at_mean
    return d_bar + p_eff, p_eff
