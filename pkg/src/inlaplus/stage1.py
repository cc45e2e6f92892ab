"""Hyperparameter stage: mode search, curvature, scalings, marginals.

The objective is the Laplace-style log posterior of the hyperparameters: the
joint density divided by the Gaussian approximation of the conditional latent
field, evaluated at the conditional mode.  BFGS with finite-difference
gradients in an orthonormalized search-direction basis finds the mode;
central second differences in the same basis give the curvature; per-axis
half-Gaussian scalings capture skewness; and a conditional-mean-ray
evaluation of the resulting kernel yields each hyperparameter marginal.

All batched evaluations go through the scheduler and are reduced in task-id
order, so results are independent of the worker count.
"""

from __future__ import annotations

import math
import threading
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from . import scheduler
from .errors import (
    GaussianApproxDiverged,
    LineSearchFailed,
    MaxIterations,
    NoConvergence,
    NonPositiveDrop,
    NotNegativeDefinite,
)
from .model import (
    LatentModel,
    PrecisionStructure,
    assemble_prior_precision,
    hyper_log_prior,
    log_likelihood,
)
from .stage2 import ConditionalPosterior, ExplorationPlan, gaussian_approx

LOG_2PI = math.log(2.0 * math.pi)

GRAD_TOL = 1e-5
MAX_BFGS_ITER = 200
FD_STEP = 1e-3
HESS_STEP = 1e-3
ARMIJO_C1 = 1e-4
BACKTRACK_RHO = 0.5
MAX_BACKTRACKS = 30
AGI_DELTA = 2.0
SCALING_CLAMP = (1e-6, 1e6)
MARGINAL_GRID_POINTS = 51
MARGINAL_SPAN_SD = 4.0


class HyperObjective:
    """Evaluates and caches the unnormalized log posterior of theta.

    Evaluation is a pure function of (model, data, theta); the cache keyed on
    the exact float bytes guarantees repeated evaluations are bit-identical.
    ``eval_count`` counts actual computations (cache misses).
    """

    def __init__(self, model: LatentModel, data: np.ndarray,
                 spectrum: Optional[PrecisionStructure] = None):
        self.model = model
        self.data = np.asarray(data, dtype=float)
        self.spectrum = spectrum if spectrum is not None else PrecisionStructure(model)
        self._cache: dict = {}
        self._lock = threading.Lock()
        self.eval_count = 0

    @property
    def n_hyper(self) -> int:
        return self.model.n_hyper

    def reset_counter(self) -> None:
        self.eval_count = 0

    def _log_post(self, theta: np.ndarray, cond: ConditionalPosterior) -> float:
        model = self.model
        x = cond.mean
        q_x = assemble_prior_precision(model, theta)
        log_prior_latent = (
            0.5 * self.spectrum.log_pdet(theta)
            - 0.5 * cond.rank * LOG_2PI
            - 0.5 * float(x @ q_x @ x)
        )
        loglik = log_likelihood(model, model.design @ x, self.data, theta)
        # Gaussian approximation density at its own mode
        log_gauss_at_mode = -0.5 * cond.rank * LOG_2PI - 0.5 * cond.log_pdet_cov
        return hyper_log_prior(model, theta) + log_prior_latent + loglik - log_gauss_at_mode

    def evaluate(self, theta) -> float:
        """Unnormalized log posterior density of theta (cached)."""
        theta = np.asarray(theta, dtype=float)
        key = theta.tobytes()
        with self._lock:
            if key in self._cache:
                return self._cache[key]
        try:
            cond = gaussian_approx(self.model, self.data, theta,
                                   spectrum=self.spectrum, want_cov=False)
        except NoConvergence as exc:
            raise GaussianApproxDiverged(str(exc)) from exc
        value = self._log_post(theta, cond)
        with self._lock:
            self._cache.setdefault(key, value)
            self.eval_count += 1
        return value

    def conditional(self, theta) -> ConditionalPosterior:
        """Full conditional posterior (with covariance) and log_norm filled."""
        theta = np.asarray(theta, dtype=float)
        try:
            cond = gaussian_approx(self.model, self.data, theta,
                                   spectrum=self.spectrum, want_cov=True)
        except NoConvergence as exc:
            raise GaussianApproxDiverged(str(exc)) from exc
        value = self._log_post(theta, cond)
        with self._lock:
            self._cache.setdefault(theta.tobytes(), value)
        from dataclasses import replace

        return replace(cond, log_norm=value)


def eval_log_post(obj: HyperObjective, theta) -> Tuple[float, ConditionalPosterior]:
    """Log posterior density of theta and the conditional it was built from."""
    cond = obj.conditional(theta)
    return cond.log_norm, cond


@dataclass
class HyperPosture:
    """Mode, curvature frame, and skew scalings of the hyperparameter posterior.

    Filled progressively: ``find_mode`` sets the mode and search basis,
    ``attach_hessian`` the eigenframe, ``fit_asymmetric_scalings`` the
    per-axis half-Gaussian variances.
    """

    theta: np.ndarray
    log_post: float
    basis: np.ndarray
    n_iter: int
    converged: bool
    grad_norm: float
    hessian: Optional[np.ndarray] = None
    eig_vecs: Optional[np.ndarray] = None
    eig_vals: Optional[np.ndarray] = None  # variances along the frame axes
    ridge: float = 0.0
    sigma2_plus: Optional[np.ndarray] = None
    sigma2_minus: Optional[np.ndarray] = None

    @property
    def t(self) -> int:
        return len(self.theta)

    @property
    def log_volume(self) -> float:
        """Log Jacobian of the z-to-theta map, 0.5 * log det(Lambda)."""
        if self.eig_vals is None:
            return 0.0
        return 0.5 * float(np.sum(np.log(self.eig_vals)))

    def theta_of_z(self, z: np.ndarray) -> np.ndarray:
        if self.t == 0:
            return self.theta
        return self.theta + self.eig_vecs @ (np.sqrt(self.eig_vals) * np.asarray(z, dtype=float))

    def z_of_theta(self, theta: np.ndarray) -> np.ndarray:
        if self.t == 0:
            return np.zeros(0)
        return (self.eig_vecs.T @ (np.asarray(theta, dtype=float) - self.theta)) / np.sqrt(self.eig_vals)

    def sigma_theta(self) -> np.ndarray:
        return (self.eig_vecs * self.eig_vals) @ self.eig_vecs.T

    def attach_hessian(self, hessian: np.ndarray, regularize: bool = True) -> None:
        """Eigen-decompose the negated curvature into the standardizing frame.

        A non-negative-definite Hessian either raises or, with
        ``regularize``, is ridged until positive definite (recorded in
        ``ridge``).
        """
        hessian = 0.5 * (hessian + hessian.T)
        self.hessian = hessian
        if self.t == 0:
            self.eig_vecs = np.zeros((0, 0))
            self.eig_vals = np.zeros(0)
            return
        neg = -hessian
        w, v = np.linalg.eigh(neg)
        if w.min() <= 0:
            if not regularize:
                raise NotNegativeDefinite(
                    f"smallest curvature eigenvalue {w.min():.3e} is not positive"
                )
            self.ridge = float(-w.min() + max(1e-8, 1e-6 * abs(w).max()))
            w = w + self.ridge
        self.eig_vals = 1.0 / w  # covariance eigenvalues
        self.eig_vecs = v


def _run_eval_batch(obj: HyperObjective, thetas, stage: str,
                    pool: Optional[scheduler.WorkerPool]):
    batch = scheduler.TaskBatch(tuple(thetas), stage)
    if pool is None:
        pool = scheduler.WorkerPool(1)
    return scheduler.run_batch(batch, pool, obj.evaluate)


def _smart_gradient(obj: HyperObjective, theta: np.ndarray, basis: np.ndarray,
                    ll_center: float, diff: str,
                    pool: Optional[scheduler.WorkerPool]) -> np.ndarray:
    """Finite-difference gradient of the negated objective along the basis."""
    t = len(theta)
    h = FD_STEP * (1.0 + float(np.abs(theta).max(initial=0.0)))
    if diff == "forward":
        thetas = [theta + h * basis[:, i] for i in range(t)]
        values = _run_eval_batch(obj, thetas, "gradient_forward", pool)
        directional = np.array([(ll_center - v) / h for v in values])
    elif diff == "central":
        thetas = []
        for i in range(t):
            thetas.append(theta + h * basis[:, i])
            thetas.append(theta - h * basis[:, i])
        values = _run_eval_batch(obj, thetas, "gradient_central", pool)
        directional = np.array([
            (-values[2 * i] + values[2 * i + 1]) / (2.0 * h) for i in range(t)
        ])
    else:
        raise ValueError(f"diff must be 'forward' or 'central', got {diff!r}")
    return basis @ directional


def _refresh_basis(basis: np.ndarray, direction: np.ndarray) -> np.ndarray:
    """Orthonormal basis led by the newest search direction (modified
    Gram-Schmidt against the previous basis)."""
    t = basis.shape[0]
    norm = float(np.linalg.norm(direction))
    if norm < 1e-14:
        return basis
    cols = [direction / norm]
    for j in range(t):
        w = basis[:, j].copy()
        for c in cols:
            w -= (c @ w) * c
        n = float(np.linalg.norm(w))
        if n > 1e-10:
            cols.append(w / n)
        if len(cols) == t:
            break
    return np.column_stack(cols)


def _line_search(obj: HyperObjective, theta: np.ndarray, direction: np.ndarray,
                 f0: float, slope: float) -> Tuple[float, float]:
    """Backtracking Armijo search with one quadratic-interpolation candidate.

    Works on the negated objective.  On an exactly quadratic objective the
    interpolated step is the exact line minimizer, which is what gives BFGS
    its finite termination there.
    """

    def f_at(alpha: float) -> float:
        return -obj.evaluate(theta + alpha * direction)

    def armijo(f_val: float, alpha: float) -> bool:
        return f_val <= f0 + ARMIJO_C1 * alpha * slope

    f1 = f_at(1.0)
    candidates = []
    if armijo(f1, 1.0):
        candidates.append((1.0, f1))
    denom = f1 - f0 - slope
    if denom > 0:
        alpha_q = float(np.clip(-slope / (2.0 * denom), 1e-3, 10.0))
        if abs(alpha_q - 1.0) > 1e-12:
            fq = f_at(alpha_q)
            if armijo(fq, alpha_q):
                candidates.append((alpha_q, fq))
    if candidates:
        return min(candidates, key=lambda c: c[1])

    alpha = BACKTRACK_RHO
    for _ in range(MAX_BACKTRACKS):
        f_val = f_at(alpha)
        if armijo(f_val, alpha):
            return alpha, f_val
        alpha *= BACKTRACK_RHO
    raise LineSearchFailed(f"no acceptable step along slope {slope:.3e}")


def find_mode(obj: HyperObjective, theta0, diff: str = "central",
              pool: Optional[scheduler.WorkerPool] = None,
              g_tol: float = GRAD_TOL, max_iter: int = MAX_BFGS_ITER) -> HyperPosture:
    """BFGS ascent to the posterior mode of theta.

    Gradients are finite differences along an orthonormalized basis that is
    re-led by each accepted search direction; the per-iteration offset
    evaluations are dispatched as one batch through the scheduler.  Raises
    MaxIterations if the gradient tolerance is not met in ``max_iter`` steps.
    """
    theta = np.asarray(theta0, dtype=float).copy()
    if not np.all(np.isfinite(theta)):
        raise ValueError("starting point must be finite")
    t = len(theta)
    f = -obj.evaluate(theta)
    if t == 0:
        return HyperPosture(theta, -f, np.zeros((0, 0)), 0, True, 0.0)

    basis = np.eye(t)
    h_inv = np.eye(t)
    grad_prev: Optional[np.ndarray] = None
    step_prev: Optional[np.ndarray] = None
    n_iter = 0
    for it in range(max_iter):
        grad = _smart_gradient(obj, theta, basis, -f, diff, pool)
        g_norm = float(np.linalg.norm(grad))
        if g_norm < g_tol:
            return HyperPosture(theta, -f, basis, n_iter, True, g_norm)
        if grad_prev is not None and step_prev is not None:
            y_vec = grad - grad_prev
            sy = float(step_prev @ y_vec)
            if sy > 1e-12 * float(np.linalg.norm(step_prev) * np.linalg.norm(y_vec)):
                rho = 1.0 / sy
                i_mat = np.eye(t)
                left = i_mat - rho * np.outer(step_prev, y_vec)
                h_inv = left @ h_inv @ left.T + rho * np.outer(step_prev, step_prev)
        direction = -h_inv @ grad
        slope = float(grad @ direction)
        if slope >= 0:
            h_inv = np.eye(t)
            direction = -grad
            slope = -g_norm ** 2
        try:
            alpha, f_new = _line_search(obj, theta, direction, f, slope)
        except LineSearchFailed:
            # two benign endings: the finite-difference gradient is at its
            # truncation floor, or the predicted ascent is below what the
            # objective's own evaluation noise can resolve
            h = FD_STEP * (1.0 + float(np.abs(theta).max(initial=0.0)))
            fd_floor = h if diff == "forward" else h * h
            noise_floor = 1e-9 * (1.0 + abs(f))
            if g_norm <= fd_floor or abs(slope) <= noise_floor:
                return HyperPosture(theta, -f, basis, n_iter, True, g_norm)
            raise
        step = alpha * direction
        theta = theta + step
        f = f_new
        grad_prev = grad
        step_prev = step
        basis = _refresh_basis(basis, step)
        n_iter = it + 1
    raise MaxIterations(f"no convergence in {max_iter} iterations, |g| = {g_norm:.3e}")


def hessian_at_mode(obj: HyperObjective, posture: HyperPosture,
                    pool: Optional[scheduler.WorkerPool] = None,
                    step: float = HESS_STEP) -> np.ndarray:
    """Central second differences of the log posterior in the smart basis.

    Uses 2t diagonal and 2t(t-1) cross evaluations, 2t^2 in total, within
    the 2(t^2 + t) budget.  Returns the symmetrized Hessian in the original
    coordinates (expected negative definite at a true mode).
    """
    t = posture.t
    if t == 0:
        return np.zeros((0, 0))
    theta = posture.theta
    basis = posture.basis
    f0 = posture.log_post
    h = step

    thetas = []
    for i in range(t):
        thetas.append(theta + h * basis[:, i])
        thetas.append(theta - h * basis[:, i])
    pairs = [(i, j) for i in range(t) for j in range(i + 1, t)]
    for i, j in pairs:
        bi, bj = basis[:, i], basis[:, j]
        thetas.extend([
            theta + h * bi + h * bj,
            theta + h * bi - h * bj,
            theta - h * bi + h * bj,
            theta - h * bi - h * bj,
        ])
    values = _run_eval_batch(obj, thetas, "hessian", pool)

    hess_basis = np.zeros((t, t))
    for i in range(t):
        f_plus, f_minus = values[2 * i], values[2 * i + 1]
        hess_basis[i, i] = (f_plus - 2.0 * f0 + f_minus) / h**2
    base = 2 * t
    for idx, (i, j) in enumerate(pairs):
        fpp, fpm, fmp, fmm = values[base + 4 * idx: base + 4 * idx + 4]
        hess_basis[i, j] = hess_basis[j, i] = (fpp - fpm - fmp + fmm) / (4.0 * h**2)
    hessian = basis @ hess_basis @ basis.T
    return 0.5 * (hessian + hessian.T)


def fit_asymmetric_scalings(obj: HyperObjective, posture: HyperPosture,
                            pool: Optional[scheduler.WorkerPool] = None,
                            delta: float = AGI_DELTA):
    """Per-axis half-Gaussian variances from the log-density drop at z = +-delta.

    Solves sigma^2 = delta^2 / (2 * drop) on each side of each standardized
    axis and clamps to a sane range; a non-positive drop means the reported
    mode is not a maximum and is raised as such.
    """
    t = posture.t
    if posture.eig_vals is None:
        raise ValueError("attach_hessian must run before fitting scalings")
    if t == 0:
        posture.sigma2_plus = np.zeros(0)
        posture.sigma2_minus = np.zeros(0)
        return posture.sigma2_plus, posture.sigma2_minus
    thetas = []
    for i in range(t):
        for sign in (+1.0, -1.0):
            z = np.zeros(t)
            z[i] = sign * delta
            thetas.append(posture.theta_of_z(z))
    values = _run_eval_batch(obj, thetas, "exploration", pool)
    lo, hi = SCALING_CLAMP
    sig_plus = np.empty(t)
    sig_minus = np.empty(t)
    for i in range(t):
        for k, sign in enumerate((+1.0, -1.0)):
            drop = posture.log_post - values[2 * i + k]
            if drop <= 0:
                raise NonPositiveDrop(
                    f"density rises along axis {i} ({'+' if sign > 0 else '-'})"
                )
            sigma2 = float(np.clip(delta**2 / (2.0 * drop), lo, hi))
            if sign > 0:
                sig_plus[i] = sigma2
            else:
                sig_minus[i] = sigma2
    posture.sigma2_plus = sig_plus
    posture.sigma2_minus = sig_minus
    return sig_plus, sig_minus


def _skew_kernel_log(posture: HyperPosture, z: np.ndarray) -> float:
    sig2 = np.where(z >= 0, posture.sigma2_plus, posture.sigma2_minus)
    return float(-0.5 * np.sum(z * z / sig2))


def hyper_marginal(posture: HyperPosture, obj: HyperObjective, axis: int,
                   grid: Optional[np.ndarray] = None):
    """Marginal density of one hyperparameter on a grid.

    Evaluates the skew-Gaussian joint kernel along the conditional-mean ray
    of theta_axis (which reduces to the exact marginal when the kernel is
    Gaussian), then normalizes by the trapezoid rule.  Returns (theta values,
    densities).
    """
    if posture.sigma2_plus is None:
        raise ValueError("fit_asymmetric_scalings must run first")
    v = posture.eig_vecs
    lam = posture.eig_vals
    s_ii = float(v[axis] @ (lam * v[axis]))
    sd_i = math.sqrt(s_ii)
    # unit ray in z-space traced by the conditional mean as theta_axis moves
    ray = np.sqrt(lam) * v[axis] / sd_i
    if grid is None:
        smax = math.sqrt(float(max(posture.sigma2_plus.max(), posture.sigma2_minus.max())))
        span = MARGINAL_SPAN_SD * smax
        grid = np.linspace(-span, span, MARGINAL_GRID_POINTS)
    else:
        grid = np.asarray(grid, dtype=float)
    log_dens = np.array([_skew_kernel_log(posture, g * ray) for g in grid])
    log_dens -= log_dens.max()
    dens = np.exp(log_dens)
    theta_vals = posture.theta[axis] + sd_i * grid
    mass = np.trapezoid(dens, theta_vals)
    return theta_vals, dens / mass


def log_marginal_likelihood(obj: HyperObjective, plan: ExplorationPlan) -> float:
    """Evidence estimate: plan-weighted sum of posterior density over the
    standard Gaussian kernel, times the standardizing volume element."""
    if len(plan) == 0:
        raise ValueError("plan has no points")
    t = len(plan.points[0].theta)
    terms = np.empty(len(plan))
    for j, pt in enumerate(plan.points):
        if pt.weight <= 0:
            terms[j] = -math.inf
            continue
        ll = obj.evaluate(pt.theta)
        terms[j] = math.log(pt.weight) + ll + 0.5 * float(pt.z @ pt.z)
    top = terms.max()
    body = float(top + math.log(np.sum(np.exp(terms - top))))
    return body + plan.log_volume + 0.5 * t * LOG_2PI
