"""Declarative latent Gaussian model definition.

A model is a list of latent components (fixed effects and structured random
effects), a dense design matrix mapping the stacked latent field to the
linear predictor, a likelihood family, and priors for the hyperparameters.
All hyperparameters live on the internal log-precision scale so optimization
is unconstrained.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Union

import numpy as np

from . import linalg
from .errors import OverflowGuard

# Fixed effects (intercept, slopes) get a weakly informative centered
# Gaussian prior; this is its precision.
WEAK_FIXED_PRECISION = 1e-3

COMPONENT_KINDS = (
    "intercept",
    "fixed_slope",
    "iid",
    "rw1",
    "rw2",
    "besag",
    "kron2",
    "kron3",
)

OVERFLOW_RATE = 1e300


# ---------------------------------------------------------------------------
# structure matrices


def rw1_structure(n: int) -> np.ndarray:
    """First-order random-walk structure: D^T D with D the first-difference
    operator, i.e. the path-graph Laplacian.  Rank deficiency 1."""
    if n < 2:
        raise ValueError("rw1 needs size >= 2")
    d = np.zeros((n - 1, n))
    idx = np.arange(n - 1)
    d[idx, idx] = -1.0
    d[idx, idx + 1] = 1.0
    return d.T @ d


def rw2_structure(n: int) -> np.ndarray:
    """Second-order random-walk structure: D^T D with D the second-difference
    operator.  Rank deficiency 2 (constant and linear trend)."""
    if n < 3:
        raise ValueError("rw2 needs size >= 3")
    d = np.zeros((n - 2, n))
    idx = np.arange(n - 2)
    d[idx, idx] = 1.0
    d[idx, idx + 1] = -2.0
    d[idx, idx + 2] = 1.0
    return d.T @ d


def besag_structure(adjacency: np.ndarray) -> np.ndarray:
    """Intrinsic CAR structure: degree diagonal minus adjacency."""
    adjacency = np.asarray(adjacency, dtype=float)
    if adjacency.ndim != 2 or adjacency.shape[0] != adjacency.shape[1]:
        raise ValueError("adjacency must be square")
    if np.any(adjacency != adjacency.T):
        raise ValueError("adjacency must be symmetric")
    if np.any(np.diag(adjacency) != 0):
        raise ValueError("adjacency diagonal must be zero")
    return np.diag(adjacency.sum(axis=1)) - adjacency


def connected_components(adjacency: np.ndarray) -> int:
    """Number of connected components of a 0/1 adjacency matrix."""
    n = adjacency.shape[0]
    seen = np.zeros(n, dtype=bool)
    count = 0
    for start in range(n):
        if seen[start]:
            continue
        count += 1
        stack = [start]
        seen[start] = True
        while stack:
            u = stack.pop()
            for v in np.nonzero(adjacency[u])[0]:
                if not seen[v]:
                    seen[v] = True
                    stack.append(int(v))
    return count


# ---------------------------------------------------------------------------
# components


@dataclass(frozen=True)
class LatentComponent:
    """One block of the latent field.

    ``structure`` is the fixed PSD matrix R scaled by the precision
    exp(theta[hyper_index]); components with ``hyper_index is None`` use the
    fixed ``log_prec`` instead (fixed effects and pinned precisions).
    """

    name: str
    kind: str
    size: int
    structure: np.ndarray
    rank_deficiency: int
    hyper_index: Optional[int] = None
    log_prec: float = 0.0

    def __post_init__(self):
        if self.kind not in COMPONENT_KINDS:
            raise ValueError(f"unknown component kind {self.kind!r}")
        if self.structure.shape != (self.size, self.size):
            raise ValueError("structure shape does not match size")

    @property
    def rank(self) -> int:
        return self.size - self.rank_deficiency


def intercept(name: str = "intercept", weak_prec: float = WEAK_FIXED_PRECISION) -> LatentComponent:
    return LatentComponent(name, "intercept", 1, np.eye(1), 0, None, math.log(weak_prec))


def fixed_slope(name: str, weak_prec: float = WEAK_FIXED_PRECISION) -> LatentComponent:
    return LatentComponent(name, "fixed_slope", 1, np.eye(1), 0, None, math.log(weak_prec))


def iid_component(name: str, size: int, hyper_index: Optional[int] = None,
                  log_prec: float = 0.0) -> LatentComponent:
    return LatentComponent(name, "iid", size, np.eye(size), 0, hyper_index, log_prec)


def rw1_component(name: str, size: int, hyper_index: Optional[int] = None,
                  log_prec: float = 0.0) -> LatentComponent:
    return LatentComponent(name, "rw1", size, rw1_structure(size), 1, hyper_index, log_prec)


def rw2_component(name: str, size: int, hyper_index: Optional[int] = None,
                  log_prec: float = 0.0) -> LatentComponent:
    return LatentComponent(name, "rw2", size, rw2_structure(size), 2, hyper_index, log_prec)


def besag_component(name: str, adjacency: np.ndarray, hyper_index: Optional[int] = None,
                    log_prec: float = 0.0) -> LatentComponent:
    structure = besag_structure(adjacency)
    deficiency = connected_components(np.asarray(adjacency) != 0)
    return LatentComponent(name, "besag", adjacency.shape[0], structure, deficiency,
                           hyper_index, log_prec)


def kron2_component(name: str, part_a: LatentComponent, part_b: LatentComponent,
                    hyper_index: Optional[int] = None, log_prec: float = 0.0) -> LatentComponent:
    """Interaction block with structure R_a (x) R_b.

    Rank deficiency is n_a*n_b - rank(R_a)*rank(R_b), the fully structured
    interaction case.
    """
    structure = linalg.kronecker(part_a.structure, part_b.structure)
    size = part_a.size * part_b.size
    deficiency = size - part_a.rank * part_b.rank
    return LatentComponent(name, "kron2", size, structure, deficiency, hyper_index, log_prec)


def kron3_component(name: str, part_a: LatentComponent, part_b: LatentComponent,
                    part_c: LatentComponent, hyper_index: Optional[int] = None,
                    log_prec: float = 0.0) -> LatentComponent:
    structure = linalg.kronecker(
        linalg.kronecker(part_a.structure, part_b.structure), part_c.structure
    )
    size = part_a.size * part_b.size * part_c.size
    deficiency = size - part_a.rank * part_b.rank * part_c.rank
    return LatentComponent(name, "kron3", size, structure, deficiency, hyper_index, log_prec)


# ---------------------------------------------------------------------------
# hyper priors


@dataclass(frozen=True)
class GaussianHyperPrior:
    """Gaussian prior on the internal (log-precision) scale."""

    mean: float = 0.0
    prec: float = 1.0

    def log_density(self, theta_j: float) -> float:
        return 0.5 * math.log(self.prec / (2.0 * math.pi)) - 0.5 * self.prec * (
            theta_j - self.mean
        ) ** 2


@dataclass(frozen=True)
class PCPrecisionPrior:
    """Penalized-complexity prior on a precision tau, P(sigma > u) = alpha
    with sigma = tau^{-1/2}, expressed on theta = log tau.

    The base density is exponential in sigma with rate lambda = -ln(alpha)/u;
    the log-precision density carries the sigma/2 Jacobian.
    """

    u: float = 1.0
    alpha: float = 0.01

    def __post_init__(self):
        if not (self.u > 0 and 0 < self.alpha < 1):
            raise ValueError("need u > 0 and alpha in (0, 1)")

    @property
    def rate(self) -> float:
        return -math.log(self.alpha) / self.u

    def log_density(self, theta_j: float) -> float:
        sigma = math.exp(-0.5 * theta_j)
        return math.log(self.rate / 2.0) - 0.5 * theta_j - self.rate * sigma


HyperPrior = Union[GaussianHyperPrior, PCPrecisionPrior]


# ---------------------------------------------------------------------------
# likelihoods


@dataclass(frozen=True)
class GaussianLikelihood:
    """Homoscedastic Gaussian observations with precision tau_y.

    The precision is exp(theta[hyper_index]) when indexed, else fixed_prec.
    """

    hyper_index: Optional[int] = None
    fixed_prec: float = 1.0


@dataclass(frozen=True)
class PoissonLikelihood:
    """Poisson counts with known positive offsets (expected cases)."""

    offsets: np.ndarray

    def __post_init__(self):
        offs = np.asarray(self.offsets, dtype=float)
        if np.any(offs <= 0):
            raise ValueError("offsets must be positive")
        object.__setattr__(self, "offsets", offs)


Likelihood = Union[GaussianLikelihood, PoissonLikelihood]


# ---------------------------------------------------------------------------
# the model


@dataclass(frozen=True)
class LatentModel:
    components: tuple
    design: np.ndarray
    likelihood: Likelihood
    hyper_priors: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "components", tuple(self.components))
        object.__setattr__(self, "hyper_priors", tuple(self.hyper_priors))
        design = np.asarray(self.design, dtype=float)
        object.__setattr__(self, "design", design)
        if design.ndim != 2:
            raise ValueError("design must be a 2-D matrix")
        if design.shape[1] != self.total_size:
            raise ValueError(
                f"design has {design.shape[1]} columns, components sum to {self.total_size}"
            )
        t = self.n_hyper
        for c in self.components:
            if c.hyper_index is not None and not (0 <= c.hyper_index < t):
                raise ValueError(f"component {c.name} hyper_index out of range")
        if isinstance(self.likelihood, PoissonLikelihood):
            if len(self.likelihood.offsets) != design.shape[0]:
                raise ValueError("offsets length must match observation count")
        if isinstance(self.likelihood, GaussianLikelihood):
            hi = self.likelihood.hyper_index
            if hi is not None and not (0 <= hi < t):
                raise ValueError("likelihood hyper_index out of range")

    @property
    def total_size(self) -> int:
        return sum(c.size for c in self.components)

    @property
    def n_obs(self) -> int:
        return self.design.shape[0]

    @property
    def n_hyper(self) -> int:
        return len(self.hyper_priors)

    @property
    def offsets(self) -> np.ndarray:
        """Start offset of each component block in the stacked latent field."""
        sizes = [c.size for c in self.components]
        return np.concatenate([[0], np.cumsum(sizes)[:-1]]).astype(int)

    def component_slice(self, name: str) -> slice:
        off = self.offsets
        for i, c in enumerate(self.components):
            if c.name == name:
                return slice(int(off[i]), int(off[i]) + c.size)
        raise KeyError(name)

    def obs_precision(self, theta: np.ndarray) -> float:
        if not isinstance(self.likelihood, GaussianLikelihood):
            raise TypeError("observation precision only defined for Gaussian likelihood")
        if self.likelihood.hyper_index is None:
            return float(self.likelihood.fixed_prec)
        return float(np.exp(theta[self.likelihood.hyper_index]))

    def component_log_prec(self, c: LatentComponent, theta: np.ndarray) -> float:
        if c.hyper_index is None:
            return c.log_prec
        return float(theta[c.hyper_index])


def assemble_prior_precision(model: LatentModel, theta: np.ndarray) -> np.ndarray:
    """Block-diagonal prior precision: exp(theta_h(j)) * R_j per component."""
    theta = np.asarray(theta, dtype=float)
    if len(theta) != model.n_hyper:
        raise ValueError(f"theta length {len(theta)} != {model.n_hyper}")
    s = model.total_size
    q = np.zeros((s, s))
    pos = 0
    for c in model.components:
        tau = math.exp(model.component_log_prec(c, theta))
        q[pos:pos + c.size, pos:pos + c.size] = tau * c.structure
        pos += c.size
    return q


def likelihood_derivatives(model: LatentModel, eta: np.ndarray, y: np.ndarray,
                           theta: Optional[np.ndarray] = None):
    """Gradient and negative Hessian diagonal of the log likelihood in eta.

    Poisson:  grad_i = y_i - phi_i e^{eta_i},  neg_hess_i = phi_i e^{eta_i}.
    Gaussian: grad_i = tau_y (y_i - eta_i),    neg_hess_i = tau_y.
    """
    eta = np.asarray(eta, dtype=float)
    y = np.asarray(y, dtype=float)
    if isinstance(model.likelihood, PoissonLikelihood):
        phi = model.likelihood.offsets
        with np.errstate(over="raise"):
            try:
                rate = phi * np.exp(eta)
            except FloatingPointError as exc:
                raise OverflowGuard("Poisson rate overflow") from exc
        if np.any(rate > OVERFLOW_RATE):
            raise OverflowGuard("Poisson rate above 1e300")
        return y - rate, rate
    tau = model.obs_precision(np.asarray(theta) if theta is not None else np.empty(0))
    return tau * (y - eta), np.full(len(eta), tau)


def log_likelihood(model: LatentModel, eta: np.ndarray, y: np.ndarray,
                   theta: Optional[np.ndarray] = None) -> float:
    """Full log likelihood including normalizing constants."""
    eta = np.asarray(eta, dtype=float)
    y = np.asarray(y, dtype=float)
    if isinstance(model.likelihood, PoissonLikelihood):
        phi = model.likelihood.offsets
        rate = phi * np.exp(eta)
        if np.any(rate > OVERFLOW_RATE):
            raise OverflowGuard("Poisson rate above 1e300")
        from scipy.special import gammaln

        return float(np.sum(y * (np.log(phi) + eta) - rate - gammaln(y + 1.0)))
    tau = model.obs_precision(np.asarray(theta) if theta is not None else np.empty(0))
    n = len(y)
    return float(0.5 * n * (math.log(tau) - math.log(2 * math.pi))
                 - 0.5 * tau * np.sum((y - eta) ** 2))


def hyper_log_prior(model: LatentModel, theta: np.ndarray) -> float:
    """Sum of per-coordinate prior log densities on the internal scale."""
    theta = np.asarray(theta, dtype=float)
    if len(theta) != model.n_hyper:
        raise ValueError(f"theta length {len(theta)} != {model.n_hyper}")
    return float(sum(p.log_density(float(th)) for p, th in zip(model.hyper_priors, theta)))


# ---------------------------------------------------------------------------
# spectral cache


@dataclass
class PrecisionStructure:
    """Per-component eigendecompositions of the fixed structure matrices.

    The prior precision is a block-diagonal matrix of theta-scaled fixed
    structures, so its pseudoinverse, pseudo-determinant and null basis are
    assembled from these cached blocks instead of refactorizing an s x s
    matrix at every theta.
    """

    model: LatentModel
    eig_tol: float = linalg.DEFAULT_EIG_TOL
    _blocks: list = field(default_factory=list)

    def __post_init__(self):
        for c in self.model.components:
            res = linalg.pseudo_inverse(c.structure, tol=self.eig_tol)
            if res.deficiency != c.rank_deficiency:
                raise ValueError(
                    f"component {c.name}: declared deficiency {c.rank_deficiency} "
                    f"but spectrum shows {res.deficiency}"
                )
            self._blocks.append(res)

    @property
    def rank(self) -> int:
        return sum(b.rank for b in self._blocks)

    @property
    def deficiency(self) -> int:
        return self.model.total_size - self.rank

    @property
    def is_full_rank(self) -> bool:
        return self.deficiency == 0

    def null_basis(self) -> np.ndarray:
        """Orthonormal basis of the prior null space (block-embedded)."""
        s = self.model.total_size
        cols = []
        pos = 0
        for c, b in zip(self.model.components, self._blocks):
            for j in range(b.null_basis.shape[1]):
                v = np.zeros(s)
                v[pos:pos + c.size] = b.null_basis[:, j]
                cols.append(v)
            pos += c.size
        if not cols:
            return np.zeros((s, 0))
        return np.column_stack(cols)

    def range_basis(self) -> np.ndarray:
        """Orthonormal basis of the prior range, complementary to null_basis."""
        s = self.model.total_size
        out = np.zeros((s, self.rank))
        pos = 0
        col = 0
        for c, b in zip(self.model.components, self._blocks):
            rb = b.range_basis()
            out[pos:pos + c.size, col:col + rb.shape[1]] = rb
            pos += c.size
            col += rb.shape[1]
        return out

    def pinv(self, theta: np.ndarray) -> np.ndarray:
        """Moore-Penrose inverse of the prior precision at theta."""
        s = self.model.total_size
        out = np.zeros((s, s))
        pos = 0
        for c, b in zip(self.model.components, self._blocks):
            tau = math.exp(self.model.component_log_prec(c, theta))
            out[pos:pos + c.size, pos:pos + c.size] = b.pinv / tau
            pos += c.size
        return out

    def log_pdet(self, theta: np.ndarray) -> float:
        """Log pseudo-determinant of the prior precision at theta."""
        total = 0.0
        for c, b in zip(self.model.components, self._blocks):
            lp = self.model.component_log_prec(c, theta)
            total += b.rank * lp + b.log_pdet()
        return total
