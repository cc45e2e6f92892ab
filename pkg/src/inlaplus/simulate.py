"""Reproducible synthetic-data generators.

Everything here is a pure function of its parameters and a seed (PCG64
streams via ``numpy.random.default_rng``), so repeated calls are
byte-identical.  Covers random connected intrinsic-CAR graphs, Poisson
space-time interaction scenarios, the crossed-effects regression example,
and the nested-versus-crossed covariance comparison.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np

from . import model as md
from . import modelspec
from .constraints import InteractionPlan
from .errors import MaxRedraws

BESAG_EDGE_PROB = 0.3
MAX_GRAPH_REDRAWS = 10_000


@dataclass(frozen=True)
class BesagGraph:
    n: int
    adjacency: np.ndarray
    seed: int

    @property
    def structure(self) -> np.ndarray:
        return md.besag_structure(self.adjacency)


def random_besag_graph(n: int, p: float = BESAG_EDGE_PROB, seed: int = 0) -> BesagGraph:
    """Random connected undirected graph: Bernoulli(p) adjacency draws,
    symmetrized by elementwise OR, redrawn until a single component."""
    if n < 2:
        raise ValueError("need at least two nodes")
    rng = np.random.default_rng(seed)
    for _ in range(MAX_GRAPH_REDRAWS):
        a = rng.binomial(1, p, size=(n, n))
        a = np.logical_or(a, a.T).astype(float)
        np.fill_diagonal(a, 0.0)
        if md.connected_components(a != 0) == 1:
            return BesagGraph(n=n, adjacency=a, seed=seed)
    raise MaxRedraws(f"no connected graph in {MAX_GRAPH_REDRAWS} draws (n={n}, p={p})")


# ---------------------------------------------------------------------------
# interaction models on observation grids


def interaction_components(plan: InteractionPlan, adjacency: np.ndarray):
    """Latent components and hyperparameter names for an interaction plan.

    Order: intercept, linear trends for order-2 walks, main effects
    (time, age, space), then interactions.  Every random-effect term gets its
    own precision hyperparameter.
    """
    rw = {1: md.rw1_component, 2: md.rw2_component}
    hyper_names: List[str] = []

    def hyper(name: str) -> int:
        hyper_names.append(name)
        return len(hyper_names) - 1

    comps = [md.intercept()]
    if plan.o_t == 2:
        comps.append(md.fixed_slope("beta_t"))
    if plan.has_age and plan.o_a == 2:
        comps.append(md.fixed_slope("beta_a"))
    time = rw[plan.o_t]("time", plan.n_t, hyper("tau_time"))
    comps.append(time)
    age = None
    if plan.has_age:
        age = rw[plan.o_a]("age", plan.n_a, hyper("tau_age"))
        comps.append(age)
    space = md.besag_component("space", adjacency, hyper("tau_space"))
    comps.append(space)
    if "txa" in plan.interactions:
        comps.append(md.kron2_component("txa", time, age, hyper("tau_txa")))
    if "txs" in plan.interactions:
        comps.append(md.kron2_component("txs", time, space, hyper("tau_txs")))
    if "sxa" in plan.interactions:
        comps.append(md.kron2_component("sxa", space, age, hyper("tau_sxa")))
    if "txaxs" in plan.interactions:
        comps.append(md.kron3_component("txaxs", time, age, space, hyper("tau_txaxs")))
    return comps, hyper_names


def grid_indices(plan: InteractionPlan):
    """Observation grid over (time[, age], space), time-major."""
    axes = [np.arange(plan.n_t)]
    if plan.has_age:
        axes.append(np.arange(plan.n_a))
    axes.append(np.arange(plan.n_s))
    mesh = np.meshgrid(*axes, indexing="ij")
    return [m.ravel() for m in mesh]


def interaction_design(plan: InteractionPlan, components) -> np.ndarray:
    """Dense design matrix mapping the stacked components to the grid cells."""
    idx = grid_indices(plan)
    t_idx = idx[0]
    a_idx = idx[1] if plan.has_age else None
    s_idx = idx[-1]
    n_obs = len(t_idx)
    t_center = t_idx - (plan.n_t - 1) / 2.0
    a_center = a_idx - (plan.n_a - 1) / 2.0 if plan.has_age else None

    sizes = [c.size for c in components]
    offsets = np.concatenate([[0], np.cumsum(sizes)[:-1]]).astype(int)
    design = np.zeros((n_obs, int(np.sum(sizes))))
    rows = np.arange(n_obs)
    for comp, off in zip(components, offsets):
        if comp.kind == "intercept":
            design[:, off] = 1.0
        elif comp.name == "beta_t":
            design[:, off] = t_center
        elif comp.name == "beta_a":
            design[:, off] = a_center
        elif comp.name == "time":
            design[rows, off + t_idx] = 1.0
        elif comp.name == "age":
            design[rows, off + a_idx] = 1.0
        elif comp.name == "space":
            design[rows, off + s_idx] = 1.0
        elif comp.name == "txa":
            design[rows, off + t_idx * plan.n_a + a_idx] = 1.0
        elif comp.name == "txs":
            design[rows, off + t_idx * plan.n_s + s_idx] = 1.0
        elif comp.name == "sxa":
            design[rows, off + s_idx * plan.n_a + a_idx] = 1.0
        elif comp.name == "txaxs":
            design[rows, off + (t_idx * plan.n_a + a_idx) * plan.n_s + s_idx] = 1.0
        else:
            raise ValueError(f"unexpected component {comp.name!r}")
    return design


def build_interaction_model(plan: InteractionPlan, adjacency: np.ndarray,
                            offsets: Optional[np.ndarray] = None,
                            priors: Optional[Dict[str, md.HyperPrior]] = None):
    """Poisson interaction model over the full observation grid.

    Returns (LatentModel, hyper names).  Default priors are penalized
    complexity on every precision.
    """
    comps, hyper_names = interaction_components(plan, adjacency)
    design = interaction_design(plan, comps)
    if offsets is None:
        offsets = np.ones(design.shape[0])
    priors = priors or {}
    prior_list = tuple(priors.get(h, md.PCPrecisionPrior()) for h in hyper_names)
    mdl = md.LatentModel(tuple(comps), design, md.PoissonLikelihood(offsets), prior_list)
    return mdl, hyper_names


# ---------------------------------------------------------------------------
# space-time scenario simulation


@dataclass(frozen=True)
class SimScenario:
    plan: InteractionPlan
    theta_true: np.ndarray
    seed: int
    model: md.LatentModel
    hyper_names: list
    y: np.ndarray
    truth: np.ndarray
    eta: np.ndarray
    mu: float
    beta_t: float


def _sample_component(comp: md.LatentComponent, tau: float, rng) -> np.ndarray:
    """Draw from the centered intrinsic prior: eigenvectors of the structure
    scaled by 1/sqrt(tau * eigenvalue), null directions excluded, so every
    constraint spanning the null space holds exactly."""
    if math.isinf(tau):
        return np.zeros(comp.size)
    w, v = np.linalg.eigh(comp.structure)
    keep = w > 1e-9 * max(w[-1], 1.0)
    eps = rng.standard_normal(int(np.count_nonzero(keep)))
    return v[:, keep] @ (eps / np.sqrt(w[keep] * tau))


def simulate_spacetime(plan: InteractionPlan, theta_true, seed: int = 0,
                       mu: float = 0.0, beta_t: float = 0.0,
                       graph_p: float = BESAG_EDGE_PROB) -> SimScenario:
    """Poisson counts on the time-space grid from the constrained prior.

    ``theta_true`` holds log precisions in hyperparameter order (entries may
    be +inf for a degenerate zero-variance effect).  The spatial graph is
    drawn from the same seed stream.
    """
    theta_true = np.asarray(theta_true, dtype=float)
    graph = random_besag_graph(plan.n_s, p=graph_p, seed=seed)
    mdl, hyper_names = build_interaction_model(plan, graph.adjacency)
    if len(theta_true) != len(hyper_names):
        raise ValueError(f"theta_true needs {len(hyper_names)} entries {hyper_names}")
    rng = np.random.default_rng(seed + 1)
    truth = np.zeros(mdl.total_size)
    pos = 0
    for comp in mdl.components:
        if comp.kind == "intercept":
            truth[pos] = mu
        elif comp.kind == "fixed_slope":
            truth[pos] = beta_t
        else:
            tau = math.exp(theta_true[comp.hyper_index])
            truth[pos:pos + comp.size] = _sample_component(comp, tau, rng)
        pos += comp.size
    eta = mdl.design @ truth
    y = rng.poisson(np.exp(eta)).astype(float)
    return SimScenario(plan, theta_true, seed, mdl, hyper_names, y, truth, eta, mu, beta_t)


def write_scenario(scenario: SimScenario, directory) -> Dict[str, str]:
    """Dump a scenario: data CSV with index columns, graph file, model spec
    JSON, and a sidecar tying them together.  Returns the file map."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    plan = scenario.plan
    idx = grid_indices(plan)
    columns = {"y": scenario.y, "t_idx": idx[0].astype(float)}
    if plan.has_age:
        columns["a_idx"] = idx[1].astype(float)
    columns["s_idx"] = idx[-1].astype(float)
    if plan.o_t == 2:
        columns["t_center"] = idx[0] - (plan.n_t - 1) / 2.0
    if plan.has_age and plan.o_a == 2:
        columns["a_center"] = idx[1] - (plan.n_a - 1) / 2.0
    modelspec.write_csv(directory / "scenario.csv", columns)

    space = next(c for c in scenario.model.components if c.name == "space")
    adjacency = -space.structure.copy()
    np.fill_diagonal(adjacency, 0.0)
    modelspec.write_graph_file(directory / "space.graph", adjacency)

    spec = scenario_model_spec(plan)
    (directory / "model.json").write_text(json.dumps(spec, indent=2) + "\n",
                                          encoding="utf-8")
    sidecar = {
        "plan": {
            "n_t": plan.n_t, "n_s": plan.n_s, "o_t": plan.o_t,
            "n_a": plan.n_a, "o_a": plan.o_a,
            "interactions": sorted(plan.interactions),
        },
        "seed": scenario.seed,
        "theta_true": list(map(float, scenario.theta_true)),
        "hyper_names": scenario.hyper_names,
        "mu": scenario.mu,
        "beta_t": scenario.beta_t,
        "files": {"data": "scenario.csv", "model": "model.json",
                  "graph": "space.graph"},
    }
    (directory / "scenario.json").write_text(json.dumps(sidecar, indent=2) + "\n",
                                             encoding="utf-8")
    return sidecar["files"]


def scenario_model_spec(plan: InteractionPlan) -> dict:
    """Model spec JSON matching write_scenario's file layout."""
    rw_kind = {1: "rw1", 2: "rw2"}
    comps = [{"name": "intercept", "kind": "intercept"}]
    if plan.o_t == 2:
        comps.append({"name": "beta_t", "kind": "fixed_slope", "column": "t_center"})
    if plan.has_age and plan.o_a == 2:
        comps.append({"name": "beta_a", "kind": "fixed_slope", "column": "a_center"})
    comps.append({"name": "time", "kind": rw_kind[plan.o_t], "size": plan.n_t,
                  "column": "t_idx", "hyper": "tau_time"})
    if plan.has_age:
        comps.append({"name": "age", "kind": rw_kind[plan.o_a], "size": plan.n_a,
                      "column": "a_idx", "hyper": "tau_age"})
    comps.append({"name": "space", "kind": "besag", "graph": "space.graph",
                  "column": "s_idx", "hyper": "tau_space"})
    part_t = {"kind": rw_kind[plan.o_t], "size": plan.n_t}
    part_a = {"kind": rw_kind[plan.o_a], "size": plan.n_a} if plan.has_age else None
    part_s = {"kind": "besag", "graph": "space.graph"}
    if "txa" in plan.interactions:
        comps.append({"name": "txa", "kind": "kron2", "parts": [part_t, part_a],
                      "columns": ["t_idx", "a_idx"], "hyper": "tau_txa"})
    if "txs" in plan.interactions:
        comps.append({"name": "txs", "kind": "kron2", "parts": [part_t, part_s],
                      "columns": ["t_idx", "s_idx"], "hyper": "tau_txs"})
    if "sxa" in plan.interactions:
        comps.append({"name": "sxa", "kind": "kron2", "parts": [part_s, part_a],
                      "columns": ["s_idx", "a_idx"], "hyper": "tau_sxa"})
    if "txaxs" in plan.interactions:
        comps.append({"name": "txaxs", "kind": "kron3",
                      "parts": [part_t, part_a, part_s],
                      "columns": ["t_idx", "a_idx", "s_idx"], "hyper": "tau_txaxs"})
    return {
        "components": comps,
        "likelihood": {"family": "poisson"},
        "priors": {},
        "response_column": "y",
    }


# ---------------------------------------------------------------------------
# crossed effects


@dataclass(frozen=True)
class CrossedResult:
    y: np.ndarray
    design: np.ndarray
    posterior_mean: np.ndarray
    density_fraction: float
    s: int


def crossed_posterior_mean(design: np.ndarray, y: np.ndarray, tau: float) -> np.ndarray:
    """Posterior mean of the crossed-effects model from its dense normal
    equations: (A^T A + tau I)^{-1} A^T y."""
    s = design.shape[1]
    return np.linalg.solve(design.T @ design + tau * np.eye(s), design.T @ y)


def simulate_crossed(n: int = 100, m: int = 10, tau: float = 1.0,
                     seed: int = 0) -> CrossedResult:
    """Two crossed random-intercept groups observed with Gaussian noise.

    Group labels are drawn with replacement from 1..m; the latent size is
    the number of distinct observed labels.  Returns the exact posterior
    mean solved from the dense normal equations and the fraction of
    structurally nonzero entries of the posterior precision.
    """
    rng = np.random.default_rng(seed)
    i_lab = rng.integers(0, m, size=n)
    j_lab = rng.integers(0, m, size=n)
    alpha = rng.standard_normal(m)
    gamma = rng.standard_normal(m)
    eps = rng.standard_normal(n) / math.sqrt(tau)
    y = alpha[i_lab] + gamma[j_lab] + eps

    i_levels = np.unique(i_lab)
    j_levels = np.unique(j_lab)
    s = len(i_levels) + len(j_levels)
    i_pos = {lab: k for k, lab in enumerate(i_levels)}
    j_pos = {lab: len(i_levels) + k for k, lab in enumerate(j_levels)}
    design = np.zeros((n, s))
    for r in range(n):
        design[r, i_pos[i_lab[r]]] = 1.0
        design[r, j_pos[j_lab[r]]] = 1.0

    q_star = design.T @ design + tau * np.eye(s)
    x_star = crossed_posterior_mean(design, y, tau)
    density = float(np.count_nonzero(q_star)) / (s * s)
    return CrossedResult(y, design, x_star, density, s)


def crossed_vs_nested_cov(n_plates: int, n_samples: int,
                          var_plate: float = 1.0,
                          var_sample: float = 1.0) -> Tuple[np.ndarray, np.ndarray]:
    """Prior covariance of the observations under nested and crossed designs.

    Observations are ordered sample-major.  Nested: every sample gets its
    own set of plates, so the covariance is block diagonal.  Crossed: the
    same plates are shared across samples, coupling observations between
    blocks.
    """
    n_obs = n_plates * n_samples
    z_sample = np.zeros((n_obs, n_samples))
    z_plate = np.zeros((n_obs, n_plates))
    for k in range(n_obs):
        sample, plate = divmod(k, n_plates)
        z_sample[k, sample] = 1.0
        z_plate[k, plate] = 1.0
    crossed = var_plate * z_plate @ z_plate.T + var_sample * z_sample @ z_sample.T
    # nested: plate indicators never repeat across samples
    nested = var_plate * np.eye(n_obs) + var_sample * z_sample @ z_sample.T
    return nested, crossed
