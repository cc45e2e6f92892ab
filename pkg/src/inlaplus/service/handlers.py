"""Service handlers: the logic behind every endpoint.

Each handler is a pure function from a request model to a response model;
the FastAPI app and the command line both call these directly, so local and
remote runs share one code path.
"""

from __future__ import annotations

import tempfile
from pathlib import Path
from typing import Tuple

import numpy as np

from .. import __version__, constraints, modelspec, pipeline, simulate
from ..constraints import InteractionPlan, OpCounter
from ..model import PrecisionStructure
from ..stage2 import gaussian_approx
from . import models as sv


def _plan_from_model(plan: sv.PlanModel) -> InteractionPlan:
    return InteractionPlan(
        n_t=plan.n_t, n_s=plan.n_s, o_t=plan.o_t,
        n_a=plan.n_a, o_a=plan.o_a,
        interactions=frozenset(plan.interactions),
    )


def _materialize(spec: dict, data_csv: str, graphs: dict) -> modelspec.SpecifiedModel:
    """Build the model from inline spec, CSV text, and graph file contents."""
    with tempfile.TemporaryDirectory() as tmp:
        tmp_path = Path(tmp)
        for name, content in graphs.items():
            (tmp_path / name).write_text(content, encoding="utf-8")
        data_file = tmp_path / "data.csv"
        data_file.write_text(data_csv, encoding="utf-8")
        data = modelspec.read_csv(data_file)
        return modelspec.build_model(spec, data, base_dir=tmp_path)


def _grid_moments(theta: np.ndarray, dens: np.ndarray) -> Tuple[float, float]:
    mean = float(np.trapezoid(dens * theta, theta))
    var = float(np.trapezoid(dens * (theta - mean) ** 2, theta))
    return mean, float(np.sqrt(max(var, 0.0)))


def run_fit(request: sv.FitRequest) -> sv.FitReportModel:
    sm = _materialize(request.model_spec, request.data_csv, request.graphs)
    opts = request.options
    fit_options = pipeline.FitOptions(
        strategy=opts.strategy,
        approx=opts.approx,
        workers=opts.workers,
        threads_per_worker=opts.threads_per_worker,
        diff=opts.diff,
        quad_order=opts.quad_order,
        seed=opts.seed,
    )
    result = pipeline.fit(sm.model, sm.y, fit_options, hyper_names=sm.hyper_names)
    return build_report(result, sm, opts)


def build_report(result: pipeline.FitResult, sm: modelspec.SpecifiedModel,
                 opts: sv.FitOptionsModel) -> sv.FitReportModel:
    posture = result.posture
    hyper_marginals = []
    for axis, grid in enumerate(result.hyper_grids):
        mean, sd = _grid_moments(grid["theta"], grid["density"])
        hyper_marginals.append(sv.HyperMarginal(
            name=result.hyper_names[axis] if axis < len(result.hyper_names) else f"theta{axis}",
            mode=float(posture.theta[axis]),
            mean=mean,
            sd=sd,
            grid=[float(v) for v in grid["theta"]],
            density=[float(v) for v in grid["density"]],
        ))
    latent = [
        sv.LatentSummary(
            index=marg.index,
            mean=marg.mean,
            sd=marg.sd,
            q025=marg.quantile(0.025),
            q50=marg.quantile(0.5),
            q975=marg.quantile(0.975),
        )
        for marg in result.marginals
    ]
    config = sv.ConfigEcho(
        strategy=result.plan.strategy,
        approx=result.options.approx,
        workers=result.options.workers,
        threads_per_worker=result.options.threads_per_worker,
        seed=opts.seed,
        hyper_names=result.hyper_names,
        latent_size=sm.model.total_size,
        n_obs=sm.model.n_obs,
        plan_points=len(result.plan),
    )
    return sv.FitReportModel(
        config=config,
        mode=sv.ModeSummary(
            theta=[float(v) for v in posture.theta],
            log_post=float(posture.log_post),
            iterations=posture.n_iter,
            converged=posture.converged,
            grad_norm=float(posture.grad_norm),
        ),
        hyper_marginals=hyper_marginals,
        latent=latent,
        log_marginal_likelihood=result.log_marginal_likelihood,
        dic=result.dic,
        p_eff=result.p_eff,
        evaluations=result.evaluations,
        timings_seconds={k: float(v) for k, v in result.timings.items()},
    )


def run_constraints(request: sv.ConstraintsRequest) -> sv.ConstraintsResponse:
    plan = _plan_from_model(request.plan)
    return sv.ConstraintsResponse(
        latent_size=constraints.latent_dimension(plan),
        constraints=constraints.count_constraints(plan),
    )


def run_simulate(request: sv.SimulateRequest) -> sv.SimulateResponse:
    if request.besag_n is not None:
        graph = simulate.random_besag_graph(request.besag_n, p=request.graph_p,
                                            seed=request.seed)
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / "space.graph"
            modelspec.write_graph_file(path, graph.adjacency)
            return sv.SimulateResponse(files={"space.graph": path.read_text()})
    if request.plan is None:
        raise ValueError("either 'plan' or 'besag_n' must be given")
    plan = _plan_from_model(request.plan)
    scenario = simulate.simulate_spacetime(
        plan, request.theta_true, seed=request.seed,
        mu=request.mu, beta_t=request.beta_t, graph_p=request.graph_p,
    )
    with tempfile.TemporaryDirectory() as tmp:
        tmp_path = Path(tmp)
        files = simulate.write_scenario(scenario, tmp_path)
        contents = {name: (tmp_path / name).read_text(encoding="utf-8")
                    for name in list(files.values()) + ["scenario.json"]}
    return sv.SimulateResponse(files=contents)


def run_compare_paths(request: sv.ComparePathsRequest) -> sv.ComparePathsResponse:
    response = sv.ComparePathsResponse()
    if request.model_spec is not None:
        if request.data_csv is None:
            raise ValueError("compare-paths needs data_csv together with model_spec")
        sm = _materialize(request.model_spec, request.data_csv, request.graphs)
        model = sm.model
        theta = (np.zeros(model.n_hyper) if request.theta is None
                 else np.asarray(request.theta, dtype=float))
        spectrum = PrecisionStructure(model)
        # converge both paths well below the comparison scale so the
        # reported gap reflects the methods, not the stopping rule
        cond = gaussian_approx(model, sm.y, theta, spectrum=spectrum,
                               want_cov=True, tol=1e-12)
        ops = OpCounter()
        mean_k, cov_k, iters = constraints.kriging_gaussian_approx(
            model, sm.y, theta, ops=ops, tol=1e-12,
        )
        response.max_cov_gap = float(np.abs(cond.cov - cov_k).max())
        response.max_mean_gap = float(np.abs(cond.mean - mean_k).max())
        response.constraints = spectrum.deficiency
        response.pseudoinverse_ops = {
            "newton_iterations": cond.n_iter,
            "covariance_updates": cond.n_iter,
        }
        response.kriging_ops = {
            "newton_iterations": iters,
            "constraint_ops": ops.constraint_ops,
            "projection_ops": ops.projection_ops,
        }
    for k in request.k_sweep:
        rng = np.random.default_rng(k)
        s = request.sweep_size
        a = rng.standard_normal((s, s))
        sigma = a @ a.T + np.eye(s)
        cset = constraints.ConstraintSet(rng.standard_normal((k, s)))
        ops = OpCounter()
        constraints.kriging_correct(sigma, cset, ops=ops)
        response.k_sweep.append(sv.KSweepEntry(
            k=k, constraint_ops=ops.constraint_ops, projection_ops=ops.projection_ops,
        ))
    return response


def health() -> sv.HealthResponse:
    return sv.HealthResponse(status="ok", version=__version__)
