"""End-to-end fit: hyperparameter stage, exploration, latent mixing.

Everything downstream of the raw model is orchestrated here so the service
layer and the command line share one code path.  All results are pure
functions of (model, data, options); wall-clock timings are the only
nondeterministic output and are kept separate from the result fields.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import scheduler, stage1, stage2
from .errors import InferenceFailure, InlaPlusError
from .model import LatentModel, PrecisionStructure
from .stage1 import HyperObjective, HyperPosture
from .stage2 import ConditionalPosterior, ExplorationPlan, LatentMarginal


@dataclass(frozen=True)
class FitOptions:
    strategy: str = "auto"  # auto | grid | ccd | eb
    approx: str = "vba"     # ga | vba
    workers: int = 1
    threads_per_worker: int = 1
    diff: str = "central"
    quad_order: int = stage2.DEFAULT_QUAD_ORDER
    theta0: Optional[Sequence[float]] = None
    seed: Optional[int] = None

    def resolved_strategy(self, t: int) -> str:
        if self.strategy == "auto":
            if t == 0:
                return "empirical_bayes"
            return "ccd" if t >= 3 else "grid"
        return {"eb": "empirical_bayes"}.get(self.strategy, self.strategy)


@dataclass
class FitResult:
    posture: HyperPosture
    plan: ExplorationPlan
    conditionals: List[ConditionalPosterior]
    marginals: List[LatentMarginal]
    hyper_grids: List[Dict[str, np.ndarray]]
    log_marginal_likelihood: float
    dic: float
    p_eff: float
    evaluations: Dict[str, int]
    timings: Dict[str, float]
    options: FitOptions
    hyper_names: List[str] = field(default_factory=list)

    @property
    def latent_mean(self) -> np.ndarray:
        return np.array([m.mean for m in self.marginals])

    @property
    def latent_sd(self) -> np.ndarray:
        return np.array([m.sd for m in self.marginals])


def fit(model: LatentModel, y: np.ndarray, options: FitOptions = FitOptions(),
        hyper_names: Optional[List[str]] = None) -> FitResult:
    """Run both inference stages and return the assembled results.

    Failures carry the stage name (mode_search, curvature, scalings,
    exploration, latent, mixing) for the caller's error reporting.
    """
    y = np.asarray(y, dtype=float)
    pool = scheduler.WorkerPool(options.workers, options.threads_per_worker)
    spectrum = PrecisionStructure(model)
    obj = HyperObjective(model, y, spectrum)
    t = model.n_hyper
    timings: Dict[str, float] = {}
    evaluations: Dict[str, int] = {}

    def staged(name):
        class _Timer:
            def __enter__(self_inner):
                self_inner.start = time.perf_counter()
                self_inner.count0 = obj.eval_count
                return self_inner

            def __exit__(self_inner, exc_type, exc, tb):
                timings[name] = time.perf_counter() - self_inner.start
                evaluations[name] = obj.eval_count - self_inner.count0
                if exc is not None and isinstance(exc, InlaPlusError):
                    raise InferenceFailure(name, exc) from exc
                return False

        return _Timer()

    theta0 = np.zeros(t) if options.theta0 is None else np.asarray(options.theta0, dtype=float)
    with staged("mode_search"):
        posture = stage1.find_mode(obj, theta0, diff=options.diff, pool=pool)
    with staged("curvature"):
        posture.attach_hessian(stage1.hessian_at_mode(obj, posture, pool=pool))
    with staged("scalings"):
        stage1.fit_asymmetric_scalings(obj, posture, pool=pool)

    strategy = options.resolved_strategy(t)
    with staged("exploration"):
        plan = stage2.build_plan(posture, strategy)

    use_vb = options.approx == "vba"

    def conditional_task(theta):
        cond = obj.conditional(theta)
        if use_vb:
            mu = stage2.vb_correct_mean(cond, model, y, quad_order=options.quad_order,
                                        spectrum=spectrum)
            cond = replace(cond, vb_correction=mu - cond.mean)
        # keep first and second moments, drop the dense covariance
        return cond.slim()

    with staged("latent"):
        batch = scheduler.TaskBatch(tuple(p.theta for p in plan.points), "latent_per_point")
        conds = scheduler.run_batch(batch, pool, conditional_task)

    with staged("mixing"):
        # plan-point objective values are cached by the batch above
        lml = stage1.log_marginal_likelihood(obj, plan)
        marginals = stage2.integrate_marginals(plan, conds, use_vb_mean=use_vb)
        dic_value, p_eff = stage2.dic(plan, conds, model, y, use_vb_mean=use_vb)
        hyper_grids = []
        for axis in range(t):
            theta_vals, dens = stage1.hyper_marginal(posture, obj, axis)
            hyper_grids.append({"theta": theta_vals, "density": dens})

    timings["total"] = sum(timings.values())
    evaluations["total"] = obj.eval_count
    return FitResult(
        posture=posture,
        plan=plan,
        conditionals=list(conds),
        marginals=marginals,
        hyper_grids=hyper_grids,
        log_marginal_likelihood=lml,
        dic=dic_value,
        p_eff=p_eff,
        evaluations=evaluations,
        timings=timings,
        options=options,
        hyper_names=list(hyper_names or []),
    )
