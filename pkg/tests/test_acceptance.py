"""Acceptance suite: one test per criterion, each printing a PASS line.

Run with ``pytest tests/test_acceptance.py -s`` to see the per-criterion
lines.  Every tolerance is pinned here; nothing is deferred to calibration.
"""

import json
import math
import os
import sys
import time
from pathlib import Path

import numpy as np
import pytest

from inlaplus import constraints as ce
from inlaplus import linalg, model as m, pipeline, simulate, stage1, stage2
from inlaplus.cli import main as cli_main
from inlaplus.constraints import ConstraintSet, InteractionPlan
from inlaplus.model import PrecisionStructure
from inlaplus.scheduler import TaskBatch, WorkerPool, run_batch
from inlaplus.stage2 import build_plan, gaussian_approx

from test_linalg import (
    A_WORKED,
    Q_PATH4,
    Q_PATH4_PINV_ROW0,
    QL_WORKED,
    SIGMA_WORKED_ROW0,
)

PINV_PRINTED = np.array([
    [0.875, 0.125, -0.375, -0.625],
    [0.125, 0.375, -0.125, -0.375],
    [-0.375, -0.125, 0.375, 0.125],
    [-0.625, -0.375, 0.125, 0.875],
])
SIGMA_PRINTED = np.array([
    [0.274, -0.044, -0.129, -0.102],
    [-0.044, 0.198, -0.025, -0.129],
    [-0.129, -0.025, 0.198, -0.044],
    [-0.102, -0.129, -0.044, 0.274],
])


def report(n, message):
    print(f"ACCEPTANCE {n:>2} PASS: {message}", file=sys.stderr)


@pytest.fixture(scope="module")
def spacetime_fit():
    """Shared fit of the time-space interaction model at (n_s=20, n_t=5)."""
    plan = InteractionPlan(n_t=5, n_s=20, o_t=2, interactions={"txs"})
    scenario = simulate.simulate_spacetime(plan, [0.7, 0.7, 1.5], seed=3, mu=3.0)
    result = pipeline.fit(scenario.model, scenario.y,
                          pipeline.FitOptions(workers=2),
                          hyper_names=scenario.hyper_names)
    return plan, scenario, result


def test_criterion_01_worked_example_reproduction():
    start = time.perf_counter()
    pinv = linalg.pseudo_inverse(Q_PATH4)
    assert np.abs(pinv.pinv - PINV_PRINTED).max() < 1e-3

    q_like = A_WORKED.T @ QL_WORKED @ A_WORKED
    sigma = linalg.woodbury_posterior_cov(pinv.pinv, q_like)
    assert np.abs(sigma - SIGMA_PRINTED).max() < 1e-3

    sigma_un = np.linalg.inv(q_like + Q_PATH4 + 1e-4 * np.eye(4))
    kriged = ce.kriging_correct(sigma_un, ConstraintSet(np.ones((1, 4))))
    assert np.abs(kriged - SIGMA_PRINTED).max() < 1e-3

    elapsed = time.perf_counter() - start
    assert elapsed < 1.0
    report(1, f"pseudoinverse, covariance update, and kriging reproduce the "
              f"worked 4x4 example to 1e-3 in {elapsed:.3f}s")


def test_criterion_02_constraint_arithmetic():
    rows = {200: (1207, 406), 400: (2407, 806), 800: (4807, 1606)}
    for n_s, (s, k) in rows.items():
        plan = InteractionPlan(n_t=5, n_s=n_s, o_t=2, interactions={"txs"})
        assert ce.latent_dimension(plan) == s
        assert ce.count_constraints(plan) == k
    three_way = InteractionPlan(n_t=25, n_s=50, o_t=1, n_a=9, o_a=1,
                                interactions={"txa", "txs", "sxa", "txaxs"})
    assert ce.count_constraints(three_way) == 2010
    report(2, "constraint table rows (1207/406, 2407/806, 4807/1606) and the "
              "2010-constraint three-way configuration reproduce exactly")


def test_criterion_03_plan_counts():
    class Frame:
        def __init__(self, t):
            self.theta = np.zeros(t)
            self.eig_vals = np.ones(t)
            self.eig_vecs = np.eye(t)
            self.log_volume = 0.0

        def theta_of_z(self, z):
            return np.asarray(z, dtype=float)

    plan6 = build_plan(Frame(6), "ccd")
    assert len(plan6) == 45
    for t in range(3, 9):
        plan = build_plan(Frame(t), "ccd")
        zs = np.stack([p.z for p in plan.points])
        ws = np.array([p.weight for p in plan.points])
        second = (zs.T * ws) @ zs
        assert np.abs(second - np.eye(t)).max() < 1e-10
        assert abs(ws.sum() - 1.0) < 1e-12
    report(3, "CCD gives exactly 45 points at t=6 and second-moment "
              "exactness to 1e-10 for t in 3..8")


def test_criterion_04_conjugate_exactness():
    rng = np.random.default_rng(1)
    a = rng.standard_normal((12, 4))
    comp = m.iid_component("u", 4, None, math.log(1.5))
    mdl = m.LatentModel((comp,), a, m.GaussianLikelihood(None, 2.0))
    y = rng.standard_normal(12)

    cond = gaussian_approx(mdl, y, np.zeros(0))
    assert cond.n_iter == 1

    result = pipeline.fit(mdl, y, pipeline.FitOptions(approx="ga"))
    q_star = 1.5 * np.eye(4) + 2.0 * a.T @ a
    mean = np.linalg.solve(q_star, 2.0 * a.T @ y)
    sd = np.sqrt(np.diag(np.linalg.inv(q_star)))
    assert np.abs(result.latent_mean - mean).max() < 1e-8
    assert np.abs(result.latent_sd - sd).max() < 1e-8
    report(4, "fixed-hyper Gaussian model: one-iteration inner solve, latent "
              "means/sds match the closed form to 1e-8")


def _poisson_iid_model(y, coord, s):
    y = np.asarray(y, dtype=float)
    coord = np.asarray(coord)
    comp = m.iid_component("x", s, hyper_index=0)
    design = np.zeros((len(y), s))
    design[np.arange(len(y)), coord] = 1.0
    return m.LatentModel((comp,), design, m.PoissonLikelihood(np.ones(len(y))),
                         (m.GaussianHyperPrior(0.0, 1.0),)), y


def _factorized_quadrature_means(y, coord, s):
    """Brute-force (x, theta) quadrature; given theta the coordinates are
    independent, so the latent integral factorizes into 1-D quadratures."""
    xg = np.linspace(-2.0, 5.0, 4001)
    tg = np.linspace(-5.0, 5.0, 401)
    log_evid = np.zeros(len(tg))
    cond_mean = np.zeros((len(tg), s))
    for k, th in enumerate(tg):
        tau = math.exp(th)
        le = -0.5 * th * th
        for i in range(s):
            yi = y[coord == i]
            lp = 0.5 * th - 0.5 * tau * xg**2 + yi.sum() * xg - len(yi) * np.exp(xg)
            top = lp.max()
            w = np.exp(lp - top)
            z = np.trapezoid(w, xg)
            cond_mean[k, i] = np.trapezoid(w * xg, xg) / z
            le += math.log(z) + top
        log_evid[k] = le
    wt = np.exp(log_evid - log_evid.max())
    return (wt @ cond_mean) / wt.sum()


def test_criterion_05_small_model_oracle():
    start = time.perf_counter()
    scenarios = [
        ([8, 12, 9, 5, 6, 7], [0, 0, 0, 1, 1, 1], 2),
        ([7, 9, 8, 12, 10, 11, 11, 13, 12], [0, 0, 0, 1, 1, 1, 2, 2, 2], 3),
    ]
    for y_vals, coord, s in scenarios:
        mdl, y = _poisson_iid_model(y_vals, coord, s)
        truth = _factorized_quadrature_means(y, np.asarray(coord), s)
        ga = pipeline.fit(mdl, y, pipeline.FitOptions(approx="ga", strategy="grid"))
        vba = pipeline.fit(mdl, y, pipeline.FitOptions(approx="vba", strategy="grid"))
        ga_err = np.abs(ga.latent_mean - truth) / np.abs(truth)
        vba_err = np.abs(vba.latent_mean - truth) / np.abs(truth)
        assert ga_err.max() < 0.02
        assert vba_err.max() < 0.01
        assert vba_err.max() < ga_err.max()
    elapsed = time.perf_counter() - start
    assert elapsed < 30.0
    report(5, f"quadrature oracle: plain approximation within 2%, corrected "
              f"mean within 1% and strictly closer, in {elapsed:.1f}s")


def test_criterion_06_constraint_bypass(spacetime_fit):
    plan, scenario, result = spacetime_fit
    spectrum = PrecisionStructure(scenario.model)
    c = spectrum.null_basis().T
    theta_star = result.posture.theta

    cond = gaussian_approx(scenario.model, scenario.y, theta_star,
                           spectrum=spectrum, want_cov=True)
    assert np.abs(c @ cond.mean).max() < 1e-6
    assert np.abs(c @ result.latent_mean).max() < 1e-6

    mean_k, cov_k, _ = ce.kriging_gaussian_approx(scenario.model, scenario.y,
                                                  theta_star)
    assert np.abs(cond.cov - cov_k).max() < 1e-4
    assert np.abs(cond.mean - mean_k).max() < 1e-4
    report(6, "time-space model (n_s=20): constraints hold to 1e-6 with no "
              "constraint matrix in the solve path; both paths agree to 1e-4")


def _simulate_cli_scenario(tmp_path):
    scen_dir = tmp_path / "scenario"
    code = cli_main([
        "simulate", "--nt", "3", "--ns", "6", "--interactions", "txs",
        "--theta-true", "1.5,1.5,2.5", "--mu", "1.0", "--seed", "8",
        "--out", str(scen_dir),
    ])
    assert code == 0
    return scen_dir


def test_criterion_07_determinism_and_throughput(tmp_path):
    scen_dir = _simulate_cli_scenario(tmp_path)
    outputs = {}
    for w in (1, 2, 4):
        out_dir = tmp_path / f"fit_w{w}"
        code = cli_main([
            "fit", str(scen_dir / "model.json"), str(scen_dir / "scenario.csv"),
            "--workers", str(w), "--seed", "1", "--out", str(out_dir),
        ])
        assert code == 0
        outputs[w] = {
            name: (out_dir / name).read_bytes()
            for name in ("report.json", "latent_marginals.csv", "hyper_marginals.csv")
        }
    for w in (2, 4):
        for name in outputs[1]:
            assert outputs[w][name] == outputs[1][name], f"workers={w} {name} differs"

    # throughput: a 16-evaluation batch on an s=2000 model must get strictly
    # faster from one worker to four (host-conditional: needs real cores)
    if (os.cpu_count() or 1) < 2:
        report(7, "outputs byte-identical across workers 1/2/4; throughput "
                  "comparison skipped on a single-core host")
        pytest.skip("throughput comparison needs at least two cores")
    s = 2000
    rng = np.random.default_rng(0)
    comp = m.iid_component("u", s, hyper_index=0)
    mdl = m.LatentModel((comp,), np.eye(s), m.GaussianLikelihood(None, 1.0),
                        (m.GaussianHyperPrior(),))
    y = rng.standard_normal(s)
    obj = stage1.HyperObjective(mdl, y)
    thetas = tuple(np.array([0.01 * k]) for k in range(16))
    batch = TaskBatch(thetas, "exploration")
    run_batch(TaskBatch(thetas[:2], "exploration"), WorkerPool(1), obj.evaluate)

    times = {}
    for w in (1, 4):
        obj._cache.clear()
        t0 = time.perf_counter()
        run_batch(batch, WorkerPool(w), obj.evaluate)
        times[w] = time.perf_counter() - t0
    assert times[4] < times[1], f"no speedup: {times}"
    report(7, f"outputs byte-identical across workers 1/2/4; 16-evaluation "
              f"batch at s=2000: {times[1]:.1f}s -> {times[4]:.1f}s with 4 workers")


def test_criterion_08_crossed_density_contrast():
    dense = np.mean([simulate.simulate_crossed(100, 10, 1.0, s).density_fraction
                     for s in range(20)])
    sparse = np.mean([simulate.simulate_crossed(100, 100, 1.0, s).density_fraction
                      for s in range(20)])
    assert dense / sparse >= 5.0
    report(8, f"posterior precision fill: {dense:.3f} at m=10 vs {sparse:.4f} "
              f"at m=100 ({dense / sparse:.1f}x over 20 seeds)")


def test_criterion_09_numerical_derivative_suite():
    # likelihood derivatives against central finite differences
    rng = np.random.default_rng(2)
    n = 6
    mdl = m.LatentModel(
        (m.iid_component("u", n, None, 0.0),), np.eye(n),
        m.PoissonLikelihood(rng.uniform(0.5, 2.0, n)),
    )
    eta = rng.uniform(-1, 1, n)
    y = rng.poisson(2.0, n).astype(float)
    grad, neg_hess = m.likelihood_derivatives(mdl, eta, y)
    h = 1e-5
    for i in range(n):
        ep, em = eta.copy(), eta.copy()
        ep[i] += h
        em[i] -= h
        fd = (m.log_likelihood(mdl, ep, y) - m.log_likelihood(mdl, em, y)) / (2 * h)
        assert abs(grad[i] - fd) < 1e-5 * (1 + abs(fd))

    # expected-loss slope and curvature against a dense quadrature oracle
    comp = m.iid_component("x", 1, None, 0.0)
    mdl1 = m.LatentModel((comp,), np.eye(1), m.PoissonLikelihood(np.ones(1)))
    y1 = np.array([2.0])
    cond = gaussian_approx(mdl1, y1, np.zeros(0))
    sigma = np.sqrt(np.einsum("ij,jk,ik->i", mdl1.design, cond.cov, mdl1.design))
    center = mdl1.design @ cond.mean

    def oracle_i(delta):
        etas = np.linspace(-12, 12, 400001)
        dens = np.exp(-0.5 * (etas - center[0] - delta) ** 2 / sigma[0] ** 2)
        dens /= np.trapezoid(dens, etas)
        return float(np.trapezoid(dens * (np.exp(etas) - y1[0] * etas), etas))

    i1, i2 = stage2.expected_loglik_derivs(mdl1, center, sigma, y1, cond.theta)
    hq = 1e-4
    d1 = (oracle_i(hq) - oracle_i(-hq)) / (2 * hq)
    d2 = (oracle_i(hq) - 2 * oracle_i(0.0) + oracle_i(-hq)) / hq**2
    assert abs(i1[0] - d1) < 1e-5 * (1 + abs(d1))
    assert abs(i2[0] - d2) < 1e-4 * (1 + abs(d2))

    # curvature recovery of a known quadratic within the evaluation budget
    prec = np.array([[2.0, 0.7], [0.7, 1.3]])

    class Quad:
        def __init__(self):
            self.eval_count = 0

        def evaluate(self, theta):
            self.eval_count += 1
            d = np.asarray(theta) - np.array([0.4, -0.6])
            return float(-0.5 * d @ prec @ d)

    obj = Quad()
    posture = stage1.find_mode(obj, np.zeros(2))
    obj.eval_count = 0
    hess = stage1.hessian_at_mode(obj, posture)
    assert obj.eval_count <= 2 * (2**2 + 2)
    assert np.abs(hess + prec).max() < 1e-5
    report(9, "derivatives match finite-difference and quadrature oracles to "
              "1e-5; curvature recovered within the 2(t^2+t) budget")


def test_truth_recovery_property(spacetime_fit):
    """Module property, not a numbered criterion: fitting simulated data
    recovers the latent truth (correlation above 0.9) on an informative
    time-space scenario of the same family as the scaling-table rows."""
    _, scenario, result = spacetime_fit
    corr = np.corrcoef(result.latent_mean, scenario.truth)[0, 1]
    assert corr > 0.9
    report("--", f"posterior means correlate {corr:.3f} with the simulated truth")


def test_criterion_10_besag_generator():
    n = 10
    for seed in range(100):
        graph = simulate.random_besag_graph(n, seed=seed)
        assert m.connected_components(graph.adjacency != 0) == 1
        w = np.linalg.eigvalsh(graph.structure)
        assert w[0] > -1e-10
        assert int(np.sum(w > 1e-9 * w[-1])) == n - 1
    report(10, "100 seeded graphs: all connected, structures PSD with rank n-1")
