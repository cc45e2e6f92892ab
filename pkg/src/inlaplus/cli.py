"""Command-line client.

Subcommands map one-to-one onto the service endpoints; by default requests
are handled in-process, with ``--server URL`` they are POSTed to a running
service instead.  All file I/O stays on the client side: model specs, data
tables, and graph files are read here, results are written here.

Exit codes: 0 success, 2 model-spec problem, 3 data problem, 4 inference
failure (the failing stage is printed).  ``INLA_PLUS_WORKERS`` provides the
default worker count when ``--workers`` is not given.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import urllib.error
import urllib.request
from pathlib import Path

from .errors import (
    DataMismatchError,
    InferenceFailure,
    InlaPlusError,
    ModelSpecError,
)
from .modelspec import FLOAT_FORMAT, load_model_spec
from .service import handlers
from .service import models as sv

EXIT_OK = 0
EXIT_SPEC = 2
EXIT_DATA = 3
EXIT_INFERENCE = 4

PLAN_PRESETS = {
    "t5_s200": dict(n_t=5, n_s=200, o_t=2, interactions=["txs"]),
    "t5_s400": dict(n_t=5, n_s=400, o_t=2, interactions=["txs"]),
    "t5_s800": dict(n_t=5, n_s=800, o_t=2, interactions=["txs"]),
    "t5_s20": dict(n_t=5, n_s=20, o_t=2, interactions=["txs"]),
    "spain_3way": dict(n_t=25, n_s=50, o_t=1, n_a=9, o_a=1,
                       interactions=["txa", "txs", "sxa", "txaxs"]),
}


def _default_workers() -> int:
    env = os.environ.get("INLA_PLUS_WORKERS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            print(f"warning: ignoring invalid INLA_PLUS_WORKERS={env!r}", file=sys.stderr)
    return 1


def _post(server: str, path: str, payload: dict) -> dict:
    url = server.rstrip("/") + path
    body = json.dumps(payload).encode("utf-8")
    req = urllib.request.Request(url, data=body,
                                 headers={"Content-Type": "application/json"})
    with urllib.request.urlopen(req) as resp:
        return json.loads(resp.read().decode("utf-8"))


def _remote_exit_code(status: int) -> int:
    return {422: EXIT_SPEC, 400: EXIT_DATA}.get(status, EXIT_INFERENCE)


def _collect_graphs(spec: dict, base_dir: Path) -> dict:
    """Read every graph file the spec references, keyed by its name."""
    names = set()
    for comp in spec.get("components", []):
        if "graph" in comp:
            names.add(comp["graph"])
        for part in comp.get("parts", []) or []:
            if "graph" in part:
                names.add(part["graph"])
    graphs = {}
    for name in sorted(names):
        path = base_dir / name
        if not path.exists():
            raise ModelSpecError(f"referenced graph file not found: {path}")
        graphs[name] = path.read_text(encoding="utf-8")
    return graphs


def _plan_from_args(args) -> sv.PlanModel:
    if args.plan:
        if args.plan not in PLAN_PRESETS:
            raise ValueError(
                f"unknown plan preset {args.plan!r}; choose from {sorted(PLAN_PRESETS)}"
            )
        return sv.PlanModel(**PLAN_PRESETS[args.plan])
    if args.nt is None or args.ns is None:
        raise ValueError("either --plan PRESET or --nt/--ns must be given")
    interactions = [x for x in (args.interactions or "").split(",") if x]
    return sv.PlanModel(n_t=args.nt, n_s=args.ns, o_t=args.ot,
                        n_a=args.na, o_a=args.oa, interactions=interactions)


def _write_fit_outputs(report: sv.FitReportModel, out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "report.json").write_text(
        json.dumps(report.file_body(), indent=2) + "\n", encoding="utf-8"
    )
    with open(out_dir / "latent_marginals.csv", "w", encoding="utf-8") as fh:
        fh.write("index,mean,sd,q025,q50,q975\n")
        for row in report.latent:
            vals = (row.mean, row.sd, row.q025, row.q50, row.q975)
            fh.write(str(row.index) + "," + ",".join(FLOAT_FORMAT % v for v in vals) + "\n")
    with open(out_dir / "hyper_marginals.csv", "w", encoding="utf-8") as fh:
        fh.write("hyper,theta,density\n")
        for hm in report.hyper_marginals:
            for theta, dens in zip(hm.grid, hm.density):
                fh.write(f"{hm.name}," + FLOAT_FORMAT % theta + "," + FLOAT_FORMAT % dens + "\n")


def cmd_fit(args) -> int:
    try:
        spec = load_model_spec(args.model_spec)
        base_dir = Path(args.model_spec).parent
        graphs = _collect_graphs(spec, base_dir)
    except ModelSpecError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_SPEC
    data_path = Path(args.data)
    if not data_path.exists():
        print(f"error: data file not found: {data_path}", file=sys.stderr)
        return EXIT_DATA
    request = sv.FitRequest(
        model_spec=spec,
        data_csv=data_path.read_text(encoding="utf-8"),
        graphs=graphs,
        options=sv.FitOptionsModel(
            strategy=args.strategy,
            approx=args.approx,
            workers=args.workers,
            threads_per_worker=args.threads_per_worker,
            seed=args.seed,
            diff=args.diff,
        ),
    )
    try:
        if args.server:
            report = sv.FitReportModel.model_validate(
                _post(args.server, "/fit", request.model_dump())
            )
        else:
            report = handlers.run_fit(request)
    except ModelSpecError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_SPEC
    except DataMismatchError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except InferenceFailure as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INFERENCE
    except urllib.error.HTTPError as exc:
        print(f"error: server returned {exc.code}: {exc.read().decode()}", file=sys.stderr)
        return _remote_exit_code(exc.code)
    except InlaPlusError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INFERENCE

    _write_fit_outputs(report, Path(args.out))
    if report.timings_seconds:
        stages = ", ".join(f"{k}={v:.3f}s" for k, v in report.timings_seconds.items())
        print(f"stage timings: {stages}", file=sys.stderr)
    print(f"report written to {Path(args.out) / 'report.json'}")
    return EXIT_OK


def cmd_simulate(args) -> int:
    try:
        if args.besag_n is not None:
            request = sv.SimulateRequest(besag_n=args.besag_n, seed=args.seed,
                                         graph_p=args.graph_p)
        else:
            plan = _plan_from_args(args)
            theta_true = [float(x) for x in args.theta_true.split(",") if x]
            request = sv.SimulateRequest(plan=plan, theta_true=theta_true,
                                         seed=args.seed, mu=args.mu,
                                         beta_t=args.beta_t, graph_p=args.graph_p)
        if args.server:
            response = sv.SimulateResponse.model_validate(
                _post(args.server, "/simulate", request.model_dump())
            )
        else:
            response = handlers.run_simulate(request)
    except urllib.error.HTTPError as exc:
        print(f"error: server returned {exc.code}", file=sys.stderr)
        return _remote_exit_code(exc.code)
    except (ValueError, InlaPlusError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_SPEC
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    for name, content in sorted(response.files.items()):
        (out_dir / name).write_text(content, encoding="utf-8")
        print(f"wrote {out_dir / name}")
    return EXIT_OK


def cmd_constraints(args) -> int:
    try:
        request = sv.ConstraintsRequest(plan=_plan_from_args(args))
        if args.server:
            response = sv.ConstraintsResponse.model_validate(
                _post(args.server, "/constraints", request.model_dump())
            )
        else:
            response = handlers.run_constraints(request)
    except urllib.error.HTTPError as exc:
        print(f"error: server returned {exc.code}", file=sys.stderr)
        return _remote_exit_code(exc.code)
    except (ValueError, InlaPlusError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_SPEC
    print(f"s={response.latent_size} k={response.constraints}")
    return EXIT_OK


def cmd_compare_paths(args) -> int:
    request_kwargs = {}
    if args.model_spec:
        try:
            spec = load_model_spec(args.model_spec)
            graphs = _collect_graphs(spec, Path(args.model_spec).parent)
        except ModelSpecError as exc:
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_SPEC
        data_path = Path(args.data) if args.data else None
        if data_path is None or not data_path.exists():
            print("error: compare-paths needs an existing data file", file=sys.stderr)
            return EXIT_DATA
        request_kwargs.update(
            model_spec=spec,
            data_csv=data_path.read_text(encoding="utf-8"),
            graphs=graphs,
        )
        if args.theta:
            request_kwargs["theta"] = [float(x) for x in args.theta.split(",")]
    if args.k_sweep:
        request_kwargs["k_sweep"] = [int(k) for k in args.k_sweep.split(",")]
    if not request_kwargs:
        print("error: give a model spec and data file, or --k-sweep", file=sys.stderr)
        return EXIT_SPEC
    request = sv.ComparePathsRequest(**request_kwargs)
    try:
        if args.server:
            response = sv.ComparePathsResponse.model_validate(
                _post(args.server, "/compare-paths", request.model_dump())
            )
        else:
            response = handlers.run_compare_paths(request)
    except ModelSpecError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_SPEC
    except DataMismatchError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except urllib.error.HTTPError as exc:
        print(f"error: server returned {exc.code}", file=sys.stderr)
        return _remote_exit_code(exc.code)
    except (ValueError, InlaPlusError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INFERENCE

    if response.max_cov_gap is not None:
        print(f"constraints k={response.constraints}")
        print(f"max covariance gap: {response.max_cov_gap:.3e}")
        print(f"max mean gap: {response.max_mean_gap:.3e}")
        print(f"pseudoinverse path ops: {response.pseudoinverse_ops}")
        print(f"kriging path ops: {response.kriging_ops}")
    for entry in response.k_sweep:
        print(f"k={entry.k} constraint_ops={entry.constraint_ops} "
              f"projection_ops={entry.projection_ops}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="inlaplus",
        description="Dense-matrix approximate Bayesian inference for latent Gaussian models",
    )
    parser.add_argument("--server", default=None,
                        help="URL of a running service; default is in-process")
    sub = parser.add_subparsers(dest="command", required=True)

    p_fit = sub.add_parser("fit", help="fit a model spec to a data table")
    p_fit.add_argument("model_spec")
    p_fit.add_argument("data")
    p_fit.add_argument("--strategy", choices=["auto", "grid", "ccd", "eb"],
                       default="auto")
    p_fit.add_argument("--approx", choices=["ga", "vba"], default="vba")
    p_fit.add_argument("--workers", type=int, default=_default_workers())
    p_fit.add_argument("--threads-per-worker", type=int, default=1)
    p_fit.add_argument("--seed", type=int, default=None)
    p_fit.add_argument("--diff", choices=["central", "forward"], default="central")
    p_fit.add_argument("--out", default="out")
    p_fit.set_defaults(func=cmd_fit)

    p_sim = sub.add_parser("simulate", help="generate a synthetic scenario")
    p_sim.add_argument("--plan", default=None,
                       help=f"preset name: {', '.join(sorted(PLAN_PRESETS))}")
    p_sim.add_argument("--nt", type=int, default=None)
    p_sim.add_argument("--ns", type=int, default=None)
    p_sim.add_argument("--ot", type=int, choices=[1, 2], default=1)
    p_sim.add_argument("--na", type=int, default=None)
    p_sim.add_argument("--oa", type=int, choices=[1, 2], default=1)
    p_sim.add_argument("--interactions", default="txs")
    p_sim.add_argument("--theta-true", default="1.0,1.0,2.0")
    p_sim.add_argument("--mu", type=float, default=0.0)
    p_sim.add_argument("--beta-t", type=float, default=0.0)
    p_sim.add_argument("--graph-p", type=float, default=0.3)
    p_sim.add_argument("--besag-n", type=int, default=None,
                       help="generate only a random connected graph of this size")
    p_sim.add_argument("--seed", type=int, default=0)
    p_sim.add_argument("--out", default="scenario")
    p_sim.set_defaults(func=cmd_simulate)

    p_con = sub.add_parser("constraints", help="report latent size and constraint count")
    p_con.add_argument("--plan", default=None)
    p_con.add_argument("--nt", type=int, default=None)
    p_con.add_argument("--ns", type=int, default=None)
    p_con.add_argument("--ot", type=int, choices=[1, 2], default=1)
    p_con.add_argument("--na", type=int, default=None)
    p_con.add_argument("--oa", type=int, choices=[1, 2], default=1)
    p_con.add_argument("--interactions", default="")
    p_con.set_defaults(func=cmd_constraints)

    p_cmp = sub.add_parser("compare-paths",
                           help="pseudoinverse versus kriging constraint handling")
    p_cmp.add_argument("model_spec", nargs="?", default=None)
    p_cmp.add_argument("data", nargs="?", default=None)
    p_cmp.add_argument("--theta", default=None, help="comma-separated evaluation point")
    p_cmp.add_argument("--k-sweep", default=None,
                       help="comma-separated constraint counts for the cost sweep")
    p_cmp.set_defaults(func=cmd_compare_paths)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
