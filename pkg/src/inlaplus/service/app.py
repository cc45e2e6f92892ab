"""FastAPI application exposing the inference engine.

Endpoints mirror the CLI subcommands: POST /fit, /simulate, /constraints,
/compare-paths, and GET /health.  Spec or data problems map to 422/400;
inference failures surface as 500 with the failing stage in the detail.
"""

from __future__ import annotations

from fastapi import FastAPI, HTTPException

from ..errors import DataMismatchError, InferenceFailure, ModelSpecError
from . import handlers
from . import models as sv


def create_app() -> FastAPI:
    app = FastAPI(
        title="inlaplus",
        description="Dense-matrix approximate Bayesian inference for latent Gaussian models",
    )

    @app.get("/health", response_model=sv.HealthResponse)
    def get_health():
        return handlers.health()

    @app.post("/fit", response_model=sv.FitReportModel)
    def post_fit(request: sv.FitRequest):
        try:
            return handlers.run_fit(request)
        except ModelSpecError as exc:
            raise HTTPException(status_code=422, detail=f"model spec: {exc}")
        except DataMismatchError as exc:
            raise HTTPException(status_code=400, detail=f"data: {exc}")
        except InferenceFailure as exc:
            raise HTTPException(status_code=500, detail=str(exc))

    @app.post("/simulate", response_model=sv.SimulateResponse)
    def post_simulate(request: sv.SimulateRequest):
        try:
            return handlers.run_simulate(request)
        except ValueError as exc:
            raise HTTPException(status_code=422, detail=str(exc))

    @app.post("/constraints", response_model=sv.ConstraintsResponse)
    def post_constraints(request: sv.ConstraintsRequest):
        try:
            return handlers.run_constraints(request)
        except ValueError as exc:
            raise HTTPException(status_code=422, detail=str(exc))

    @app.post("/compare-paths", response_model=sv.ComparePathsResponse)
    def post_compare_paths(request: sv.ComparePathsRequest):
        try:
            return handlers.run_compare_paths(request)
        except ModelSpecError as exc:
            raise HTTPException(status_code=422, detail=f"model spec: {exc}")
        except DataMismatchError as exc:
            raise HTTPException(status_code=400, detail=f"data: {exc}")
        except ValueError as exc:
            raise HTTPException(status_code=422, detail=str(exc))

    return app


app = create_app()
