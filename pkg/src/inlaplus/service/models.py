"""Pydantic request and response models of the service API.

These define the wire format of every endpoint and double as the schema for
the files the command line writes (``report.json`` is a serialized
FitReportModel without the wall-clock block).
"""

from __future__ import annotations

from typing import Dict, List, Literal, Optional

from pydantic import BaseModel, ConfigDict, Field


class FitOptionsModel(BaseModel):
    strategy: Literal["auto", "grid", "ccd", "eb"] = "auto"
    approx: Literal["ga", "vba"] = "vba"
    workers: int = Field(1, ge=1)
    threads_per_worker: int = Field(1, ge=1)
    seed: Optional[int] = None
    diff: Literal["central", "forward"] = "central"
    quad_order: int = Field(9, ge=1, le=64)


class FitRequest(BaseModel):
    model_config = ConfigDict(protected_namespaces=())

    model_spec: dict
    data_csv: str
    graphs: Dict[str, str] = Field(default_factory=dict)
    options: FitOptionsModel = FitOptionsModel()


class ModeSummary(BaseModel):
    theta: List[float]
    log_post: float
    iterations: int
    converged: bool
    grad_norm: float


class LatentSummary(BaseModel):
    index: int
    mean: float
    sd: float
    q025: float
    q50: float
    q975: float


class HyperMarginal(BaseModel):
    name: str
    mode: float
    mean: float
    sd: float
    grid: List[float]
    density: List[float]


class ConfigEcho(BaseModel):
    strategy: str
    approx: str
    seed: Optional[int] = None
    hyper_names: List[str]
    latent_size: int
    n_obs: int
    plan_points: int
    # worker layout never affects results; optional so the deterministic
    # report file can omit it
    workers: Optional[int] = None
    threads_per_worker: Optional[int] = None


class FitReportModel(BaseModel):
    config: ConfigEcho
    mode: ModeSummary
    hyper_marginals: List[HyperMarginal]
    latent: List[LatentSummary]
    log_marginal_likelihood: float
    dic: float
    p_eff: float
    evaluations: Dict[str, int]
    timings_seconds: Optional[Dict[str, float]] = None

    def file_body(self) -> dict:
        """The deterministic on-disk form of the report: wall-clock timings
        and the worker layout are diagnostics and stay out of the file, so
        identical fits write identical bytes regardless of worker count."""
        return self.model_dump(
            exclude={"timings_seconds": True,
                     "config": {"workers", "threads_per_worker"}},
            exclude_none=True,
        )


class PlanModel(BaseModel):
    n_t: int = Field(ge=1)
    n_s: int = Field(ge=2)
    o_t: Literal[1, 2] = 1
    n_a: Optional[int] = None
    o_a: Literal[1, 2] = 1
    interactions: List[str] = Field(default_factory=list)


class ConstraintsRequest(BaseModel):
    plan: PlanModel


class ConstraintsResponse(BaseModel):
    latent_size: int
    constraints: int


class SimulateRequest(BaseModel):
    plan: Optional[PlanModel] = None
    theta_true: List[float] = Field(default_factory=list)
    seed: int = 0
    mu: float = 0.0
    beta_t: float = 0.0
    graph_p: float = 0.3
    besag_n: Optional[int] = None  # graph-only generation when set


class SimulateResponse(BaseModel):
    files: Dict[str, str]


class ComparePathsRequest(BaseModel):
    model_config = ConfigDict(protected_namespaces=())

    model_spec: Optional[dict] = None
    data_csv: Optional[str] = None
    graphs: Dict[str, str] = Field(default_factory=dict)
    theta: Optional[List[float]] = None
    k_sweep: List[int] = Field(default_factory=list)
    sweep_size: int = Field(200, ge=10)


class KSweepEntry(BaseModel):
    k: int
    constraint_ops: int
    projection_ops: int


class ComparePathsResponse(BaseModel):
    max_cov_gap: Optional[float] = None
    max_mean_gap: Optional[float] = None
    constraints: Optional[int] = None
    pseudoinverse_ops: Dict[str, int] = Field(default_factory=dict)
    kriging_ops: Dict[str, int] = Field(default_factory=dict)
    k_sweep: List[KSweepEntry] = Field(default_factory=list)


class HealthResponse(BaseModel):
    status: str
    version: str
