"""Pydantic request/response models for the HTTP service."""

from __future__ import annotations

from typing import Optional

from pydantic import BaseModel, Field


class HealthResponse(BaseModel):
    status: str = "ok"
    version: str


class ErrorBody(BaseModel):
    error_kind: str
    detail: str


class PlanRequest(BaseModel):
    config_path: str
    regime: Optional[str] = None  # overrides the config's regime


class PlanStageRow(BaseModel):
    name: str
    depth: int
    growth: int
    trainable_layers: list[int]
    steps: int
    forward_flops: int
    backward_flops: int
    comm_bytes: int
    trainable_params: int
    relative_step_cost_vs_scratch: float


class PlanResponse(BaseModel):
    regime: str
    total_steps: int
    stages: list[PlanStageRow]
    total_flops: int
    scratch_total_flops: int
    relative_total_cost_vs_scratch: float
    table: str


class TrainRequest(BaseModel):
    config_path: str
    seed: Optional[int] = None
    out_dir: Optional[str] = None
    resume: bool = False


class TrainSubmitResponse(BaseModel):
    job_id: str


class JobStatusResponse(BaseModel):
    job_id: str
    state: str  # queued | running | done | error
    error_kind: Optional[str] = None
    detail: Optional[str] = None
    summary: Optional[dict] = None
    out_dir: Optional[str] = None


class GradcheckRequest(BaseModel):
    config_path: Optional[str] = None  # None -> built-in tiny check config
    mutate: bool = False
    eps: float = 2e-3
    max_coords_per_param: Optional[int] = 64
    seed: int = 0


class GradcheckResponse(BaseModel):
    passed: bool
    threshold: float
    global_max_rel_error: float
    worst_parameter: str
    coords_checked: int
    per_parameter: dict[str, float]


class AnalyzeAttentionRequest(BaseModel):
    checkpoint_a: str
    checkpoint_b: str
    probes_path: Optional[str] = None  # None -> packaged default probe set
    vocab_path: Optional[str] = None  # None -> vocab.txt near checkpoint_a
    layers: Optional[str] = Field(None, description="layer range 'A..B' (inclusive)")
    out_dir: Optional[str] = None


class DriftRow(BaseModel):
    layer: int
    head: int
    js: float


class AnalyzeAttentionResponse(BaseModel):
    layers: list[int]
    drift: list[DriftRow]
    mean_js: float
    cls_sep_mass_a: list[dict]
    cls_sep_mass_b: list[dict]
    files: list[str]
    table: str


class CompareRequest(BaseModel):
    run_dirs: list[str]
    out_dir: Optional[str] = None


class CompareResponse(BaseModel):
    table: str
    rows: list[dict]
    files: list[str]
