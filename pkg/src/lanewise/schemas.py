"""Request and response models for the HTTP service."""
from __future__ import annotations

from typing import Optional

from pydantic import BaseModel, Field


class SynthRequest(BaseModel):
    config: dict = Field(default_factory=dict, description="run config overrides; scenario under 'scenario'")


class SynthResponse(BaseModel):
    samples_csv: str
    truth_csv: str
    config_sha256: str
    seed: int
    injections: list[dict]


class TrainRequest(BaseModel):
    samples_csv: str
    config: dict = Field(default_factory=dict)
    exclude_csv: Optional[str] = Field(None, description="ground truth or verified windows kept out of training")


class TrainResponse(BaseModel):
    bundle_b64: str
    loss_log_csv: str
    summary: dict


class DetectRequest(BaseModel):
    bundle_b64: str
    samples_csv: str


class DetectResponse(BaseModel):
    verdicts_csv: str
    n_windows: int
    n_flagged: int


class EvaluateRequest(BaseModel):
    verdicts_csv: str
    labels_csv: str
    overlap_k: int = Field(3, ge=1)
    balance: bool = True
    seed: int = 0


class EvaluateResponse(BaseModel):
    report_text: str
    report_csv: str
    metrics: dict
    deep_auc: Optional[float]


class ProposeRequest(BaseModel):
    samples_csv: str
    config: dict = Field(default_factory=dict)
    contamination: Optional[float] = Field(None, gt=0.0, le=0.5)


class ProposeResponse(BaseModel):
    candidates_csv: str
    n_candidates: int


class ReviewRequest(BaseModel):
    candidates_csv: str
    decisions_csv: str


class ReviewResponse(BaseModel):
    verified_csv: str
    tally: dict


class Health(BaseModel):
    status: str
    version: str
    bundle_format_version: int
