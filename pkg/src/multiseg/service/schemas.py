"""Pydantic request/response models for the experiment service."""

from __future__ import annotations

from pydantic import BaseModel, Field, field_validator

from ..experiments import resolve_model_name


class GenDataRequest(BaseModel):
    n_cases: int = Field(gt=0)
    shape: tuple[int, int, int] = (32, 32, 32)
    seed: int = 0
    out_dir: str
    force: bool = False
    difficulty: dict = Field(default_factory=dict)
    split_counts: tuple[int, int, int, int] | None = None


class GenDataResponse(BaseModel):
    manifest: str
    n_cases: int
    digest: str


class RunConfigModel(BaseModel):
    model: str = "CPCseg"
    n_labeled: int = Field(default=8, gt=0)
    n_unlabeled: int = Field(default=0, ge=0)
    n_val: int = Field(default=8, ge=0)
    n_test: int = Field(default=8, ge=0)
    split_seed: int = 0
    seed: int = 0
    model_overrides: dict = Field(default_factory=dict)
    train_overrides: dict = Field(default_factory=dict)

    @field_validator("model")
    @classmethod
    def _known_model(cls, v: str) -> str:
        return resolve_model_name(v)


class TrainRequest(BaseModel):
    manifest: str
    out_dir: str
    config: RunConfigModel = Field(default_factory=RunConfigModel)


class TrainResponse(BaseModel):
    checkpoint: str
    log_file: str
    curve_file: str | None
    steps: int
    warnings: list[str]
    final_test_dice: dict[str, float] | None


class EvalRequest(BaseModel):
    checkpoint: str
    manifest: str
    split: str = "test"
    out_csv: str | None = None


class ResultRowModel(BaseModel):
    model: str
    n_labels: int
    n_unlabeled: int
    seed: int
    region: str
    dice: float
    hd95: float | None


class EvalResponse(BaseModel):
    rows: list[ResultRowModel]
    csv: str | None
    hd95_undefined: dict[str, int]
    n_cases: int


class ExperimentSpecModel(BaseModel):
    models: list[str] = ["EncDec", "CPCseg", "ssCPCseg"]
    label_counts: list[int] = [2, 4, 8, 16]
    n_unlabeled: int = Field(default=0, ge=0)
    unlabeled_counts: list[int] | None = None
    seeds: list[int] = [0]
    n_val: int = Field(default=8, ge=0)
    n_test: int = Field(default=8, ge=0)
    split_seed: int = 0
    model_overrides: dict = Field(default_factory=dict)
    train_overrides: dict = Field(default_factory=dict)

    @field_validator("models")
    @classmethod
    def _known_models(cls, v: list[str]) -> list[str]:
        return [resolve_model_name(m) for m in v]


class SweepRequest(BaseModel):
    manifest: str
    out_dir: str
    spec: ExperimentSpecModel = Field(default_factory=ExperimentSpecModel)


class SweepResponse(BaseModel):
    results_csv: str
    summary_path: str
    n_runs: int
    n_failures: int
    trend: list[dict]
    failures: list[dict]


class GradcheckRequest(BaseModel):
    # defaults run the full release-gate suite; narrower scopes are for
    # interactive use
    seeds: list[int] | None = None
    include_model: bool = True


class GradcheckEntryModel(BaseModel):
    name: str
    max_rel_error: float
    tolerance: float
    passed: bool


class GradcheckResponse(BaseModel):
    passed: bool
    entries: list[GradcheckEntryModel]


class HealthResponse(BaseModel):
    status: str
    version: str
