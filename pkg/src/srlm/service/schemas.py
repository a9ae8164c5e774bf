"""Request and response models for the pipeline service.

File paths in requests are paths on the machine running the service;
the CLI runs the service in-process by default, so they are usually
just local paths.
"""

from __future__ import annotations

from pydantic import BaseModel, model_validator


class HealthResponse(BaseModel):
    status: str
    version: str


class BackendSpec(BaseModel):
    """Where requests go: a scripted fixture or a live endpoint."""

    model_ref: str
    fixture_path: str | None = None
    url: str | None = None
    token_env: str = "SRLM_BACKEND_TOKEN"
    concurrency_limit: int = 8
    retry_budget: int = 3

    @model_validator(mode="after")
    def _one_transport(self):
        if self.fixture_path and self.url:
            raise ValueError("give either fixture_path or url, not both")
        return self


class ParseRequest(BaseModel):
    text: str


class ParseResponse(BaseModel):
    valid: bool
    reason: str | None = None
    message: str | None = None
    position: int | None = None
    top_level_skills: list[str] = []
    skill_counts: dict[str, int] = {}
    post_thoughts: str = ""


class DatasetValidateRequest(BaseModel):
    path: str


class DatasetValidateResponse(BaseModel):
    iteration: int
    samples: int
    digest: str


class CatalystAcquireRequest(BaseModel):
    source_path: str
    out_path: str
    count: int = 1000
    seed: int
    max_regeneration_attempts: int = 2
    backend: BackendSpec


class CatalystAcquireResponse(BaseModel):
    examples: int
    digest: str
    out_path: str


class ExpansionRunRequest(BaseModel):
    manifest_path: str
    out_path: str
    model_ref: str | None = None


class ExpansionRunResponse(BaseModel):
    candidates: int
    valid: int
    invalid: int
    digest: str
    out_path: str


class SelectionRunRequest(BaseModel):
    manifest_path: str
    candidates_path: str
    strategy: str
    out_path: str
    decisions_path: str | None = None


class SelectionRunResponse(BaseModel):
    selected: int
    retained: int
    dataset_digest: str
    out_path: str
    decisions_path: str | None


class IterateRequest(BaseModel):
    config_path: str
    resume: bool = False


class ManifestView(BaseModel):
    iteration: int
    base_model_ref: str
    trained_model_ref: str
    dataset_digest: str
    catalyst_digest: str
    selector: str
    config_digest: str
    parent_manifest_digest: str
    digest: str


class IterateResponse(BaseModel):
    workspace: str
    manifests: list[ManifestView]


class VerifyRequest(BaseModel):
    workspace: str


class VerifyResponse(BaseModel):
    ok: bool
    iterations: int
    problems: list[str]


class SkillReportRequest(BaseModel):
    input_path: str
    out_path: str | None = None


class SkillEntry(BaseModel):
    count: int
    fraction: float


class SkillReportResponse(BaseModel):
    documents: int
    parsed_documents: int
    unparsed_documents: int
    total_tags: int
    skills: dict[str, SkillEntry]
    table: str


class PassAtNRequest(BaseModel):
    tasks_path: str
    n_values: list[int]
    backend: BackendSpec
    out_path: str | None = None
    temperature: float = 0.2
    top_p: float = 0.9
    max_tokens: int = 8192
    seed: int | None = None


class PassAtNResponse(BaseModel):
    n: list[int]
    accuracy: list[float]
    out_path: str | None


class FitRequest(BaseModel):
    curve_path: str | None = None
    n: list[int] | None = None
    accuracy: list[float] | None = None

    @model_validator(mode="after")
    def _one_source(self):
        inline = self.n is not None or self.accuracy is not None
        if self.curve_path and inline:
            raise ValueError("give either curve_path or inline points, not both")
        if not self.curve_path and (self.n is None or self.accuracy is None):
            raise ValueError("give curve_path, or both n and accuracy")
        return self


class FitResponse(BaseModel):
    a: float
    b: float
    residual_sum_squares: float
    formula: str
