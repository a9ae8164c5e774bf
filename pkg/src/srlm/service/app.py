"""FastAPI application exposing the pipeline over HTTP.

Operations run synchronously in the request; this service fronts a
data pipeline, not a high-fanout API.  Domain errors map to 422 with
the error class name so thin clients can report them verbatim.
"""

from __future__ import annotations

from pathlib import Path

from fastapi import FastAPI
from fastapi.responses import JSONResponse

from .. import (
    __version__,
    analytics,
    catalyst,
    expansion,
    gateway,
    grammar,
    orchestrator,
    selection,
    store,
)
from . import schemas

_DOMAIN_ERRORS = (
    store.StoreError,
    grammar.RationaleError,
    gateway.GatewayError,
    catalyst.CatalystError,
    selection.SelectionError,
    analytics.AnalyticsError,
    orchestrator.OrchestratorError,
    ValueError,
)


def _handle_from_spec(spec: schemas.BackendSpec) -> gateway.BackendHandle:
    config = gateway.GatewayConfig(
        retry_budget=spec.retry_budget,
        concurrency_limit=spec.concurrency_limit,
        backoff_base=0.0 if spec.fixture_path else 0.25,
    )
    if spec.fixture_path:
        return gateway.mock_handle(spec.fixture_path, spec.model_ref, config)
    return gateway.live_handle(
        spec.model_ref, endpoint=spec.url or None, token_env=spec.token_env, config=config
    )


def _workspace_of(manifest_path: str) -> Path:
    return Path(manifest_path).resolve().parent.parent


def create_app() -> FastAPI:
    app = FastAPI(title="srlm", version=__version__)

    @app.exception_handler(FileNotFoundError)
    def missing_file(request, exc):
        return JSONResponse(
            status_code=404,
            content={"detail": {"error": "FileNotFoundError", "message": str(exc)}},
        )

    for error_class in _DOMAIN_ERRORS:
        @app.exception_handler(error_class)
        def domain_error(request, exc):
            return JSONResponse(
                status_code=422,
                content={"detail": {"error": type(exc).__name__, "message": str(exc)}},
            )

    @app.get("/health", response_model=schemas.HealthResponse)
    def health():
        return {"status": "ok", "version": __version__}

    @app.post("/rationale/parse", response_model=schemas.ParseResponse)
    def parse_rationale(request: schemas.ParseRequest):
        try:
            tree = grammar.parse_rationale(request.text)
        except grammar.RationaleError as exc:
            return schemas.ParseResponse(
                valid=False, reason=exc.reason, message=str(exc), position=exc.position
            )
        return schemas.ParseResponse(
            valid=True,
            top_level_skills=tree.top_level_skills,
            skill_counts=grammar.skill_histogram([tree]),
            post_thoughts=tree.post_thoughts,
        )

    @app.post("/datasets/validate", response_model=schemas.DatasetValidateResponse)
    def validate_dataset(request: schemas.DatasetValidateRequest):
        dataset = store.load_dataset(request.path)
        return schemas.DatasetValidateResponse(
            iteration=dataset.iteration, samples=len(dataset.samples), digest=dataset.digest
        )

    @app.post("/catalyst/acquire", response_model=schemas.CatalystAcquireResponse)
    def acquire(request: schemas.CatalystAcquireRequest):
        config = catalyst.CatalystConfig(
            source_dataset=request.source_path,
            selection_seed=request.seed,
            sample_count=request.count,
            max_regeneration_attempts=request.max_regeneration_attempts,
        )
        catalyst_set = catalyst.acquire_catalyst(config, _handle_from_spec(request.backend))
        store.write_catalyst(catalyst_set, request.out_path)
        return schemas.CatalystAcquireResponse(
            examples=len(catalyst_set.examples),
            digest=catalyst_set.digest,
            out_path=request.out_path,
        )

    @app.post("/expansion/run", response_model=schemas.ExpansionRunResponse)
    def expand(request: schemas.ExpansionRunRequest):
        manifest = store.load_manifest(request.manifest_path)
        workspace = _workspace_of(request.manifest_path)
        config = orchestrator.load_workspace_config(workspace)
        dataset = store.load_dataset(
            orchestrator.dataset_path(workspace, manifest.iteration)
        )
        if dataset.digest != manifest.dataset_digest:
            raise store.SchemaError("dataset file does not match manifest digest")
        model_ref = request.model_ref or manifest.trained_model_ref or manifest.base_model_ref
        handle = orchestrator._make_handle(config, model_ref)
        candidates = expansion.expand_dataset(
            dataset,
            handle,
            expansion.ExpansionConfig(
                n_samples=config.n_samples,
                temperature=config.temperature,
                top_p=config.top_p,
                max_tokens=config.max_tokens,
                concurrency_limit=config.concurrency_limit,
                run_seed=config.run_seed,
            ),
        )
        digest = expansion.write_candidates(candidates, request.out_path)
        valid = sum(1 for c in candidates if c.parse_status == expansion.VALID)
        return schemas.ExpansionRunResponse(
            candidates=len(candidates),
            valid=valid,
            invalid=len(candidates) - valid,
            digest=digest,
            out_path=request.out_path,
        )

    @app.post("/selection/run", response_model=schemas.SelectionRunResponse)
    def select(request: schemas.SelectionRunRequest):
        if request.strategy not in store.SELECTORS:
            raise selection.SelectionError(
                f"strategy must be one of {store.SELECTORS}"
            )
        manifest = store.load_manifest(request.manifest_path)
        workspace = _workspace_of(request.manifest_path)
        config = orchestrator.load_workspace_config(workspace)
        dataset = store.load_dataset(
            orchestrator.dataset_path(workspace, manifest.iteration)
        )
        if dataset.digest != manifest.dataset_digest:
            raise store.SchemaError("dataset file does not match manifest digest")
        candidates = expansion.load_candidates(request.candidates_path)
        grouped = {sample.id: [] for sample in dataset.samples}
        for candidate in candidates:
            if candidate.sample_id not in grouped:
                raise selection.SelectionError(
                    f"candidate for unknown sample {candidate.sample_id!r}"
                )
            grouped[candidate.sample_id].append(candidate)

        if request.strategy == "length":
            decisions = [
                selection.select_length(sample, grouped[sample.id], metric=config.length_metric)
                for sample in dataset.samples
            ]
        else:
            scorer_ref = (
                config.base_model_ref
                if request.strategy == "off-policy"
                else manifest.trained_model_ref or config.base_model_ref
            )
            scorer = orchestrator._make_handle(config, scorer_ref)
            decisions = [
                selection.select_by_score(
                    sample, grouped[sample.id], scorer, selector=request.strategy
                )
                for sample in dataset.samples
            ]

        next_dataset = selection.apply_selection(dataset, decisions, candidates)
        store.write_dataset(next_dataset, request.out_path)
        decisions_path = request.decisions_path
        if decisions_path:
            selection.write_decisions(decisions, decisions_path)
        selected = selection.replacement_count(decisions)
        return schemas.SelectionRunResponse(
            selected=selected,
            retained=len(decisions) - selected,
            dataset_digest=next_dataset.digest,
            out_path=request.out_path,
            decisions_path=decisions_path,
        )

    @app.post("/runs/iterate", response_model=schemas.IterateResponse)
    def iterate(request: schemas.IterateRequest):
        config = orchestrator.load_run_config(request.config_path)
        manifests = orchestrator.run(config, resume=request.resume)
        return schemas.IterateResponse(
            workspace=config.workspace,
            manifests=[
                schemas.ManifestView(**{
                    field: getattr(m, field)
                    for field in schemas.ManifestView.model_fields
                })
                for m in manifests
            ],
        )

    @app.post("/workspace/verify", response_model=schemas.VerifyResponse)
    def verify(request: schemas.VerifyRequest):
        report = orchestrator.verify_workspace(request.workspace)
        return schemas.VerifyResponse(
            ok=report.ok, iterations=report.iterations, problems=list(report.problems)
        )

    @app.post("/reports/skills", response_model=schemas.SkillReportResponse)
    def skills(request: schemas.SkillReportRequest):
        report = analytics.skill_report(request.input_path)
        if request.out_path:
            analytics.write_report(report, request.out_path)
        return schemas.SkillReportResponse(
            documents=report.documents,
            parsed_documents=report.parsed_documents,
            unparsed_documents=report.unparsed_documents,
            total_tags=report.total_tags,
            skills={name: schemas.SkillEntry(**entry) for name, entry in report.skills.items()},
            table=analytics.render_skill_table(report),
        )

    @app.post("/eval/pass-at-n", response_model=schemas.PassAtNResponse)
    def pass_at_n(request: schemas.PassAtNRequest):
        handle = _handle_from_spec(request.backend)
        template = gateway.GenerationRequest(
            system_prompt="",
            user_prompt="",
            temperature=request.temperature,
            top_p=request.top_p,
            max_tokens=request.max_tokens,
            seed=request.seed,
        )
        curve = analytics.pass_at_n(request.tasks_path, handle, request.n_values, template)
        if request.out_path:
            analytics.write_curve(curve, request.out_path)
        return schemas.PassAtNResponse(
            n=list(curve.n_values), accuracy=list(curve.accuracy), out_path=request.out_path
        )

    @app.post("/analytics/fit", response_model=schemas.FitResponse)
    def fit(request: schemas.FitRequest):
        if request.curve_path:
            curve = analytics.load_curve(request.curve_path)
            result = analytics.fit_log_curve(curve)
        else:
            result = analytics.fit_points(request.n, request.accuracy)
        return schemas.FitResponse(
            a=result.a,
            b=result.b,
            residual_sum_squares=result.residual_sum_squares,
            formula=analytics.format_fit(result),
        )

    return app


app = create_app()
