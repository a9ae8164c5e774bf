"""Iteration driver: train via hook, expand, select, emit the next dataset.

One run owns one workspace directory.  Every stage writes a content-
addressed artifact and is skipped when that artifact already exists, so
re-invoking a run after an interruption recomputes only what is missing
and a completed workspace is verifiable file by file:

    workspace/
      config.json                    resolved settings + config digest
      catalyst.jsonl                 canonical catalyst set
      datasets/dataset-00000.jsonl   one file per iteration
      manifests/manifest-00000.json  hash-linked chain
      stages/iter-00001/             corpus, staging manifest, model ref,
                                     candidates, decisions for t=0 -> 1
      run-lock                       held for the duration of a run
"""

from __future__ import annotations

import dataclasses
import json
import logging
import os
import shlex
import subprocess
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

from . import expansion, gateway, selection, store

try:
    import tomllib
except ModuleNotFoundError:  # pragma: no cover - Python 3.10
    import tomli as tomllib

log = logging.getLogger(__name__)

UPDATE_MODES = ("off", "enriched-only", "both")

# Keys that change what a run computes, as opposed to where files live or
# how fast requests are issued.  Only these enter the config digest, so a
# workspace moved to another machine still verifies.
_DIGESTED_KEYS = (
    "base_model_ref",
    "selector",
    "max_iterations",
    "n_samples",
    "temperature",
    "top_p",
    "max_tokens",
    "run_seed",
    "trainer_hook",
    "tie_break",
    "length_metric",
    "update_catalyst",
    "digest_algorithm",
    "score_context_format",
)

_CONFIG_KEYS = (
    "base_model_ref",
    "selector",
    "max_iterations",
    "n_samples",
    "temperature",
    "top_p",
    "max_tokens",
    "concurrency_limit",
    "run_seed",
    "trainer_hook",
    "backend.url",
    "backend.fixture",
    "backend.token_env",
    "catalyst.path",
    "dataset0.path",
    "tie_break",
    "length_metric",
    "update_catalyst",
    "workspace",
)


class OrchestratorError(Exception):
    pass


class ConfigError(OrchestratorError):
    pass


class HookError(OrchestratorError):
    """Trainer hook broke its contract; the workspace stays resumable."""


class LockError(OrchestratorError):
    pass


@dataclass(frozen=True)
class RunConfig:
    base_model_ref: str
    catalyst_path: str
    dataset0_path: str
    workspace: str
    selector: str = "length"
    max_iterations: int = 5
    n_samples: int = 5
    temperature: float = 0.2
    top_p: float = 0.9
    max_tokens: int = 8192
    concurrency_limit: int = 8
    run_seed: int = 0
    trainer_hook: str = "noop"
    backend_url: str = ""
    backend_fixture: str = ""
    backend_token_env: str = gateway.ENV_BACKEND_TOKEN
    tie_break: str = "incumbent"
    length_metric: str = "chars"
    update_catalyst: str = "off"

    def __post_init__(self):
        if self.max_iterations < 1:
            raise ConfigError("max_iterations must be >= 1")
        if self.n_samples < 1:
            raise ConfigError("n_samples must be >= 1")
        if self.concurrency_limit < 1:
            raise ConfigError("concurrency_limit must be >= 1")
        if self.selector not in store.SELECTORS:
            raise ConfigError(f"selector must be one of {store.SELECTORS}")
        if self.trainer_hook.strip() == "":
            raise ConfigError("trainer_hook must be a command or the literal 'noop'")
        if self.tie_break != "incumbent":
            raise ConfigError("tie_break is fixed to 'incumbent'")
        if self.length_metric not in ("chars", "tokens"):
            raise ConfigError("length_metric must be 'chars' or 'tokens'")
        if self.update_catalyst not in UPDATE_MODES:
            raise ConfigError(f"update_catalyst must be one of {UPDATE_MODES}")
        if self.base_model_ref == "":
            raise ConfigError("base_model_ref must be set")


def load_run_config(path: str | Path) -> RunConfig:
    """Read a TOML run file; relative paths resolve against its directory."""
    path = Path(path)
    with open(path, "rb") as fh:
        try:
            raw = tomllib.load(fh)
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"invalid config {path}: {exc}") from exc

    flat: dict[str, object] = {}
    for key, value in raw.items():
        if isinstance(value, dict):
            for inner_key, inner_value in value.items():
                flat[f"{key}.{inner_key}"] = inner_value
        else:
            flat[key] = value
    unknown = sorted(set(flat) - set(_CONFIG_KEYS))
    if unknown:
        raise ConfigError(f"unknown config key {unknown[0]!r}")
    for required in ("base_model_ref", "catalyst.path", "dataset0.path", "workspace"):
        if required not in flat:
            raise ConfigError(f"missing config key {required!r}")

    base = path.parent

    def as_path(key: str) -> str:
        return str((base / str(flat[key])).resolve())

    kwargs: dict[str, object] = {
        "base_model_ref": str(flat["base_model_ref"]),
        "catalyst_path": as_path("catalyst.path"),
        "dataset0_path": as_path("dataset0.path"),
        "workspace": as_path("workspace"),
    }
    plain = {
        "selector": str,
        "max_iterations": int,
        "n_samples": int,
        "temperature": float,
        "top_p": float,
        "max_tokens": int,
        "concurrency_limit": int,
        "run_seed": int,
        "trainer_hook": str,
        "tie_break": str,
        "length_metric": str,
        "update_catalyst": str,
    }
    for key, cast in plain.items():
        if key in flat:
            kwargs[key] = cast(flat[key])
    if "backend.url" in flat:
        kwargs["backend_url"] = str(flat["backend.url"])
    if "backend.fixture" in flat:
        kwargs["backend_fixture"] = str((base / str(flat["backend.fixture"])).resolve())
    if "backend.token_env" in flat:
        kwargs["backend_token_env"] = str(flat["backend.token_env"])
    return RunConfig(**kwargs)


def load_workspace_config(workspace: str | Path) -> RunConfig:
    """Rebuild the RunConfig a workspace was initialized with."""
    config_file = Path(workspace) / "config.json"
    with open(config_file, "r", encoding="utf-8") as fh:
        stored = json.load(fh)
    resolved = stored.get("config")
    if not isinstance(resolved, dict):
        raise ConfigError(f"{config_file} holds no config block")
    field_names = {field.name for field in dataclasses.fields(RunConfig)}
    return RunConfig(**{k: v for k, v in resolved.items() if k in field_names})


def resolved_config(config: RunConfig) -> dict:
    resolved = dataclasses.asdict(config)
    resolved["digest_algorithm"] = store.DIGEST_ALGORITHM
    resolved["score_context_format"] = selection.SCORE_CONTEXT_FORMAT
    return resolved


def config_digest(config: RunConfig) -> str:
    resolved = resolved_config(config)
    digested = {key: resolved[key] for key in _DIGESTED_KEYS}
    return store.sha256_text(
        json.dumps(digested, ensure_ascii=False, sort_keys=True, separators=(",", ":"))
    )


# -- workspace paths ---------------------------------------------------------

def _ws(config: RunConfig) -> Path:
    return Path(config.workspace)


def dataset_path(workspace: Path, iteration: int) -> Path:
    return workspace / "datasets" / f"dataset-{iteration:05d}.jsonl"


def manifest_path(workspace: Path, iteration: int) -> Path:
    return workspace / "manifests" / f"manifest-{iteration:05d}.json"


def stage_dir(workspace: Path, iteration: int) -> Path:
    return workspace / "stages" / f"iter-{iteration:05d}"


def catalyst_path(workspace: Path, iteration: int, update_mode: str) -> Path:
    """Catalyst file in force at an iteration; fixed unless updates are on."""
    if update_mode == "off" or iteration == 0:
        return workspace / "catalyst.jsonl"
    candidate = stage_dir(workspace, iteration) / "catalyst.jsonl"
    if candidate.exists():
        return candidate
    return catalyst_path(workspace, iteration - 1, update_mode)


def _make_handle(config: RunConfig, model_ref: str) -> gateway.BackendHandle:
    if config.backend_fixture:
        # Scripted failures are not transient: retry immediately.
        gateway_config = gateway.GatewayConfig(
            backoff_base=0.0, concurrency_limit=config.concurrency_limit
        )
        return gateway.mock_handle(config.backend_fixture, model_ref, gateway_config)
    gateway_config = gateway.GatewayConfig(concurrency_limit=config.concurrency_limit)
    return gateway.live_handle(
        model_ref,
        endpoint=config.backend_url or None,
        token_env=config.backend_token_env,
        config=gateway_config,
    )


# -- stages ------------------------------------------------------------------

def _ensure_config_file(config: RunConfig) -> str:
    path = _ws(config) / "config.json"
    digest = config_digest(config)
    if path.exists():
        with open(path, "r", encoding="utf-8") as fh:
            stored = json.load(fh)
        if stored.get("config_digest") != digest:
            raise ConfigError(
                "workspace was initialized with different settings; "
                "use a fresh workspace or restore the original config"
            )
        return digest
    record = {"config": resolved_config(config), "config_digest": digest}
    store.atomic_write_text(path, json.dumps(record, ensure_ascii=False, indent=2) + "\n")
    return digest


def _ensure_initial_artifacts(config: RunConfig) -> tuple[store.IterationDataset, store.CatalystSet]:
    workspace = _ws(config)
    ds_path = dataset_path(workspace, 0)
    if ds_path.exists():
        dataset = store.load_dataset(ds_path)
    else:
        dataset = store.load_dataset(config.dataset0_path)
        store.write_dataset(dataset, ds_path)
    if dataset.iteration != 0:
        raise ConfigError(f"initial dataset must be iteration 0, got {dataset.iteration}")

    cat_path = workspace / "catalyst.jsonl"
    if cat_path.exists():
        catalyst_set = store.load_catalyst(cat_path)
    else:
        catalyst_set = store.load_catalyst(config.catalyst_path)
        store.write_catalyst(catalyst_set, cat_path)
    return dataset, catalyst_set


def init_workspace(config: RunConfig) -> store.IterationManifest:
    """Write iteration-0 artifacts (idempotent) and return manifest 0."""
    workspace = _ws(config)
    workspace.mkdir(parents=True, exist_ok=True)
    digest = _ensure_config_file(config)
    dataset, catalyst_set = _ensure_initial_artifacts(config)

    m_path = manifest_path(workspace, 0)
    if m_path.exists():
        manifest = store.load_manifest(m_path)
    else:
        manifest = store.make_manifest(
            iteration=0,
            base_model_ref=config.base_model_ref,
            trained_model_ref="",
            dataset_digest=dataset.digest,
            catalyst_digest=catalyst_set.digest,
            selector=config.selector,
            config_digest=digest,
            parent_manifest_digest="",
        )
        store.write_manifest(manifest, m_path)
    return manifest


def _ensure_staging(
    config: RunConfig, manifest_t: store.IterationManifest
) -> Path:
    workspace = _ws(config)
    t = manifest_t.iteration
    stage = stage_dir(workspace, t + 1)
    corpus_path = stage / "corpus.jsonl"
    staging_path = stage / "staging-manifest.json"
    if not corpus_path.exists():
        dataset = store.load_dataset(dataset_path(workspace, t))
        catalyst_set = store.load_catalyst(
            catalyst_path(workspace, t, config.update_catalyst)
        )
        store.write_training_corpus(
            store.merge_training_corpus(dataset, catalyst_set), corpus_path
        )
    if not staging_path.exists():
        corpus_digest = store.sha256_text(corpus_path.read_text(encoding="utf-8"))
        record = {
            "iteration": t,
            "base_model_ref": config.base_model_ref,
            "corpus_path": str(corpus_path.resolve()),
            "corpus_digest": corpus_digest,
            "dataset_digest": manifest_t.dataset_digest,
            "catalyst_digest": manifest_t.catalyst_digest,
            "config_digest": manifest_t.config_digest,
        }
        store.atomic_write_text(staging_path, store.canonical_json(record) + "\n")
    return staging_path


def _ensure_model_ref(config: RunConfig, staging_path: Path) -> str:
    ref_path = staging_path.parent / "model-ref.txt"
    if ref_path.exists():
        return ref_path.read_text(encoding="utf-8").strip()
    if config.trainer_hook == "noop":
        ref = config.base_model_ref
    else:
        argv = shlex.split(config.trainer_hook) + [str(staging_path)]
        result = subprocess.run(argv, capture_output=True, text=True)
        if result.returncode != 0:
            tail = result.stderr.strip().splitlines()[-3:]
            raise HookError(
                f"trainer hook exited {result.returncode}: {' | '.join(tail) or 'no stderr'}"
            )
        lines = [line.strip() for line in result.stdout.splitlines() if line.strip()]
        if not lines:
            raise HookError("trainer hook printed no model reference")
        ref = lines[-1]
    store.atomic_write_text(ref_path, ref + "\n")
    return ref


def _ensure_candidates(
    config: RunConfig,
    stage: Path,
    dataset: store.IterationDataset,
    model_ref: str,
) -> list[expansion.ExpansionCandidate]:
    path = stage / "candidates.jsonl"
    if path.exists():
        return expansion.load_candidates(path)
    handle = _make_handle(config, model_ref)
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
    expansion.write_candidates(candidates, path)
    return candidates


def _ensure_decisions(
    config: RunConfig,
    stage: Path,
    dataset: store.IterationDataset,
    candidates: list[expansion.ExpansionCandidate],
    trained_model_ref: str,
) -> list[selection.SelectionDecision]:
    path = stage / "decisions.jsonl"
    if path.exists():
        return selection.load_decisions(path)

    grouped: dict[str, list[expansion.ExpansionCandidate]] = {
        sample.id: [] for sample in dataset.samples
    }
    for candidate in candidates:
        grouped[candidate.sample_id].append(candidate)

    if config.selector == "length":
        if config.length_metric == "tokens":
            raise ConfigError(
                "length_metric 'tokens' needs an injected tokenizer; "
                "orchestrated runs support 'chars'"
            )
        decisions = [
            selection.select_length(sample, grouped[sample.id], metric=config.length_metric)
            for sample in dataset.samples
        ]
    else:
        scorer_ref = (
            config.base_model_ref if config.selector == "off-policy" else trained_model_ref
        )
        scorer = _make_handle(config, scorer_ref)

        def decide(sample: store.InstructionSample) -> selection.SelectionDecision:
            return selection.select_by_score(
                sample, grouped[sample.id], scorer, selector=config.selector
            )

        with ThreadPoolExecutor(max_workers=config.concurrency_limit) as pool:
            decisions = list(pool.map(decide, dataset.samples))

    selection.write_decisions(decisions, path)
    return decisions


def _ensure_updated_catalyst(
    config: RunConfig,
    stage: Path,
    previous: store.CatalystSet,
    before: store.IterationDataset,
    after: store.IterationDataset,
) -> store.CatalystSet:
    """Optional refresh of catalyst pairs from newer rationales (length-gated)."""
    path = stage / "catalyst.jsonl"
    if path.exists():
        return store.load_catalyst(path)
    before_by_id = {sample.id: sample for sample in before.samples}
    after_by_id = {sample.id: sample for sample in after.samples}
    updated = []
    changed = 0
    for example in previous.examples:
        fresh = after_by_id.get(example.id)
        if fresh is None or len(fresh.rationale) <= len(example.rationale_enriched):
            updated.append(example)
            continue
        try:
            store.validate_example(
                dataclasses.replace(example, rationale_enriched=fresh.rationale)
            )
        except store.StoreError:
            # A selected rationale with trailing text cannot serve as a
            # demonstration; keep the old pair.
            updated.append(example)
            continue
        rationale_before = example.rationale_before
        if config.update_catalyst == "both":
            rationale_before = before_by_id[example.id].rationale
        updated.append(
            dataclasses.replace(
                example,
                rationale_before=rationale_before,
                rationale_enriched=fresh.rationale,
            )
        )
        changed += 1
    log.info("catalyst update: %d of %d pairs refreshed", changed, len(previous.examples))
    catalyst_set = store.make_catalyst_set(updated)
    store.write_catalyst(catalyst_set, path)
    return catalyst_set


def run_iteration(
    manifest_t: store.IterationManifest, config: RunConfig
) -> store.IterationManifest:
    """One full cycle from iteration t to t+1; every stage resumes."""
    workspace = _ws(config)
    t = manifest_t.iteration
    next_manifest_path = manifest_path(workspace, t + 1)
    if next_manifest_path.exists():
        return store.load_manifest(next_manifest_path)

    stage = stage_dir(workspace, t + 1)
    dataset = store.load_dataset(dataset_path(workspace, t))
    staging_path = _ensure_staging(config, manifest_t)
    model_ref = _ensure_model_ref(config, staging_path)
    candidates = _ensure_candidates(config, stage, dataset, model_ref)
    decisions = _ensure_decisions(config, stage, dataset, candidates, model_ref)

    next_ds_path = dataset_path(workspace, t + 1)
    if next_ds_path.exists():
        next_dataset = store.load_dataset(next_ds_path)
    else:
        next_dataset = selection.apply_selection(dataset, decisions, candidates)
        store.write_dataset(next_dataset, next_ds_path)
    log.info(
        "iteration %d: %d of %d samples took a candidate",
        t + 1,
        selection.replacement_count(decisions),
        len(dataset.samples),
    )

    catalyst_digest = manifest_t.catalyst_digest
    if config.update_catalyst != "off":
        previous = store.load_catalyst(catalyst_path(workspace, t, config.update_catalyst))
        catalyst_digest = _ensure_updated_catalyst(
            config, stage, previous, dataset, next_dataset
        ).digest

    manifest = store.make_manifest(
        iteration=t + 1,
        base_model_ref=config.base_model_ref,
        trained_model_ref=model_ref,
        dataset_digest=next_dataset.digest,
        catalyst_digest=catalyst_digest,
        selector=config.selector,
        config_digest=manifest_t.config_digest,
        parent_manifest_digest=manifest_t.digest,
    )
    store.write_manifest(manifest, next_manifest_path)
    return manifest


class _RunLock:
    def __init__(self, workspace: Path):
        self._path = workspace / "run-lock"

    def __enter__(self):
        try:
            fd = os.open(self._path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise LockError(
                f"workspace is locked by another run ({self._path}); "
                "remove the file if that run is dead"
            ) from None
        with os.fdopen(fd, "w") as fh:
            fh.write(f"{os.getpid()}\n")
        return self

    def __exit__(self, *exc_info):
        try:
            os.unlink(self._path)
        except FileNotFoundError:
            pass
        return False


def run(config: RunConfig, resume: bool = False) -> list[store.IterationManifest]:
    """Drive the loop to max_iterations; returns manifests for t = 0..T."""
    workspace = _ws(config)
    if not resume and (workspace / "config.json").exists():
        raise ConfigError(
            f"workspace {workspace} is already initialized; pass resume to continue it"
        )
    workspace.mkdir(parents=True, exist_ok=True)
    with _RunLock(workspace):
        manifests = [init_workspace(config)]
        for _ in range(config.max_iterations):
            manifests.append(run_iteration(manifests[-1], config))
    return manifests


# -- verification ------------------------------------------------------------

@dataclass(frozen=True)
class VerificationReport:
    ok: bool
    iterations: int
    problems: tuple[str, ...]


def check_chain(manifests: list[store.IterationManifest]) -> list[str]:
    """Structural problems in a manifest chain; empty means valid."""
    problems = []
    for index, manifest in enumerate(manifests):
        if manifest.iteration != index:
            problems.append(f"manifest {index}: iteration field is {manifest.iteration}")
        recomputed = store.make_manifest(
            iteration=manifest.iteration,
            base_model_ref=manifest.base_model_ref,
            trained_model_ref=manifest.trained_model_ref,
            dataset_digest=manifest.dataset_digest,
            catalyst_digest=manifest.catalyst_digest,
            selector=manifest.selector,
            config_digest=manifest.config_digest,
            parent_manifest_digest=manifest.parent_manifest_digest,
        )
        if recomputed.digest != manifest.digest:
            problems.append(f"manifest {index}: stored digest does not match its fields")
        if index == 0:
            continue
        previous = manifests[index - 1]
        if manifest.parent_manifest_digest != previous.digest:
            problems.append(f"manifest {index}: parent digest does not match manifest {index - 1}")
        if manifest.base_model_ref != previous.base_model_ref:
            problems.append(f"manifest {index}: base_model_ref changed mid-run")
        if manifest.selector != previous.selector:
            problems.append(f"manifest {index}: selector changed mid-run")
        if manifest.config_digest != previous.config_digest:
            problems.append(f"manifest {index}: config_digest changed mid-run")
    return problems


def verify_workspace(workspace: str | Path) -> VerificationReport:
    """Check every digest a completed or partial workspace claims."""
    workspace = Path(workspace)
    problems: list[str] = []

    config_file = workspace / "config.json"
    update_mode = "off"
    if not config_file.exists():
        problems.append("config.json missing")
    else:
        with open(config_file, "r", encoding="utf-8") as fh:
            stored = json.load(fh)
        resolved = stored.get("config", {})
        update_mode = resolved.get("update_catalyst", "off")
        digested = {key: resolved.get(key) for key in _DIGESTED_KEYS}
        recomputed = store.sha256_text(
            json.dumps(digested, ensure_ascii=False, sort_keys=True, separators=(",", ":"))
        )
        if recomputed != stored.get("config_digest"):
            problems.append("config.json digest does not match its settings")

    manifest_files = sorted((workspace / "manifests").glob("manifest-*.json"))
    manifests = []
    for file in manifest_files:
        try:
            manifests.append(store.load_manifest(file))
        except (store.StoreError, OSError) as exc:
            problems.append(f"{file.name}: {exc}")
    if not manifests:
        problems.append("no readable manifests")
        return VerificationReport(ok=False, iterations=0, problems=tuple(problems))

    problems.extend(check_chain(manifests))
    if config_file.exists() and not any("digest does not match its settings" in p for p in problems):
        stored_digest = stored.get("config_digest")
        if manifests[0].config_digest != stored_digest:
            problems.append("manifest 0 config_digest does not match config.json")

    for manifest in manifests:
        ds_path = dataset_path(workspace, manifest.iteration)
        if not ds_path.exists():
            problems.append(f"dataset file for iteration {manifest.iteration} missing")
            continue
        try:
            dataset = store.load_dataset(ds_path)
        except store.StoreError as exc:
            problems.append(f"{ds_path.name}: {exc}")
            continue
        if dataset.digest != manifest.dataset_digest:
            problems.append(f"dataset {manifest.iteration}: digest does not match manifest")
        if dataset.iteration != manifest.iteration:
            problems.append(f"dataset {manifest.iteration}: iteration field mismatch")
        cat_file = catalyst_path(workspace, manifest.iteration, update_mode)
        if not cat_file.exists():
            problems.append(f"catalyst file for iteration {manifest.iteration} missing")
            continue
        try:
            catalyst_set = store.load_catalyst(cat_file)
        except store.StoreError as exc:
            problems.append(f"{cat_file.name}: {exc}")
            continue
        if catalyst_set.digest != manifest.catalyst_digest:
            problems.append(f"catalyst at iteration {manifest.iteration}: digest mismatch")

    return VerificationReport(
        ok=not problems, iterations=len(manifests) - 1, problems=tuple(problems)
    )
