"""Versioned corpus store: canonical JSONL records, digests, manifests.

Every artifact is serialized canonically (fixed key order, no extra
whitespace, ensure_ascii off, one record per line, trailing newline) so
that equal content always produces equal bytes and therefore equal
digests.  Digests are hex sha256 over those canonical bytes.
"""

from __future__ import annotations

import hashlib
import json
import os
import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

from . import grammar, prompts

DIGEST_ALGORITHM = "sha256"

PROVENANCE_SEED = "seed"
PROVENANCE_SELECTED = "expansion-selected"
PROVENANCE_RETAINED = "incumbent-retained"
PROVENANCES = (PROVENANCE_SEED, PROVENANCE_SELECTED, PROVENANCE_RETAINED)

SELECTORS = ("length", "off-policy", "on-policy")

_SAMPLE_FIELDS = ("id", "instruction", "rationale", "answer", "iteration", "provenance")
_CATALYST_FIELDS = ("id", "instruction", "rationale_before", "rationale_enriched")
_MANIFEST_FIELDS = (
    "iteration",
    "base_model_ref",
    "trained_model_ref",
    "dataset_digest",
    "catalyst_digest",
    "selector",
    "config_digest",
    "parent_manifest_digest",
)
_TRAINING_FIELDS = ("system", "prompt", "response", "source", "source_id")


class StoreError(Exception):
    """Base class for corpus-store failures."""


class SchemaError(StoreError):
    """A record violates the serialization schema."""

    def __init__(self, message: str, *, line: int | None = None, field: str | None = None):
        self.line = line
        self.field = field
        where = f" (line {line})" if line is not None else ""
        which = f" [field: {field}]" if field else ""
        super().__init__(f"{message}{where}{which}")


class DuplicateIdError(StoreError):
    """Two records in one file share an id."""

    def __init__(self, record_id: str, line: int):
        self.record_id = record_id
        self.line = line
        super().__init__(f"duplicate id {record_id!r} (line {line})")


@dataclass(frozen=True)
class InstructionSample:
    id: str
    instruction: str
    rationale: str
    answer: str
    iteration: int
    provenance: str


@dataclass(frozen=True)
class IterationDataset:
    iteration: int
    samples: tuple[InstructionSample, ...]
    digest: str


@dataclass(frozen=True)
class CatalystExample:
    id: str
    instruction: str
    rationale_before: str
    rationale_enriched: str


@dataclass(frozen=True)
class CatalystSet:
    examples: tuple[CatalystExample, ...]
    digest: str


@dataclass(frozen=True)
class IterationManifest:
    iteration: int
    base_model_ref: str
    trained_model_ref: str
    dataset_digest: str
    catalyst_digest: str
    selector: str
    config_digest: str
    parent_manifest_digest: str
    digest: str


@dataclass(frozen=True)
class TrainingRecord:
    system: str
    prompt: str
    response: str
    source: str
    source_id: str


def sha256_text(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def derive_seed(*parts: object) -> int:
    """Stable 63-bit seed from a label path, e.g. ("expand", run_seed, id, attempt)."""
    digest = hashlib.sha256(":".join(str(p) for p in parts).encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big") >> 1


def canonical_json(obj: object) -> str:
    """Canonical single-line JSON: caller-controlled key order, no padding."""
    return json.dumps(obj, ensure_ascii=False, separators=(",", ":"))


def atomic_write_text(path: str | Path, text: str) -> None:
    """Single-writer file update: write a sibling temp file, then rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _require_str(record: dict, field: str, line: int) -> str:
    value = record.get(field)
    if not isinstance(value, str):
        raise SchemaError("expected a string", line=line, field=field)
    return value


def _require_int(record: dict, field: str, line: int) -> int:
    value = record.get(field)
    if not isinstance(value, int) or isinstance(value, bool):
        raise SchemaError("expected an integer", line=line, field=field)
    return value


def _check_fields(record: dict, fields: Sequence[str], line: int) -> None:
    missing = [f for f in fields if f not in record]
    if missing:
        raise SchemaError("missing field", line=line, field=missing[0])
    extra = [k for k in record if k not in fields]
    if extra:
        raise SchemaError("unknown field", line=line, field=extra[0])


def _parse_lines(path: str | Path) -> list[dict]:
    records = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            if raw.strip() == "":
                raise SchemaError("blank line in record file", line=lineno)
            try:
                record = json.loads(raw)
            except json.JSONDecodeError as exc:
                raise SchemaError(f"invalid JSON: {exc.msg}", line=lineno) from exc
            if not isinstance(record, dict):
                raise SchemaError("record is not an object", line=lineno)
            records.append(record)
    return records


# -- instruction datasets ----------------------------------------------------

def sample_line(sample: InstructionSample) -> str:
    return canonical_json({f: getattr(sample, f) for f in _SAMPLE_FIELDS})


def dataset_content(samples: Iterable[InstructionSample]) -> str:
    return "".join(sample_line(s) + "\n" for s in samples)


def validate_sample(sample: InstructionSample, *, line: int | None = None) -> None:
    if sample.id == "":
        raise SchemaError("empty id", line=line, field="id")
    if sample.instruction == "":
        raise SchemaError("empty instruction", line=line, field="instruction")
    if sample.answer == "":
        raise SchemaError("empty answer", line=line, field="answer")
    if sample.iteration < 0:
        raise SchemaError("negative iteration", line=line, field="iteration")
    if sample.provenance not in PROVENANCES:
        raise SchemaError(
            f"provenance must be one of {PROVENANCES}", line=line, field="provenance"
        )
    if sample.rationale == "" and sample.iteration != 0:
        raise SchemaError(
            "empty rationale only allowed at iteration 0", line=line, field="rationale"
        )
    if (sample.provenance == PROVENANCE_SEED) != (sample.iteration == 0):
        raise SchemaError(
            "seed provenance is exactly the iteration-0 provenance",
            line=line,
            field="provenance",
        )


def make_dataset(samples: Sequence[InstructionSample], iteration: int) -> IterationDataset:
    if not samples:
        raise SchemaError("dataset has no samples")
    if iteration < 0:
        raise SchemaError("negative iteration", field="iteration")
    seen: dict[str, int] = {}
    for lineno, sample in enumerate(samples, start=1):
        validate_sample(sample, line=lineno)
        if sample.iteration != iteration:
            raise SchemaError(
                f"sample iteration {sample.iteration} != dataset iteration {iteration}",
                line=lineno,
                field="iteration",
            )
        if sample.id in seen:
            raise DuplicateIdError(sample.id, lineno)
        seen[sample.id] = lineno
    digest = sha256_text(dataset_content(samples))
    return IterationDataset(iteration=iteration, samples=tuple(samples), digest=digest)


def seed_sample(
    id: str, instruction: str, answer: str, rationale: str | None = None
) -> InstructionSample:
    """Build an iteration-0 sample; sources without a rationale reuse the answer."""
    return InstructionSample(
        id=id,
        instruction=instruction,
        rationale=answer if rationale is None else rationale,
        answer=answer,
        iteration=0,
        provenance=PROVENANCE_SEED,
    )


def load_dataset(path: str | Path) -> IterationDataset:
    records = _parse_lines(path)
    if not records:
        raise SchemaError(f"no records in {path}")
    samples = []
    for lineno, record in enumerate(records, start=1):
        _check_fields(record, _SAMPLE_FIELDS, lineno)
        samples.append(
            InstructionSample(
                id=_require_str(record, "id", lineno),
                instruction=_require_str(record, "instruction", lineno),
                rationale=_require_str(record, "rationale", lineno),
                answer=_require_str(record, "answer", lineno),
                iteration=_require_int(record, "iteration", lineno),
                provenance=_require_str(record, "provenance", lineno),
            )
        )
    return make_dataset(samples, samples[0].iteration)


def write_dataset(dataset: IterationDataset, path: str | Path) -> str:
    atomic_write_text(path, dataset_content(dataset.samples))
    return dataset.digest


# -- catalyst sets -----------------------------------------------------------

def catalyst_line(example: CatalystExample) -> str:
    return canonical_json({f: getattr(example, f) for f in _CATALYST_FIELDS})


def catalyst_content(examples: Iterable[CatalystExample]) -> str:
    return "".join(catalyst_line(e) + "\n" for e in examples)


def validate_example(example: CatalystExample, *, line: int | None = None) -> None:
    if example.id == "":
        raise SchemaError("empty id", line=line, field="id")
    if example.instruction == "":
        raise SchemaError("empty instruction", line=line, field="instruction")
    enriched = example.rationale_enriched
    stripped = enriched.strip()
    if not stripped.startswith(grammar.OPEN_WRAPPER) or not stripped.endswith(
        grammar.CLOSE_WRAPPER
    ):
        raise SchemaError(
            "enriched rationale must be a complete tagged block",
            line=line,
            field="rationale_enriched",
        )
    try:
        grammar.parse_rationale(enriched)
    except grammar.RationaleError as exc:
        raise SchemaError(
            f"enriched rationale does not parse: {exc}",
            line=line,
            field="rationale_enriched",
        ) from exc


def make_catalyst_set(examples: Sequence[CatalystExample]) -> CatalystSet:
    if not examples:
        raise SchemaError("catalyst set has no examples")
    seen: dict[str, int] = {}
    for lineno, example in enumerate(examples, start=1):
        validate_example(example, line=lineno)
        if example.id in seen:
            raise DuplicateIdError(example.id, lineno)
        seen[example.id] = lineno
    digest = sha256_text(catalyst_content(examples))
    return CatalystSet(examples=tuple(examples), digest=digest)


def load_catalyst(path: str | Path) -> CatalystSet:
    records = _parse_lines(path)
    if not records:
        raise SchemaError(f"no records in {path}")
    examples = []
    for lineno, record in enumerate(records, start=1):
        _check_fields(record, _CATALYST_FIELDS, lineno)
        examples.append(
            CatalystExample(
                id=_require_str(record, "id", lineno),
                instruction=_require_str(record, "instruction", lineno),
                rationale_before=_require_str(record, "rationale_before", lineno),
                rationale_enriched=_require_str(record, "rationale_enriched", lineno),
            )
        )
    return make_catalyst_set(examples)


def write_catalyst(catalyst: CatalystSet, path: str | Path) -> str:
    atomic_write_text(path, catalyst_content(catalyst.examples))
    return catalyst.digest


# -- iteration manifests -----------------------------------------------------

def _manifest_body(fields: dict) -> str:
    return canonical_json({f: fields[f] for f in _MANIFEST_FIELDS})


def make_manifest(
    *,
    iteration: int,
    base_model_ref: str,
    trained_model_ref: str,
    dataset_digest: str,
    catalyst_digest: str,
    selector: str,
    config_digest: str,
    parent_manifest_digest: str,
) -> IterationManifest:
    if iteration < 0:
        raise SchemaError("negative iteration", field="iteration")
    if base_model_ref == "":
        raise SchemaError("empty base model ref", field="base_model_ref")
    if selector not in SELECTORS:
        raise SchemaError(f"selector must be one of {SELECTORS}", field="selector")
    if (parent_manifest_digest == "") != (iteration == 0):
        raise SchemaError(
            "parent digest is empty exactly at iteration 0", field="parent_manifest_digest"
        )
    fields = {
        "iteration": iteration,
        "base_model_ref": base_model_ref,
        "trained_model_ref": trained_model_ref,
        "dataset_digest": dataset_digest,
        "catalyst_digest": catalyst_digest,
        "selector": selector,
        "config_digest": config_digest,
        "parent_manifest_digest": parent_manifest_digest,
    }
    digest = sha256_text(_manifest_body(fields))
    return IterationManifest(digest=digest, **fields)


def load_manifest(path: str | Path) -> IterationManifest:
    with open(path, "r", encoding="utf-8") as fh:
        try:
            record = json.load(fh)
        except json.JSONDecodeError as exc:
            raise SchemaError(f"invalid JSON in {path}: {exc.msg}") from exc
    if not isinstance(record, dict):
        raise SchemaError(f"manifest is not an object: {path}")
    _check_fields(record, _MANIFEST_FIELDS + ("digest",), 1)
    stored = _require_str(record, "digest", 1)
    manifest = make_manifest(
        iteration=_require_int(record, "iteration", 1),
        base_model_ref=_require_str(record, "base_model_ref", 1),
        trained_model_ref=_require_str(record, "trained_model_ref", 1),
        dataset_digest=_require_str(record, "dataset_digest", 1),
        catalyst_digest=_require_str(record, "catalyst_digest", 1),
        selector=_require_str(record, "selector", 1),
        config_digest=_require_str(record, "config_digest", 1),
        parent_manifest_digest=_require_str(record, "parent_manifest_digest", 1),
    )
    if manifest.digest != stored:
        raise SchemaError(
            f"manifest digest mismatch: stored {stored[:12]}.., computed {manifest.digest[:12]}..",
            field="digest",
        )
    return manifest


def write_manifest(manifest: IterationManifest, path: str | Path) -> str:
    fields = {f: getattr(manifest, f) for f in _MANIFEST_FIELDS}
    record = dict(fields)
    record["digest"] = manifest.digest
    atomic_write_text(path, canonical_json(record) + "\n")
    return manifest.digest


# -- training corpus ---------------------------------------------------------

def merge_training_corpus(
    dataset: IterationDataset, catalyst: CatalystSet
) -> list[TrainingRecord]:
    """Join an iteration dataset with the catalyst set into one supervised corpus.

    Dataset samples train instruction -> rationale + answer; catalyst examples
    train the enrichment task itself.  Order is dataset records then catalyst
    records, so equal inputs always produce byte-equal corpora.
    """
    records = []
    for sample in dataset.samples:
        if sample.rationale:
            response = f"{sample.rationale}\n{sample.answer}"
        else:
            response = sample.answer
        records.append(
            TrainingRecord(
                system="",
                prompt=sample.instruction,
                response=response,
                source="dataset",
                source_id=sample.id,
            )
        )
    for example in catalyst.examples:
        records.append(
            TrainingRecord(
                system=prompts.ENRICHMENT_SYSTEM_PROMPT,
                prompt=prompts.enrichment_user_prompt(
                    example.instruction, example.rationale_before
                ),
                response=example.rationale_enriched,
                source="catalyst",
                source_id=example.id,
            )
        )
    return records


def training_line(record: TrainingRecord) -> str:
    return canonical_json({f: getattr(record, f) for f in _TRAINING_FIELDS})


def training_content(records: Iterable[TrainingRecord]) -> str:
    return "".join(training_line(r) + "\n" for r in records)


def write_training_corpus(records: Sequence[TrainingRecord], path: str | Path) -> str:
    content = training_content(records)
    atomic_write_text(path, content)
    return sha256_text(content)


def load_training_corpus(path: str | Path) -> list[TrainingRecord]:
    records = []
    for lineno, record in enumerate(_parse_lines(path), start=1):
        _check_fields(record, _TRAINING_FIELDS, lineno)
        records.append(
            TrainingRecord(
                system=_require_str(record, "system", lineno),
                prompt=_require_str(record, "prompt", lineno),
                response=_require_str(record, "response", lineno),
                source=_require_str(record, "source", lineno),
                source_id=_require_str(record, "source_id", lineno),
            )
        )
    return records
