"""Rationale expansion: N enrichment candidates per sample from the current model.

Every (sample, attempt) pair is its own backend request with its own
derived seed, so candidate sets are reproducible on the mock backend
and diverse on a live one.  Failures are represented as invalid
candidates rather than raised: the output always holds exactly
|dataset| * n_samples rows in (source index, attempt) order.
"""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

from . import catalyst, gateway, grammar, store

VALID = "valid"
INVALID = "invalid"

_CANDIDATE_FIELDS = ("sample_id", "attempt", "raw_text", "parse_status", "reason", "truncated")


@dataclass(frozen=True)
class ExpansionCandidate:
    sample_id: str
    attempt: int
    raw_text: str
    parse_status: str
    reason: str | None
    rationale: str
    post_thoughts: str
    truncated: bool


@dataclass(frozen=True)
class ExpansionConfig:
    n_samples: int = 5
    temperature: float = 0.2
    top_p: float = 0.9
    max_tokens: int = 8192
    concurrency_limit: int = 8
    run_seed: int = 0

    def __post_init__(self):
        if self.n_samples < 1:
            raise ValueError("n_samples must be >= 1")
        if self.concurrency_limit < 1:
            raise ValueError("concurrency_limit must be >= 1")


def _invalid(sample_id: str, attempt: int, raw_text: str, reason: str,
             truncated: bool = False) -> ExpansionCandidate:
    return ExpansionCandidate(
        sample_id=sample_id,
        attempt=attempt,
        raw_text=raw_text,
        parse_status=INVALID,
        reason=reason,
        rationale="",
        post_thoughts="",
        truncated=truncated,
    )


def _classify(sample_id: str, attempt: int, completion: gateway.Completion) -> ExpansionCandidate:
    if completion.truncated:
        return _invalid(sample_id, attempt, completion.text, "truncated", truncated=True)
    try:
        tree = grammar.parse_rationale(completion.text)
    except grammar.RationaleError as exc:
        return _invalid(sample_id, attempt, completion.text, exc.reason)
    return ExpansionCandidate(
        sample_id=sample_id,
        attempt=attempt,
        raw_text=completion.text,
        parse_status=VALID,
        reason=None,
        rationale=grammar.envelope_text(completion.text, tree),
        post_thoughts=tree.post_thoughts,
        truncated=False,
    )


def candidate_request(
    sample: store.InstructionSample,
    iteration: int,
    config: ExpansionConfig,
    attempt: int,
) -> gateway.GenerationRequest:
    """The exact request one candidate draw issues; fixture authors key on it."""
    system_prompt, user_prompt = catalyst.build_meta_prompt(sample)
    return gateway.GenerationRequest(
        system_prompt=system_prompt,
        user_prompt=user_prompt,
        temperature=config.temperature,
        top_p=config.top_p,
        max_tokens=config.max_tokens,
        n_samples=1,
        seed=store.derive_seed("expand", config.run_seed, iteration, sample.id, attempt),
    )


def expand_dataset(
    dataset: store.IterationDataset,
    handle: gateway.BackendHandle,
    config: ExpansionConfig,
) -> list[ExpansionCandidate]:
    """Produce n_samples candidates for every sample, in canonical order."""

    def one(job: tuple[store.InstructionSample, int]) -> ExpansionCandidate:
        sample, attempt = job
        request = candidate_request(sample, dataset.iteration, config, attempt)
        try:
            completion = gateway.generate(handle, request)[0]
        except gateway.TransportError:
            return _invalid(sample.id, attempt, "", "transport-failed")
        except gateway.BackendRefusalError:
            return _invalid(sample.id, attempt, "", "backend-refused")
        return _classify(sample.id, attempt, completion)

    jobs = [
        (sample, attempt)
        for sample in dataset.samples
        for attempt in range(1, config.n_samples + 1)
    ]
    with ThreadPoolExecutor(max_workers=config.concurrency_limit) as pool:
        return list(pool.map(one, jobs))


def candidates_content(candidates: Sequence[ExpansionCandidate]) -> str:
    lines = []
    for c in candidates:
        record = {
            "sample_id": c.sample_id,
            "attempt": c.attempt,
            "raw_text": c.raw_text,
            "parse_status": c.parse_status,
        }
        if c.parse_status == INVALID:
            record["reason"] = c.reason
        record["truncated"] = c.truncated
        lines.append(store.canonical_json(record))
    return "".join(line + "\n" for line in lines)


def write_candidates(candidates: Sequence[ExpansionCandidate], path: str | Path) -> str:
    content = candidates_content(candidates)
    store.atomic_write_text(path, content)
    return store.sha256_text(content)


def load_candidates(path: str | Path) -> list[ExpansionCandidate]:
    candidates = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            try:
                record = json.loads(raw)
            except json.JSONDecodeError as exc:
                raise store.SchemaError(f"invalid JSON: {exc.msg}", line=lineno) from exc
            if not isinstance(record, dict):
                raise store.SchemaError("record is not an object", line=lineno)
            unknown = [k for k in record if k not in _CANDIDATE_FIELDS]
            if unknown:
                raise store.SchemaError("unknown field", line=lineno, field=unknown[0])
            try:
                sample_id = record["sample_id"]
                attempt = record["attempt"]
                raw_text = record["raw_text"]
                parse_status = record["parse_status"]
                truncated = record["truncated"]
            except KeyError as exc:
                raise store.SchemaError("missing field", line=lineno, field=exc.args[0])
            if parse_status == VALID:
                if truncated:
                    raise store.SchemaError(
                        "valid candidate flagged truncated", line=lineno, field="truncated"
                    )
                try:
                    tree = grammar.parse_rationale(raw_text)
                except grammar.RationaleError as exc:
                    raise store.SchemaError(
                        f"stored valid candidate does not parse: {exc}",
                        line=lineno,
                        field="raw_text",
                    ) from exc
                candidates.append(
                    ExpansionCandidate(
                        sample_id=sample_id,
                        attempt=attempt,
                        raw_text=raw_text,
                        parse_status=VALID,
                        reason=None,
                        rationale=grammar.envelope_text(raw_text, tree),
                        post_thoughts=tree.post_thoughts,
                        truncated=False,
                    )
                )
            elif parse_status == INVALID:
                reason = record.get("reason")
                if not reason:
                    raise store.SchemaError(
                        "invalid candidate without reason", line=lineno, field="reason"
                    )
                candidates.append(
                    _invalid(sample_id, attempt, raw_text, reason, truncated=bool(truncated))
                )
            else:
                raise store.SchemaError(
                    f"parse_status must be {VALID} or {INVALID}",
                    line=lineno,
                    field="parse_status",
                )
    return candidates
