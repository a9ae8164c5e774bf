"""Selectors: pick the surviving rationale per sample and build the next dataset.

Three strategies share one decision rule.  The length selector scores
branches by rationale size; the two score selectors ask a scoring
model for the total log-probability of the fixed answer continuing
each branch's context, and differ only in which model scores.  The
argmax is taken jointly over the incumbent and all valid candidates;
exact ties keep the incumbent.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

from . import gateway, store
from .expansion import VALID, ExpansionCandidate

INCUMBENT = "incumbent"
SCORE_SELECTORS = ("off-policy", "on-policy")

# Context rendering for score selectors; named so configs can pin it.
SCORE_CONTEXT_FORMAT = "instruction-lf-rationale-lf-v1"

_DECISION_FIELDS = ("sample_id", "winner", "selector", "scores", "tie_break_applied")


class SelectionError(Exception):
    pass


@dataclass(frozen=True)
class SelectionDecision:
    sample_id: str
    winner: str
    selector: str
    scores: dict[str, float]
    tie_break_applied: bool


def candidate_label(attempt: int) -> str:
    return f"candidate-{attempt}"


def _attempt_of(label: str) -> int:
    return int(label.rsplit("-", 1)[1])


def decide_from_scores(scores: dict[str, float]) -> tuple[str, bool]:
    """Winner label and tie flag from one sample's branch scores.

    Highest score wins; candidate ties break to the lowest attempt; a
    best candidate exactly equal to the incumbent keeps the incumbent
    with the tie flag set.
    """
    labels = sorted((k for k in scores if k != INCUMBENT), key=_attempt_of)
    if not labels:
        return INCUMBENT, False
    best = max(labels, key=lambda k: (scores[k], -_attempt_of(k)))
    if scores[best] > scores[INCUMBENT]:
        return best, False
    return INCUMBENT, scores[best] == scores[INCUMBENT]


def _check_ids(sample: store.InstructionSample, candidates: Sequence[ExpansionCandidate]):
    stray = [c.sample_id for c in candidates if c.sample_id != sample.id]
    if stray:
        raise SelectionError(f"candidate for {stray[0]!r} passed with sample {sample.id!r}")


def _ordered_scores(
    incumbent_score: float, candidate_scores: dict[int, float]
) -> dict[str, float]:
    scores = {INCUMBENT: incumbent_score}
    for attempt in sorted(candidate_scores):
        scores[candidate_label(attempt)] = candidate_scores[attempt]
    return scores


def select_length(
    sample: store.InstructionSample,
    candidates: Sequence[ExpansionCandidate],
    *,
    metric: str = "chars",
    tokenizer: Callable[[str], Sequence[str]] | None = None,
) -> SelectionDecision:
    """Longest stored-rationale branch wins (character count by default)."""
    _check_ids(sample, candidates)
    if metric == "chars":
        measure = len
    elif metric == "tokens":
        if tokenizer is None:
            raise SelectionError("length metric 'tokens' requires a tokenizer")
        measure = lambda text: len(tokenizer(text))
    else:
        raise SelectionError(f"unknown length metric {metric!r}")
    scores = _ordered_scores(
        float(measure(sample.rationale)),
        {c.attempt: float(measure(c.raw_text)) for c in candidates if c.parse_status == VALID},
    )
    winner, tie = decide_from_scores(scores)
    return SelectionDecision(
        sample_id=sample.id,
        winner=winner,
        selector="length",
        scores=scores,
        tie_break_applied=tie,
    )


def score_context(instruction: str, rationale: str) -> str:
    return f"{instruction}\n{rationale}\n"


def select_by_score(
    sample: store.InstructionSample,
    candidates: Sequence[ExpansionCandidate],
    scorer_handle: gateway.BackendHandle,
    *,
    selector: str = "off-policy",
) -> SelectionDecision:
    """Branch whose context gives the answer the highest total logprob wins.

    UnsupportedCapabilityError propagates: a partially scored sample
    must never be compared.
    """
    if selector not in SCORE_SELECTORS:
        raise SelectionError(f"selector must be one of {SCORE_SELECTORS}")
    _check_ids(sample, candidates)

    def branch_score(rationale: str) -> float:
        request = gateway.ScoreRequest(
            context=score_context(sample.instruction, rationale),
            continuation=sample.answer,
            model_ref=scorer_handle.model_ref,
        )
        return gateway.score_continuation(scorer_handle, request).total_logprob

    scores = _ordered_scores(
        branch_score(sample.rationale),
        {c.attempt: branch_score(c.raw_text) for c in candidates if c.parse_status == VALID},
    )
    winner, tie = decide_from_scores(scores)
    return SelectionDecision(
        sample_id=sample.id,
        winner=winner,
        selector=selector,
        scores=scores,
        tie_break_applied=tie,
    )


def apply_selection(
    dataset: store.IterationDataset,
    decisions: Sequence[SelectionDecision],
    candidates: Sequence[ExpansionCandidate],
) -> store.IterationDataset:
    """Build the next iteration's dataset from per-sample decisions."""
    by_id: dict[str, SelectionDecision] = {}
    for decision in decisions:
        if decision.sample_id in by_id:
            raise SelectionError(f"duplicate decision for {decision.sample_id!r}")
        by_id[decision.sample_id] = decision
    known = {sample.id for sample in dataset.samples}
    stray = set(by_id) - known
    if stray:
        raise SelectionError(f"decision for unknown sample {sorted(stray)[0]!r}")

    candidate_index = {(c.sample_id, c.attempt): c for c in candidates}
    next_iteration = dataset.iteration + 1
    new_samples = []
    for sample in dataset.samples:
        decision = by_id.get(sample.id)
        if decision is None:
            raise SelectionError(f"missing decision for {sample.id!r}")
        if decision.winner == INCUMBENT:
            rationale = sample.rationale
            provenance = store.PROVENANCE_RETAINED
        else:
            winner = candidate_index.get((sample.id, _attempt_of(decision.winner)))
            if winner is None:
                raise SelectionError(
                    f"decision for {sample.id!r} names absent {decision.winner}"
                )
            if winner.parse_status != VALID:
                raise SelectionError(
                    f"decision for {sample.id!r} names invalid {decision.winner}"
                )
            rationale = winner.raw_text
            provenance = store.PROVENANCE_SELECTED
        new_samples.append(
            store.InstructionSample(
                id=sample.id,
                instruction=sample.instruction,
                rationale=rationale,
                answer=sample.answer,
                iteration=next_iteration,
                provenance=provenance,
            )
        )
    return store.make_dataset(new_samples, next_iteration)


def replacement_count(decisions: Sequence[SelectionDecision]) -> int:
    """How many samples took a candidate (the per-iteration selection count)."""
    return sum(1 for d in decisions if d.winner != INCUMBENT)


def decisions_content(decisions: Sequence[SelectionDecision]) -> str:
    lines = []
    for d in decisions:
        record = {
            "sample_id": d.sample_id,
            "winner": d.winner,
            "selector": d.selector,
            "scores": d.scores,
            "tie_break_applied": d.tie_break_applied,
        }
        lines.append(store.canonical_json(record))
    return "".join(line + "\n" for line in lines)


def write_decisions(decisions: Sequence[SelectionDecision], path: str | Path) -> str:
    content = decisions_content(decisions)
    store.atomic_write_text(path, content)
    return store.sha256_text(content)


def load_decisions(path: str | Path) -> list[SelectionDecision]:
    decisions = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            try:
                record = json.loads(raw)
            except json.JSONDecodeError as exc:
                raise store.SchemaError(f"invalid JSON: {exc.msg}", line=lineno) from exc
            if not isinstance(record, dict) or set(record) != set(_DECISION_FIELDS):
                raise store.SchemaError("malformed decision record", line=lineno)
            winner = record["winner"]
            scores = {str(k): float(v) for k, v in record["scores"].items()}
            if winner not in scores:
                raise store.SchemaError(
                    "winner has no score entry", line=lineno, field="winner"
                )
            decisions.append(
                SelectionDecision(
                    sample_id=record["sample_id"],
                    winner=winner,
                    selector=record["selector"],
                    scores=scores,
                    tie_break_applied=bool(record["tie_break_applied"]),
                )
            )
    return decisions
