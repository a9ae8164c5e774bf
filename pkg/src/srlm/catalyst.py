"""Catalyst acquisition: enriched-rationale demonstrations for a sampled subset.

A fixed, seeded subset of the source corpus is sent through the
enrichment prompt; completions that do not come back as one clean
tagged block are regenerated, and samples that keep failing are
swapped for the next unsampled source index so the set size stays
exact.  The assembled set is ordered by source index, so acquisition
is reproducible whenever the backend is.
"""

from __future__ import annotations

import logging
import random
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

from . import gateway, grammar, prompts, store

log = logging.getLogger(__name__)


class CatalystError(Exception):
    pass


class ExhaustedPoolError(CatalystError):
    """The source corpus ran out of samples that yield valid enrichments."""


@dataclass(frozen=True)
class CatalystConfig:
    source_dataset: str | Path
    selection_seed: int
    sample_count: int = 1000
    max_regeneration_attempts: int = 2


def build_meta_prompt(sample: store.InstructionSample) -> tuple[str, str]:
    """System and user turns asking the backend to enrich one rationale."""
    return (
        prompts.ENRICHMENT_SYSTEM_PROMPT,
        prompts.enrichment_user_prompt(sample.instruction, sample.rationale),
    )


def enrichment_request(
    sample: store.InstructionSample, selection_seed: int, attempt: int
) -> gateway.GenerationRequest:
    """The exact request one acquisition attempt issues; fixture authors key on it."""
    system_prompt, user_prompt = build_meta_prompt(sample)
    return gateway.GenerationRequest(
        system_prompt=system_prompt,
        user_prompt=user_prompt,
        n_samples=1,
        seed=store.derive_seed("catalyst", selection_seed, sample.id, attempt),
    )


def _enrichment_problem(completion: gateway.Completion) -> str | None:
    """None when the completion is one clean tagged block, else a reason."""
    if completion.truncated:
        return "truncated"
    try:
        tree = grammar.parse_rationale(completion.text)
    except grammar.RationaleError as exc:
        return exc.reason
    if tree.post_thoughts.strip():
        return "trailing-text"
    return None


def acquire_catalyst(
    config: CatalystConfig, handle: gateway.BackendHandle
) -> store.CatalystSet:
    dataset = store.load_dataset(config.source_dataset)
    total = len(dataset.samples)
    if not 0 < config.sample_count <= total:
        raise CatalystError(
            f"sample_count {config.sample_count} outside [1, {total}] for this corpus"
        )

    rng = random.Random(config.selection_seed)
    chosen = sorted(rng.sample(range(total), config.sample_count))
    spare = [i for i in range(total) if i not in set(chosen)]

    def first_attempt(index: int) -> gateway.Completion:
        sample = dataset.samples[index]
        request = enrichment_request(sample, config.selection_seed, 0)
        return gateway.generate(handle, request)[0]

    with ThreadPoolExecutor(max_workers=handle.config.concurrency_limit) as pool:
        initial = dict(zip(chosen, pool.map(first_attempt, chosen)))

    def settle(index: int, completion: gateway.Completion) -> store.CatalystExample | None:
        """Regenerate until valid or the attempt budget runs out."""
        sample = dataset.samples[index]
        problem = _enrichment_problem(completion)
        attempt = 0
        while problem is not None and attempt < config.max_regeneration_attempts:
            attempt += 1
            log.info("regenerating %s (attempt %d): %s", sample.id, attempt, problem)
            completion = gateway.generate(
                handle, enrichment_request(sample, config.selection_seed, attempt)
            )[0]
            problem = _enrichment_problem(completion)
        if problem is not None:
            return None
        return store.CatalystExample(
            id=sample.id,
            instruction=sample.instruction,
            rationale_before=sample.rationale,
            rationale_enriched=completion.text,
        )

    placed: list[tuple[int, store.CatalystExample]] = []
    for index in chosen:
        example = settle(index, initial[index])
        while example is None:
            if not spare:
                raise ExhaustedPoolError(
                    f"corpus cannot supply {config.sample_count} valid examples"
                )
            replacement = spare.pop(0)
            log.info(
                "replacing sample %s with %s after exhausting regeneration attempts",
                dataset.samples[index].id,
                dataset.samples[replacement].id,
            )
            index = replacement
            example = settle(index, first_attempt(index))
        placed.append((index, example))

    placed.sort(key=lambda pair: pair[0])
    return store.make_catalyst_set([example for _, example in placed])
