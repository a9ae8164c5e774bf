"""Generate and audit the frozen golden-run artifacts in tests/data/golden.

The expected datasets and manifests are computed here with standalone
selection logic and serializers, deliberately not calling into the
pipeline's own selection or store serialization paths.  The tool then
runs the real pipeline against the generated inputs and refuses to
freeze anything unless every produced file is byte-identical to the
independent expectation.  Rerunning the tool must reproduce the frozen
bytes exactly; a diff means pipeline behavior drifted.

Usage: python3 tools/make_golden.py [--check]

With --check, compare against the already-frozen files instead of
rewriting them.
"""

from __future__ import annotations

import hashlib
import json
import shutil
import sys
import tempfile
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

from srlm import expansion, gateway, grammar, orchestrator, selection, store  # noqa: E402

GOLDEN_DIR = Path(__file__).resolve().parent.parent / "tests" / "data" / "golden"

BASE_MODEL = "golden-base"
RUN_SEED = 7
N_SAMPLES = 5
SELECTORS = ("length", "off-policy", "on-policy")

# (instruction, answer, seed rationale).  Empty rationales are legal at
# iteration 0 only, so every empty-rationale row must be replaced in the
# first selection round under every selector; the coverage checks below
# enforce that.
SEED_ROWS = [
    ("What is 17 + 25?", "42", ""),
    ("A train travels 60 km in 40 minutes. What is its speed in km/h?", "90", ""),
    ("How many legs do 7 spiders have in total?", "56", ""),
    ("Name the only even prime number.", "2", "Two divides itself and one."),
    ("What is 9 squared minus 1?", "80", ""),
    ("If x + 3 = 11, what is x?", "8", "Subtract three from eleven."),
    ("Compute 3 × 7 − 1.", "20", "Multiply first, then subtract."),
    ("How many minutes are there in 2.5 hours?", "150", ""),
    ("What is the remainder of 29 divided by 6?", "5", "29 = 4*6 + 5."),
    ("A dozen eggs minus a quarter dozen leaves how many?", "9", "A quarter dozen is 3."),
    ("What is 1000 - 137?", "863", ""),
    ("How many sides does a hexagon have?", "6", "Hex means six."),
    ("What is the next square after 49?", "64", "Eight squared."),
    ("If 5 machines need 5 minutes for 5 parts, how long for 100 parts with 100 machines?", "5", "Each machine makes one part in five minutes."),
    ("What is half of 2 plus 2?", "3", "Half of two is one."),
    ("How many days are in a leap-year February?", "29", ""),
    ("What is 12% of 50?", "6", "Ten percent is 5, two percent is 1."),
    ("Which digit appears twice in 8,118?", "1", "Read the digits out."),
    ("What is 7 factorial divided by 6 factorial?", "7", ""),
    ("A book is read 30 pages a day and has 210 pages. How many days?", "7", ""),
]

CATALYST_ROWS = [
    ("k0000", "What is 15 + 4?", "19, trivially.",
     "<thoughts>\n<decomposition>Add the units: 5 + 4 = 9, keep the ten.</decomposition>\n<check>19 - 4 = 15, consistent.</check>\n</thoughts>"),
    ("k0001", "How many wheels do 3 cars have?", "Twelve.",
     "<thoughts>\n<decomposition>Each car has 4 wheels.<detail>3 groups of 4 is 12.</detail></decomposition>\n</thoughts>"),
    ("k0002", "What is 100 / 4?", "25.",
     "<thoughts>\n<detail>Quarter of one hundred: halve twice, 50 then 25.</detail>\n<summary>So the quotient is 25.</summary>\n</thoughts>"),
    ("k0003", "Is 91 prime?", "No, 7 times 13.",
     "<thoughts>\n<alternatives>Try small primes: 7 divides 91 because 7*13 = 91.</alternatives>\n<reflection>Checking 7 early avoids trial division past the square root.</reflection>\n</thoughts>"),
    ("k0004", "What is the square root of 144?", "12.",
     "<thoughts>\n<backward>Which number squared gives 144? 12*12 = 144.</backward>\n<check>11*11 = 121 is too small, 13*13 = 169 too large.</check>\n</thoughts>"),
]


# -- candidate text generation ------------------------------------------------

def candidate_text(sample, i: int, attempt: int, t: int) -> tuple[str, bool]:
    """Deterministic completion for sample index i, attempt, dataset iteration t."""
    answer = sample.answer
    if i == 13 and t == 0:
        return f"The answer is {answer}; skipping the reasoning (attempt {attempt}).", False
    if i == 6 and t == 1:
        if attempt == 3:
            return sample.rationale, False
        return (
            f"<thoughts>\n<decomposition>brief recheck {attempt}</decomposition>\n"
            f"</thoughts>\nSame answer.",
            False,
        )
    if (i + attempt + t) % 13 == 0:
        return f"Clearly the answer is {answer}, no working shown.", False
    if (i + 2 * attempt + t) % 11 == 0:
        return "<thoughts>\n<decomposition>first split the problem into", True
    pad = "x" * (20 + (7 * i + 13 * attempt + 5 * t) % 80)
    variant = (i + attempt) % 4
    if variant == 0:
        body = f"<decomposition>break it down: {pad}</decomposition>"
        post = f"\nThe answer is {answer}."
    elif variant == 1:
        body = (
            f"<decomposition>split: {pad}<check>verify the parts line up</check>"
            f"</decomposition>"
        )
        post = "\nSo \\boxed{" + answer + "}."
    elif variant == 2:
        body = f"<detail>expand: {pad}</detail>\n<summary>the pieces agree</summary>"
        post = f"\nThe answer is {answer}."
    else:
        body = f"<detail>work: {pad}</detail>\n<reflection>the logic holds up</reflection>"
        post = f"\nFinal answer: {answer}."
    return f"<thoughts>\n{body}\n</thoughts>{post}", False


# -- independent selection ----------------------------------------------------

def argmax_branch(scores: dict[str, float]) -> tuple[str, bool]:
    """Highest score wins; candidate ties to lowest attempt; incumbent keeps ties."""
    candidates = {k: v for k, v in scores.items() if k != "incumbent"}
    if not candidates:
        return "incumbent", False
    best_total = max(candidates.values())
    best_label = min(
        (k for k, v in candidates.items() if v == best_total),
        key=lambda label: int(label.rsplit("-", 1)[1]),
    )
    if best_total > scores["incumbent"]:
        return best_label, False
    return "incumbent", best_total == scores["incumbent"]


# -- score planning -----------------------------------------------------------

SCORE_OVERRIDES = {
    # (sample index, dataset iteration): {branch: total}; branch 0 = incumbent.
    (9, 0): {0: -2.0, 2: -3.0, 3: -0.25, 5: -0.25},
    (6, 0): {0: -1.0, 1: -2.0, 2: -2.0, 3: -2.0, 4: -2.0, 5: -0.25},
    (12, 0): {0: -0.75, 2: -0.75, 3: -2.0, 4: -2.25},
}


def planned_total(i: int, t: int, branch: int, seed_rationale_empty: bool) -> float:
    if branch == 0 and t == 0 and seed_rationale_empty:
        return -5.0
    override = SCORE_OVERRIDES.get((i, t))
    if override is not None and branch in override:
        return override[branch]
    return -0.25 * (1 + ((3 * i + 5 * branch + 7 * t) % 16))


def split_logprobs(total: float) -> list[float]:
    units = round(total / -0.25)
    if units <= 1:
        return [total]
    first = units // 2
    return [-0.25 * first, -0.25 * (units - first)]


# -- independent serialization ------------------------------------------------

def sha256_text(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def dumps(record: dict) -> str:
    return json.dumps(record, ensure_ascii=False, separators=(",", ":"))


def sample_line(sample: dict) -> str:
    ordered = {k: sample[k] for k in
               ("id", "instruction", "rationale", "answer", "iteration", "provenance")}
    return dumps(ordered)


def dataset_text(samples: list[dict]) -> str:
    return "".join(sample_line(s) + "\n" for s in samples)


def independent_config_digest(selector: str) -> str:
    digested = {
        "base_model_ref": BASE_MODEL,
        "selector": selector,
        "max_iterations": 2,
        "n_samples": N_SAMPLES,
        "temperature": 0.2,
        "top_p": 0.9,
        "max_tokens": 8192,
        "run_seed": RUN_SEED,
        "trainer_hook": "noop",
        "tie_break": "incumbent",
        "length_metric": "chars",
        "update_catalyst": "off",
        "digest_algorithm": "sha256",
        "score_context_format": "instruction-lf-rationale-lf-v1",
    }
    return sha256_text(
        json.dumps(digested, ensure_ascii=False, sort_keys=True, separators=(",", ":"))
    )


def manifest_text(fields: dict) -> tuple[str, str]:
    ordered = {k: fields[k] for k in (
        "iteration", "base_model_ref", "trained_model_ref", "dataset_digest",
        "catalyst_digest", "selector", "config_digest", "parent_manifest_digest")}
    digest = sha256_text(dumps(ordered))
    record = dict(ordered)
    record["digest"] = digest
    return dumps(record) + "\n", digest


# -- scenario assembly --------------------------------------------------------

def build_seed_samples() -> list[dict]:
    return [
        {
            "id": f"g{i:04d}",
            "instruction": instruction,
            "rationale": rationale,
            "answer": answer,
            "iteration": 0,
            "provenance": "seed",
        }
        for i, (instruction, answer, rationale) in enumerate(SEED_ROWS)
    ]


def catalyst_text() -> str:
    lines = []
    for cid, instruction, before, enriched in CATALYST_ROWS:
        lines.append(dumps({
            "id": cid,
            "instruction": instruction,
            "rationale_before": before,
            "rationale_enriched": enriched,
        }))
    return "".join(line + "\n" for line in lines)


class Scenario:
    """Everything both the fixture and the expected outputs derive from."""

    def __init__(self):
        self.seed_samples = build_seed_samples()
        # (context, continuation) -> total logprob
        self.totals: dict[tuple[str, str], float] = {}
        self.audit_lines: list[str] = []

    def expand_texts(self, samples: list[dict], t: int) -> dict:
        """(i, attempt) -> (text, truncated) for one dataset's expansion pass."""
        texts = {}
        for i, sample_dict in enumerate(samples):
            sample = store.InstructionSample(**sample_dict)
            for attempt in range(1, N_SAMPLES + 1):
                texts[(i, attempt)] = candidate_text(sample, i, attempt, t)
        return texts

    @staticmethod
    def valid_branches(texts: dict, i: int) -> dict[int, str]:
        branches = {}
        for attempt in range(1, N_SAMPLES + 1):
            text, truncated = texts[(i, attempt)]
            if truncated:
                continue
            try:
                grammar.parse_rationale(text)
            except grammar.RationaleError:
                continue
            branches[attempt] = text
        return branches

    def put_total(self, context: str, continuation: str, total: float) -> None:
        key = (context, continuation)
        if key in self.totals and self.totals[key] != total:
            raise SystemExit(f"score purity violation for context {context[:40]!r}")
        self.totals[key] = total

    def select_iteration(self, samples: list[dict], t: int, selector: str, texts: dict):
        """Decisions plus the next iteration's samples, fully independently."""
        decisions = []
        next_samples = []
        for i, sample in enumerate(samples):
            ctx = f"{sample['instruction']}\n{sample['rationale']}\n"
            branches = self.valid_branches(texts, i)
            if selector == "length":
                scores = {"incumbent": float(len(sample["rationale"]))}
                for attempt in sorted(branches):
                    scores[f"candidate-{attempt}"] = float(len(branches[attempt]))
            else:
                seed_empty = self.seed_samples[i]["rationale"] == ""
                incumbent_key = (ctx, sample["answer"])
                if t == 0:
                    incumbent_total = planned_total(i, 0, 0, seed_empty)
                    self.put_total(ctx, sample["answer"], incumbent_total)
                else:
                    if incumbent_key not in self.totals:
                        raise SystemExit(
                            f"iteration-{t} incumbent for sample {i} was never scored"
                        )
                    incumbent_total = self.totals[incumbent_key]
                scores = {"incumbent": incumbent_total}
                for attempt in sorted(branches):
                    branch_ctx = f"{sample['instruction']}\n{branches[attempt]}\n"
                    branch_key = (branch_ctx, sample["answer"])
                    if branch_key in self.totals:
                        total = self.totals[branch_key]
                    else:
                        total = planned_total(i, t, attempt, seed_empty)
                        self.put_total(branch_ctx, sample["answer"], total)
                    scores[f"candidate-{attempt}"] = total
            winner, tie = argmax_branch(scores)
            decisions.append({
                "sample_id": sample["id"],
                "winner": winner,
                "selector": selector,
                "scores": scores,
                "tie_break_applied": tie,
            })
            if winner == "incumbent":
                rationale = sample["rationale"]
                provenance = "incumbent-retained"
            else:
                rationale = branches[int(winner.rsplit("-", 1)[1])]
                provenance = "expansion-selected"
            next_samples.append({
                "id": sample["id"],
                "instruction": sample["instruction"],
                "rationale": rationale,
                "answer": sample["answer"],
                "iteration": t + 1,
                "provenance": provenance,
            })
        return decisions, next_samples


def audit_table(scenario, selector, t, decisions):
    scenario.audit_lines.append(f"\n== {selector} iteration {t + 1} ==")
    replaced = sum(1 for d in decisions if d["winner"] != "incumbent")
    for d in decisions:
        flag = " TIE" if d["tie_break_applied"] else ""
        shown = ", ".join(f"{k}={v:g}" for k, v in d["scores"].items())
        scenario.audit_lines.append(f"{d['sample_id']}: {d['winner']}{flag}  [{shown}]")
    scenario.audit_lines.append(f"replaced {replaced} of {len(decisions)}")


def build_fixture(scenario, expansion_passes) -> list[dict]:
    """Mock records for every request the three runs will issue."""
    records: dict[str, dict] = {}

    def add(record):
        digest = record["request_digest"]
        if digest in records and records[digest] != record:
            raise SystemExit(f"conflicting fixture record for {digest[:12]}")
        records[digest] = record

    exp_config = expansion.ExpansionConfig(n_samples=N_SAMPLES, run_seed=RUN_SEED)
    for samples, t, texts in expansion_passes:
        for i, sample_dict in enumerate(samples):
            sample = store.InstructionSample(**sample_dict)
            for attempt in range(1, N_SAMPLES + 1):
                text, truncated = texts[(i, attempt)]
                request = expansion.candidate_request(sample, t, exp_config, attempt)
                add({
                    "request_digest": gateway.generation_digest(BASE_MODEL, request),
                    "completions": [text],
                    "truncated": [truncated],
                })
    for (context, continuation), total in scenario.totals.items():
        request = gateway.ScoreRequest(
            context=context, continuation=continuation, model_ref=BASE_MODEL
        )
        add({
            "request_digest": gateway.score_digest(request),
            "logprobs": [split_logprobs(total)],
        })
    return list(records.values())


def expected_manifests(selector, dataset_digests, catalyst_digest):
    config_digest = independent_config_digest(selector)
    manifests = []
    parent = ""
    for t in range(3):
        text, digest = manifest_text({
            "iteration": t,
            "base_model_ref": BASE_MODEL,
            "trained_model_ref": "" if t == 0 else BASE_MODEL,
            "dataset_digest": dataset_digests[t],
            "catalyst_digest": catalyst_digest,
            "selector": selector,
            "config_digest": config_digest,
            "parent_manifest_digest": parent,
        })
        manifests.append(text)
        parent = digest
    return manifests


def coverage_checks(expected):
    """The scenario must actually exercise the interesting decision shapes."""
    problems = []

    def winners(selector, t):
        return [(d["winner"], d["tie_break_applied"]) for d in expected[selector]["decisions"][t]]

    for selector in SELECTORS:
        first, second = winners(selector, 0), winners(selector, 1)
        if not any(w == "incumbent" for w, _ in first):
            problems.append(f"{selector}: no incumbent retained in iteration 1")
        if not any(w != "incumbent" for w, _ in second):
            problems.append(f"{selector}: no candidate selected in iteration 2")
        if not any(tie for _, tie in first + second):
            problems.append(f"{selector}: no flagged tie anywhere")
    off_first = expected["off-policy"]["decisions"][0]
    if not any(
        d["winner"] != "incumbent"
        and list(d["scores"].values()).count(d["scores"][d["winner"]]) > 1
        for d in off_first
    ):
        problems.append("off-policy: no candidate-candidate tie in iteration 1")
    for i, row in enumerate(build_seed_samples()):
        if row["rationale"] == "":
            for selector in SELECTORS:
                if expected[selector]["decisions"][0][i]["winner"] == "incumbent":
                    problems.append(
                        f"{selector}: empty-rationale seed {row['id']} retained"
                    )
    if problems:
        raise SystemExit("coverage not met:\n  " + "\n  ".join(problems))


def compute_expected():
    scenario = Scenario()
    seed = scenario.seed_samples
    seed_texts = scenario.expand_texts(seed, 0)

    expected = {}
    expansion_passes = [(seed, 0, seed_texts)]
    for selector in SELECTORS:
        decisions_1, d1 = scenario.select_iteration(seed, 0, selector, seed_texts)
        d1_texts = scenario.expand_texts(d1, 1)
        decisions_2, d2 = scenario.select_iteration(d1, 1, selector, d1_texts)
        expected[selector] = {
            "decisions": [decisions_1, decisions_2],
            "datasets": [seed, d1, d2],
        }
        expansion_passes.append((d1, 1, d1_texts))
        audit_table(scenario, selector, 0, decisions_1)
        audit_table(scenario, selector, 1, decisions_2)

    # The on-policy scorer is the trained model, which the noop hook pins to
    # the base model, so both score-based trajectories must coincide.
    if expected["on-policy"]["datasets"] != expected["off-policy"]["datasets"]:
        raise SystemExit("score-based trajectories diverged under the noop hook")

    coverage_checks(expected)
    fixture_records = build_fixture(scenario, expansion_passes)
    return scenario, expected, fixture_records


# -- pipeline comparison ------------------------------------------------------

def run_pipeline(selector, golden_inputs, workspace):
    config = orchestrator.RunConfig(
        base_model_ref=BASE_MODEL,
        catalyst_path=str(golden_inputs / "catalyst.jsonl"),
        dataset0_path=str(golden_inputs / "seed.jsonl"),
        workspace=str(workspace),
        selector=selector,
        max_iterations=2,
        n_samples=N_SAMPLES,
        run_seed=RUN_SEED,
        trainer_hook="noop",
        backend_fixture=str(golden_inputs / "fixture.jsonl"),
    )
    orchestrator.run(config)


def compare_run(selector, expected, workspace, catalyst_digest):
    """Byte-compare the pipeline's outputs against the independent expectation."""
    mismatches = []
    dataset_digests = []
    for t in range(3):
        want = dataset_text(expected[selector]["datasets"][t])
        dataset_digests.append(sha256_text(want))
        got = (workspace / "datasets" / f"dataset-{t:05d}.jsonl").read_text(encoding="utf-8")
        if got != want:
            mismatches.append(f"{selector} dataset {t}")
    for t, want in enumerate(
        expected_manifests(selector, dataset_digests, catalyst_digest)
    ):
        got = (workspace / "manifests" / f"manifest-{t:05d}.json").read_text(encoding="utf-8")
        if got != want:
            mismatches.append(f"{selector} manifest {t}")
    for t in (1, 2):
        produced = selection.load_decisions(
            workspace / "stages" / f"iter-{t:05d}" / "decisions.jsonl"
        )
        for want, got in zip(expected[selector]["decisions"][t - 1], produced, strict=True):
            matches = (
                got.sample_id == want["sample_id"]
                and got.winner == want["winner"]
                and got.selector == want["selector"]
                and dict(got.scores) == want["scores"]
                and list(got.scores) == list(want["scores"])
                and got.tie_break_applied == want["tie_break_applied"]
            )
            if not matches:
                mismatches.append(f"{selector} decision {want['sample_id']} iter {t}")
    return mismatches


def main() -> int:
    check_only = "--check" in sys.argv[1:]
    scenario, expected, fixture_records = compute_expected()

    staging = Path(tempfile.mkdtemp(prefix="golden-"))
    inputs = staging / "inputs"
    inputs.mkdir()
    (inputs / "seed.jsonl").write_text(dataset_text(scenario.seed_samples), encoding="utf-8")
    (inputs / "catalyst.jsonl").write_text(catalyst_text(), encoding="utf-8")
    fixture_text = "".join(dumps(r) + "\n" for r in fixture_records)
    (inputs / "fixture.jsonl").write_text(fixture_text, encoding="utf-8")
    catalyst_digest = sha256_text(catalyst_text())

    all_mismatches = []
    produced_files = {}
    for selector in SELECTORS:
        workspace = staging / f"ws-{selector}"
        run_pipeline(selector, inputs, workspace)
        all_mismatches += compare_run(selector, expected, workspace, catalyst_digest)
        files = {}
        for t in range(3):
            files[f"dataset-{t:05d}.jsonl"] = (
                workspace / "datasets" / f"dataset-{t:05d}.jsonl"
            ).read_bytes()
            files[f"manifest-{t:05d}.json"] = (
                workspace / "manifests" / f"manifest-{t:05d}.json"
            ).read_bytes()
        for t in (1, 2):
            files[f"decisions-{t:05d}.jsonl"] = (
                workspace / "stages" / f"iter-{t:05d}" / "decisions.jsonl"
            ).read_bytes()
        produced_files[selector] = files

    if all_mismatches:
        print("MISMATCHES — nothing frozen:")
        for m in all_mismatches:
            print(f"  {m}")
        return 1

    score_requests = sum(
        len(d["scores"]) for sel in ("off-policy", "on-policy")
        for t in range(2) for d in expected[sel]["decisions"][t]
    )
    generation_requests = 3 * 2 * len(SEED_ROWS) * N_SAMPLES
    scenario.audit_lines.append(
        f"\nfixture: {len(fixture_records)} distinct records; "
        f"requests served with multiplicity: "
        f"{generation_requests} generation + {score_requests} score = "
        f"{generation_requests + score_requests}"
    )
    audit = "golden run audit\n" + "\n".join(scenario.audit_lines) + "\n"

    frozen = {
        "seed.jsonl": dataset_text(scenario.seed_samples).encode("utf-8"),
        "catalyst.jsonl": catalyst_text().encode("utf-8"),
        "fixture.jsonl": fixture_text.encode("utf-8"),
        "audit.txt": audit.encode("utf-8"),
    }
    for selector, files in produced_files.items():
        for name, data in files.items():
            frozen[f"expected/{selector}/{name}"] = data

    if check_only:
        stale = []
        for rel, data in frozen.items():
            path = GOLDEN_DIR / rel
            if not path.exists() or path.read_bytes() != data:
                stale.append(rel)
        shutil.rmtree(staging)
        if stale:
            print("STALE golden files:")
            for rel in stale:
                print(f"  {rel}")
            return 1
        print(f"golden files up to date ({len(frozen)} files)")
        return 0

    for rel, data in frozen.items():
        path = GOLDEN_DIR / rel
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(data)
    shutil.rmtree(staging)
    print(f"froze {len(frozen)} files under {GOLDEN_DIR}")
    print(f"fixture records: {len(fixture_records)}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
