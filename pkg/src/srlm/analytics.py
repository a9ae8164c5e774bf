"""Analysis artifacts: skill distributions, best-of-N curves, log-curve fits.

The fit is closed-form ordinary least squares on (ln n, y); "log" means
the natural logarithm throughout.  Best-of-N accuracy uses one sample
pool per task: max(n) completions are drawn once and every smaller N
scores the prefix, so the curve is monotone by construction.
"""

from __future__ import annotations

import json
import math
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import expansion, gateway, grammar, store

MATCH_MODES = ("exact", "numeric")

_TASK_FIELDS = ("id", "prompt", "expected_answer", "match")
_BOXED = re.compile(r"\\boxed\{([^{}]*)\}")
_NUMBER = re.compile(r"[-+]?\d+(?:\.\d+)?(?:[eE][-+]?\d+)?")


class AnalyticsError(Exception):
    pass


class DegenerateInputError(AnalyticsError):
    """Fit requested on points that cannot determine a slope."""


@dataclass(frozen=True)
class PassAtNCurve:
    n_values: tuple[int, ...]
    accuracy: tuple[float, ...]

    def __post_init__(self):
        if len(self.n_values) != len(self.accuracy) or not self.n_values:
            raise AnalyticsError("curve needs matching, nonempty n and accuracy lists")
        if any(n < 1 for n in self.n_values):
            raise AnalyticsError("n values must be >= 1")
        if any(b <= a for a, b in zip(self.n_values, self.n_values[1:])):
            raise AnalyticsError("n values must be strictly increasing")
        if any(not 0 <= value <= 100 for value in self.accuracy):
            raise AnalyticsError("accuracy values must lie in [0, 100]")
        if any(b < a for a, b in zip(self.accuracy, self.accuracy[1:])):
            raise AnalyticsError("accuracy must be non-decreasing in n")


@dataclass(frozen=True)
class LogFit:
    a: float
    b: float
    residual_sum_squares: float


@dataclass(frozen=True)
class EvalTask:
    id: str
    prompt: str
    expected_answer: str
    match: str


@dataclass(frozen=True)
class SkillReport:
    documents: int
    parsed_documents: int
    unparsed_documents: int
    total_tags: int
    skills: dict[str, dict]


# -- log-curve fitting -------------------------------------------------------

def fit_points(n_values: Sequence[int], accuracy: Sequence[float]) -> LogFit:
    """OLS fit of y = a * ln(n) + b; order of points is irrelevant."""
    if len(n_values) != len(accuracy):
        raise AnalyticsError("point lists differ in length")
    if len(n_values) < 2:
        raise DegenerateInputError("need at least 2 points to fit")
    if any(n <= 0 for n in n_values):
        raise AnalyticsError("n values must be positive for a log fit")
    if len(set(n_values)) == 1:
        raise DegenerateInputError("all n values equal; slope undetermined")
    x = np.log(np.asarray(n_values, dtype=float))
    y = np.asarray(accuracy, dtype=float)
    xc = x - x.mean()
    a = float(xc @ (y - y.mean()) / (xc @ xc))
    b = float(y.mean() - a * x.mean())
    residuals = y - (a * x + b)
    return LogFit(a=a, b=b, residual_sum_squares=float(residuals @ residuals))


def fit_log_curve(curve: PassAtNCurve) -> LogFit:
    return fit_points(curve.n_values, curve.accuracy)


def format_fit(fit: LogFit) -> str:
    sign = "+" if fit.b >= 0 else "-"
    return f"y = {fit.a:.4f} * ln(x) {sign} {abs(fit.b):.4f}"


def write_curve(curve: PassAtNCurve, path: str | Path) -> None:
    record = {"n": list(curve.n_values), "accuracy": list(curve.accuracy)}
    store.atomic_write_text(path, store.canonical_json(record) + "\n")


def load_curve(path: str | Path) -> PassAtNCurve:
    with open(path, "r", encoding="utf-8") as fh:
        try:
            record = json.load(fh)
        except json.JSONDecodeError as exc:
            raise AnalyticsError(f"invalid curve JSON in {path}: {exc.msg}") from exc
    if not isinstance(record, dict) or set(record) != {"n", "accuracy"}:
        raise AnalyticsError("curve JSON must hold exactly {n, accuracy}")
    return PassAtNCurve(
        n_values=tuple(int(n) for n in record["n"]),
        accuracy=tuple(float(v) for v in record["accuracy"]),
    )


# -- best-of-N evaluation ----------------------------------------------------

def load_tasks(path: str | Path) -> list[EvalTask]:
    tasks = []
    seen = set()
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            try:
                record = json.loads(raw)
            except json.JSONDecodeError as exc:
                raise store.SchemaError(f"invalid JSON: {exc.msg}", line=lineno) from exc
            if not isinstance(record, dict) or set(record) != set(_TASK_FIELDS):
                raise store.SchemaError("malformed task record", line=lineno)
            task = EvalTask(
                id=str(record["id"]),
                prompt=str(record["prompt"]),
                expected_answer=str(record["expected_answer"]),
                match=str(record["match"]),
            )
            if task.id == "" or task.prompt == "" or task.expected_answer == "":
                raise store.SchemaError("empty task field", line=lineno)
            if task.id in seen:
                raise store.DuplicateIdError(task.id, lineno)
            seen.add(task.id)
            if task.match not in MATCH_MODES:
                raise store.SchemaError(
                    f"match must be one of {MATCH_MODES}", line=lineno, field="match"
                )
            if task.match == "numeric" and extract_number(task.expected_answer) is None:
                raise store.SchemaError(
                    "numeric task has non-numeric expected_answer",
                    line=lineno,
                    field="expected_answer",
                )
            tasks.append(task)
    if not tasks:
        raise AnalyticsError(f"no tasks in {path}")
    return tasks


def extract_answer(text: str) -> str:
    """Post-block text when the completion carries a tagged block, else all of it."""
    try:
        tree = grammar.parse_rationale(text)
    except grammar.RationaleError:
        return text
    return tree.post_thoughts


def _normalize(text: str) -> str:
    return " ".join(text.split())


def extract_number(text: str) -> float | None:
    """Final boxed value if present, else the last numeric token."""
    boxed = _BOXED.findall(text)
    source = boxed[-1] if boxed else text
    numbers = _NUMBER.findall(source.replace(",", ""))
    if not numbers:
        return None
    try:
        return float(numbers[-1])
    except ValueError:
        return None


def answer_matches(task: EvalTask, completion_text: str) -> bool:
    extracted = extract_answer(completion_text)
    if task.match == "exact":
        return _normalize(extracted) == _normalize(task.expected_answer)
    got = extract_number(extracted)
    want = extract_number(task.expected_answer)
    return got is not None and math.isclose(got, want, rel_tol=1e-9, abs_tol=1e-12)


def curve_from_matches(
    per_task_matches: Sequence[Sequence[bool]], n_values: Sequence[int]
) -> PassAtNCurve:
    """Accuracy(N) = percent of tasks with any match in the first N samples."""
    if not per_task_matches:
        raise AnalyticsError("no task results to aggregate")
    total = len(per_task_matches)
    accuracy = tuple(
        100.0 * sum(1 for matches in per_task_matches if any(matches[:n])) / total
        for n in n_values
    )
    return PassAtNCurve(n_values=tuple(n_values), accuracy=accuracy)


def pass_at_n(
    task_file: str | Path,
    handle: gateway.BackendHandle,
    n_values: Sequence[int],
    config: gateway.GenerationRequest,
) -> PassAtNCurve:
    """Draw max(n) samples once per task and score every N on the prefix."""
    if not n_values or any(n < 1 for n in n_values):
        raise AnalyticsError("n values must be a nonempty list of integers >= 1")
    if any(b <= a for a, b in zip(n_values, n_values[1:])):
        raise AnalyticsError("n values must be strictly increasing")
    tasks = load_tasks(task_file)
    max_n = max(n_values)

    def sample_task(task: EvalTask) -> list[bool]:
        request = replace(config, user_prompt=task.prompt, n_samples=max_n)
        completions = gateway.generate(handle, request)
        return [answer_matches(task, c.text) for c in completions]

    with ThreadPoolExecutor(max_workers=handle.config.concurrency_limit) as pool:
        per_task = list(pool.map(sample_task, tasks))
    return curve_from_matches(per_task, n_values)


# -- skill distribution reports ----------------------------------------------

def _document_texts(path: str | Path) -> list[str]:
    """Rationale texts from a dataset file or a candidate file."""
    with open(path, "r", encoding="utf-8") as fh:
        first = fh.readline()
    if first.strip() == "":
        return []
    record = json.loads(first)
    if not isinstance(record, dict):
        raise store.SchemaError("record is not an object", line=1)
    if "rationale" in record:
        return [sample.rationale for sample in store.load_dataset(path).samples]
    if "raw_text" in record:
        return [candidate.raw_text for candidate in expansion.load_candidates(path)]
    raise store.SchemaError("records carry neither rationale nor raw_text", line=1)


def skill_report(path: str | Path) -> SkillReport:
    texts = _document_texts(path)
    trees = []
    unparsed = 0
    for text in texts:
        try:
            trees.append(grammar.parse_rationale(text))
        except grammar.RationaleError:
            unparsed += 1
    counts = grammar.skill_histogram(trees)
    total = sum(counts.values())
    skills = {
        name: {
            "count": counts[name],
            "fraction": counts[name] / total if total else 0.0,
        }
        for name in grammar.SKILLS
    }
    return SkillReport(
        documents=len(texts),
        parsed_documents=len(trees),
        unparsed_documents=unparsed,
        total_tags=total,
        skills=skills,
    )


def report_json(report: SkillReport) -> str:
    record = {
        "documents": report.documents,
        "parsed_documents": report.parsed_documents,
        "unparsed_documents": report.unparsed_documents,
        "total_tags": report.total_tags,
        "skills": report.skills,
    }
    return json.dumps(record, ensure_ascii=False, indent=2) + "\n"


def write_report(report: SkillReport, path: str | Path) -> None:
    store.atomic_write_text(path, report_json(report))


def render_skill_table(report: SkillReport) -> str:
    width = max(len(name) for name in grammar.SKILLS)
    lines = [f"{'skill':<{width}}  {'count':>6}  fraction"]
    for name in grammar.SKILLS:
        entry = report.skills[name]
        lines.append(f"{name:<{width}}  {entry['count']:>6}  {entry['fraction']:8.4f}")
    lines.append(f"{'total':<{width}}  {report.total_tags:>6}")
    lines.append(
        f"documents: {report.documents} "
        f"(parsed {report.parsed_documents}, unparsed {report.unparsed_documents})"
    )
    return "\n".join(lines) + "\n"
