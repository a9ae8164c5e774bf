"""Command-line client, exercised against the in-process service."""

import math

import pytest
from click.testing import CliRunner

import srlm
from srlm import analytics, catalyst, orchestrator, selection, store
from srlm.cli import main
from conftest import (
    BASE_MODEL,
    FixtureBuilder,
    make_dataset,
    setup_run,
    valid_doc,
    write_run_toml,
)


@pytest.fixture()
def runner():
    return CliRunner(env={"SRLM_SERVER": ""})


@pytest.fixture()
def finished_run(tmp_path):
    config, dataset0, catalyst_set = setup_run(tmp_path)
    orchestrator.run(config)
    return config, dataset0, catalyst_set


class TestBasics:
    def test_version(self, runner):
        result = runner.invoke(main, ["--version"])
        assert result.exit_code == 0
        assert srlm.__version__ in result.output

    def test_help_lists_commands(self, runner):
        result = runner.invoke(main, ["--help"])
        assert result.exit_code == 0
        for name in ("catalyst", "expand", "select", "iterate", "verify", "fit"):
            assert name in result.output


class TestFit:
    def test_formula_line(self, runner, tmp_path):
        n = (1, 2, 4, 8)
        accuracy = tuple(1.5 * math.log(x) + 2.25 for x in n)
        path = tmp_path / "curve.json"
        analytics.write_curve(analytics.PassAtNCurve(n_values=n, accuracy=accuracy), path)
        result = runner.invoke(main, ["fit", "--curve", str(path)])
        assert result.exit_code == 0
        assert result.output == "y = 1.5000 * ln(x) + 2.2500\n"

    def test_missing_curve_file(self, runner, tmp_path):
        result = runner.invoke(main, ["fit", "--curve", str(tmp_path / "nope.json")])
        assert result.exit_code == 1
        assert result.stderr.startswith("error: FileNotFoundError:")


class TestIterate:
    def test_full_loop_then_resume(self, runner, tmp_path):
        config, *_ = setup_run(tmp_path)
        config_path = write_run_toml(tmp_path, config)

        result = runner.invoke(main, ["iterate", "--config", str(config_path)])
        assert result.exit_code == 0, result.output
        lines = result.output.splitlines()
        assert lines[0].startswith("iteration 0: dataset ")
        assert lines[0].endswith(f"model {BASE_MODEL}")
        assert lines[2].startswith("iteration 2: dataset ")
        assert lines[3] == f"workspace {config.workspace}"

        repeat = runner.invoke(main, ["iterate", "--config", str(config_path)])
        assert repeat.exit_code == 1
        assert "error: ConfigError:" in repeat.stderr

        resumed = runner.invoke(
            main, ["iterate", "--config", str(config_path), "--resume"]
        )
        assert resumed.exit_code == 0
        assert resumed.output == result.output


class TestVerify:
    def test_clean_workspace(self, runner, finished_run):
        config, *_ = finished_run
        result = runner.invoke(main, ["verify", "--workspace", config.workspace])
        assert result.exit_code == 0
        assert result.output == "workspace OK (2 iterations)\n"

    def test_broken_workspace_exits_nonzero(self, runner, finished_run):
        config, *_ = finished_run
        ws = orchestrator._ws(config)
        (orchestrator.dataset_path(ws, 2)).unlink()
        result = runner.invoke(main, ["verify", "--workspace", config.workspace])
        assert result.exit_code == 1
        assert "problem:" in result.stderr


class TestCatalystCommand:
    def test_acquire(self, runner, tmp_path):
        dataset = make_dataset(3)
        source = tmp_path / "pool.jsonl"
        store.write_dataset(dataset, source)
        builder = FixtureBuilder()
        for sample in dataset.samples:
            request = catalyst.enrichment_request(sample, selection_seed=3, attempt=0)
            builder.generation(BASE_MODEL, request, [valid_doc(f"rich {sample.id}")])
        fixture = builder.write(tmp_path / "fixture.jsonl")

        out = tmp_path / "catalyst.jsonl"
        result = runner.invoke(main, [
            "catalyst", "--in", str(source), "--out", str(out),
            "--count", "2", "--seed", "3",
            "--model-ref", BASE_MODEL, "--fixture", str(fixture),
        ])
        assert result.exit_code == 0, result.output
        written = store.load_catalyst(out)
        assert result.output == (
            f"wrote 2 examples to {out}\ndigest {written.digest}\n"
        )


class TestExpandSelect:
    def test_expand_then_select(self, runner, finished_run, tmp_path):
        config, dataset0, _ = finished_run
        ws = orchestrator._ws(config)
        manifest = orchestrator.manifest_path(ws, 0)

        candidates_out = tmp_path / "cands.jsonl"
        result = runner.invoke(main, [
            "expand", "--manifest", str(manifest), "--out", str(candidates_out),
        ])
        assert result.exit_code == 0, result.output
        assert result.output == (
            f"wrote 9 candidates to {candidates_out} (9 valid, 0 invalid)\n"
        )

        next_out = tmp_path / "next.jsonl"
        decisions_out = tmp_path / "decisions.jsonl"
        result = runner.invoke(main, [
            "select", "--strategy", "length", "--manifest", str(manifest),
            "--candidates", str(candidates_out), "--out", str(next_out),
            "--decisions", str(decisions_out),
        ])
        assert result.exit_code == 0, result.output
        produced = store.load_dataset(next_out)
        assert result.output == (
            f"selected 3, retained 0; dataset digest {produced.digest}\n"
        )
        assert len(selection.load_decisions(decisions_out)) == 3

    def test_bad_strategy_rejected_client_side(self, runner, finished_run, tmp_path):
        config, *_ = finished_run
        ws = orchestrator._ws(config)
        result = runner.invoke(main, [
            "select", "--strategy", "coin-flip",
            "--manifest", str(orchestrator.manifest_path(ws, 0)),
            "--candidates", str(tmp_path / "x.jsonl"),
            "--out", str(tmp_path / "y.jsonl"),
        ])
        assert result.exit_code == 2
        assert "coin-flip" in result.stderr


class TestReportsAndEval:
    def test_skill_table(self, runner, tmp_path):
        dataset = make_dataset(2, iteration=1, rationale=valid_doc("steps"))
        path = tmp_path / "d.jsonl"
        store.write_dataset(dataset, path)
        result = runner.invoke(main, ["report", "skills", "--in", str(path)])
        assert result.exit_code == 0
        assert "decomposition" in result.output
        assert "documents" in result.output

    def test_pass_at_n(self, runner, tmp_path):
        tasks = [
            {"id": "t1", "prompt": "2+2?", "expected_answer": "4", "match": "numeric"},
            {"id": "t2", "prompt": "3+3?", "expected_answer": "6", "match": "numeric"},
        ]
        tasks_path = tmp_path / "tasks.jsonl"
        tasks_path.write_text(
            "".join(store.canonical_json(t) + "\n" for t in tasks), encoding="utf-8"
        )
        import dataclasses

        from srlm import gateway

        builder = FixtureBuilder()
        template = gateway.GenerationRequest(
            system_prompt="", user_prompt="", temperature=0.2, top_p=0.9, max_tokens=8192
        )
        for task, texts in [
            (tasks[0], ["wrong", "\\boxed{4}"]),
            (tasks[1], ["6", "also 6"]),
        ]:
            request = dataclasses.replace(template, user_prompt=task["prompt"], n_samples=2)
            builder.generation(BASE_MODEL, request, texts)
        fixture = builder.write(tmp_path / "fixture.jsonl")

        out = tmp_path / "curve.json"
        result = runner.invoke(main, [
            "eval", "pass-at-n", "--tasks", str(tasks_path), "--n", "1,2",
            "--out", str(out),
            "--model-ref", BASE_MODEL, "--fixture", str(fixture),
        ])
        assert result.exit_code == 0, result.output
        assert result.output == (
            f"pass@1: 50.00\npass@2: 100.00\nwrote curve to {out}\n"
        )
        curve = analytics.load_curve(out)
        assert curve.accuracy == (50.0, 100.0)

    def test_malformed_n_list(self, runner, tmp_path):
        result = runner.invoke(main, [
            "eval", "pass-at-n", "--tasks", str(tmp_path / "t.jsonl"), "--n", "1,a",
            "--model-ref", "m",
        ])
        assert result.exit_code == 1
        assert "comma-separated integer list" in result.stderr
