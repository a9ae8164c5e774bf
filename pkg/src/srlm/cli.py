"""Command-line client for the pipeline service.

Every command talks HTTP.  With --server (or SRLM_SERVER) requests go
to a running `srlm serve` instance; otherwise the service is mounted
in-process, so the CLI works standalone with identical behavior.
"""

from __future__ import annotations

import json
import sys

import click
import httpx

from . import __version__


def _client(server: str) -> httpx.Client:
    if server:
        return httpx.Client(base_url=server, timeout=None)
    from fastapi.testclient import TestClient

    from .service.app import app

    return TestClient(app)


def _call(ctx: click.Context, path: str, payload: dict) -> dict:
    response = ctx.obj.post(path, json=payload)
    if response.status_code >= 400:
        try:
            detail = response.json().get("detail")
        except json.JSONDecodeError:
            detail = response.text
        if isinstance(detail, dict):
            message = f"{detail.get('error', 'error')}: {detail.get('message', '')}"
        else:
            message = str(detail)
        click.echo(f"error: {message}", err=True)
        sys.exit(1)
    return response.json()


def _backend_payload(model_ref, fixture, url, token_env, concurrency) -> dict:
    return {
        "model_ref": model_ref,
        "fixture_path": fixture,
        "url": url,
        "token_env": token_env,
        "concurrency_limit": concurrency,
    }


backend_options = [
    click.option("--model-ref", required=True, help="Model reference for backend requests."),
    click.option("--fixture", default=None, type=click.Path(), help="Scripted mock fixture."),
    click.option("--url", default=None, help="Live backend base URL (default: env)."),
    click.option("--token-env", default="SRLM_BACKEND_TOKEN", show_default=True),
    click.option("--concurrency", default=8, show_default=True),
]


def _with_backend_options(command):
    for option in reversed(backend_options):
        command = option(command)
    return command


@click.group()
@click.version_option(__version__)
@click.option("--server", envvar="SRLM_SERVER", default="",
              help="Service URL; empty runs the service in-process.")
@click.pass_context
def main(ctx, server):
    """Iterative rationale-enrichment pipeline."""
    ctx.obj = _client(server)


@main.command()
@click.option("--in", "source", required=True, type=click.Path())
@click.option("--out", required=True, type=click.Path())
@click.option("--count", default=1000, show_default=True)
@click.option("--seed", required=True, type=int)
@click.option("--max-regen", default=2, show_default=True)
@_with_backend_options
@click.pass_context
def catalyst(ctx, source, out, count, seed, max_regen, model_ref, fixture, url,
             token_env, concurrency):
    """Acquire an enriched-demonstration set from a source corpus."""
    result = _call(ctx, "/catalyst/acquire", {
        "source_path": source,
        "out_path": out,
        "count": count,
        "seed": seed,
        "max_regeneration_attempts": max_regen,
        "backend": _backend_payload(model_ref, fixture, url, token_env, concurrency),
    })
    click.echo(f"wrote {result['examples']} examples to {result['out_path']}")
    click.echo(f"digest {result['digest']}")


@main.command()
@click.option("--manifest", required=True, type=click.Path())
@click.option("--out", required=True, type=click.Path())
@click.option("--model-ref", default=None, help="Override the manifest's model reference.")
@click.pass_context
def expand(ctx, manifest, out, model_ref):
    """Sample rationale candidates for a manifest's dataset."""
    result = _call(ctx, "/expansion/run", {
        "manifest_path": manifest,
        "out_path": out,
        "model_ref": model_ref,
    })
    click.echo(
        f"wrote {result['candidates']} candidates to {result['out_path']} "
        f"({result['valid']} valid, {result['invalid']} invalid)"
    )


@main.command()
@click.option("--strategy", required=True,
              type=click.Choice(["length", "off-policy", "on-policy"]))
@click.option("--manifest", required=True, type=click.Path())
@click.option("--candidates", required=True, type=click.Path())
@click.option("--out", required=True, type=click.Path())
@click.option("--decisions", default=None, type=click.Path())
@click.pass_context
def select(ctx, strategy, manifest, candidates, out, decisions):
    """Pick winning rationales and write the next dataset."""
    result = _call(ctx, "/selection/run", {
        "manifest_path": manifest,
        "candidates_path": candidates,
        "strategy": strategy,
        "out_path": out,
        "decisions_path": decisions,
    })
    click.echo(
        f"selected {result['selected']}, retained {result['retained']}; "
        f"dataset digest {result['dataset_digest']}"
    )


@main.command()
@click.option("--config", "config_path", required=True, type=click.Path())
@click.option("--resume", is_flag=True, default=False)
@click.pass_context
def iterate(ctx, config_path, resume):
    """Run the full train-expand-select loop from a config file."""
    result = _call(ctx, "/runs/iterate", {"config_path": config_path, "resume": resume})
    for manifest in result["manifests"]:
        model = manifest["trained_model_ref"] or manifest["base_model_ref"]
        click.echo(
            f"iteration {manifest['iteration']}: dataset {manifest['dataset_digest'][:12]} "
            f"model {model}"
        )
    click.echo(f"workspace {result['workspace']}")


@main.command()
@click.option("--workspace", required=True, type=click.Path())
@click.pass_context
def verify(ctx, workspace):
    """Check every digest and link in a workspace's manifest chain."""
    result = _call(ctx, "/workspace/verify", {"workspace": workspace})
    if result["ok"]:
        click.echo(f"workspace OK ({result['iterations']} iterations)")
        return
    for problem in result["problems"]:
        click.echo(f"problem: {problem}", err=True)
    sys.exit(1)


@main.group()
def report():
    """Analysis reports."""


@report.command()
@click.option("--in", "input_path", required=True, type=click.Path())
@click.option("--out", default=None, type=click.Path())
@click.pass_context
def skills(ctx, input_path, out):
    """Skill-tag distribution of a dataset or candidate file."""
    result = _call(ctx, "/reports/skills", {"input_path": input_path, "out_path": out})
    click.echo(result["table"], nl=False)


@main.group(name="eval")
def eval_group():
    """Evaluations."""


@eval_group.command(name="pass-at-n")
@click.option("--tasks", required=True, type=click.Path())
@click.option("--n", "n_values", default="1,2,4,8,16,32,64", show_default=True)
@click.option("--out", default=None, type=click.Path())
@_with_backend_options
@click.pass_context
def pass_at_n(ctx, tasks, n_values, out, model_ref, fixture, url, token_env, concurrency):
    """Best-of-N accuracy curve over an exact-match task file."""
    try:
        parsed_n = [int(part) for part in n_values.split(",") if part.strip()]
    except ValueError:
        click.echo("error: --n must be a comma-separated integer list", err=True)
        sys.exit(1)
    result = _call(ctx, "/eval/pass-at-n", {
        "tasks_path": tasks,
        "n_values": parsed_n,
        "out_path": out,
        "backend": _backend_payload(model_ref, fixture, url, token_env, concurrency),
    })
    for n, accuracy in zip(result["n"], result["accuracy"]):
        click.echo(f"pass@{n}: {accuracy:.2f}")
    if out:
        click.echo(f"wrote curve to {out}")


@main.command()
@click.option("--curve", required=True, type=click.Path())
@click.pass_context
def fit(ctx, curve):
    """Least-squares log fit of a stored accuracy curve."""
    result = _call(ctx, "/analytics/fit", {"curve_path": curve})
    click.echo(result["formula"])


@main.command()
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--port", default=8321, show_default=True)
def serve(host, port):
    """Run the pipeline service."""
    import uvicorn

    from .service.app import app

    uvicorn.run(app, host=host, port=port)


if __name__ == "__main__":
    main()
