"""Command-line entry point.

Exit codes: 0 on success, 2 on validation failures (bad config, bad input
data, failed pair predicates), 3 on upstream-service failures (endpoint
unreachable, protocol violations, trainer hook errors).
"""

from __future__ import annotations

import functools
import json
import sys
from pathlib import Path

import click

from . import curator, pipeline
from .config import Config, load_config
from .errors import UpstreamError, ValidationError
from .gateway import MockScenario, mock_serve

VALIDATION_EXIT = 2
UPSTREAM_EXIT = 3


def _guard(fn):
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except ValidationError as exc:
            click.echo(f"validation error: {exc}", err=True)
            sys.exit(VALIDATION_EXIT)
        except UpstreamError as exc:
            click.echo(f"upstream error: {exc}", err=True)
            sys.exit(UPSTREAM_EXIT)
    return wrapper


@click.group(invoke_without_command=True)
@click.option("--config", "config_path", type=click.Path(), default=None,
              help="Path to an INI config file.")
@click.option("--seed", type=int, default=None)
@click.option("--run-dir", type=click.Path(), default=None)
@click.option("--endpoint", type=str, default=None)
@click.option("--workers", type=int, default=None)
@click.option("--print-effective-config", is_flag=True,
              help="Print the fully resolved config as JSON and exit.")
@click.pass_context
@_guard
def main(ctx, config_path, seed, run_dir, endpoint, workers,
         print_effective_config):
    overrides = {}
    if seed is not None:
        overrides[("run", "seed")] = str(seed)
    if run_dir is not None:
        overrides[("run", "run_dir")] = run_dir
    if endpoint is not None:
        overrides[("run", "endpoint")] = endpoint
    if workers is not None:
        overrides[("run", "workers")] = str(workers)
    cfg = load_config(config_path, overrides=overrides)
    ctx.obj = cfg
    if print_effective_config:
        click.echo(json.dumps(cfg.effective(), sort_keys=True, indent=1))
        ctx.exit(0)
    if ctx.invoked_subcommand is None:
        raise click.UsageError("Missing command.", ctx=ctx)


def _run_dir(cfg: Config) -> Path:
    return Path(cfg.get("run", "run_dir"))


@main.command("infer-baseline")
@click.option("--sft-corpus", type=click.Path(), default=None,
              help="Override data.sft_corpus.")
@click.pass_obj
@_guard
def infer_baseline(cfg: Config, sft_corpus):
    if sft_corpus:
        cfg.set("data", "sft_corpus", sft_corpus)
    out = pipeline.cmd_infer_baseline(cfg, _run_dir(cfg))
    click.echo(str(out))


@main.command("sample")
@click.option("--strategy", type=click.Choice([curator.VANILLA, curator.ENTROPY]),
              required=True)
@click.option("--loop", "loop_index", type=int, default=1)
@click.pass_obj
@_guard
def sample(cfg: Config, strategy, loop_index):
    out = pipeline.cmd_sample(cfg, _run_dir(cfg), strategy, loop_index)
    click.echo(str(out))


@main.command("curate")
@click.option("--criteria", type=click.Choice([curator.CRI1, curator.CRI2]),
              required=True)
@click.option("--loop", "loop_index", type=int, default=1)
@click.pass_obj
@_guard
def curate(cfg: Config, criteria, loop_index):
    out = pipeline.cmd_curate(cfg, _run_dir(cfg), criteria, loop_index)
    click.echo(str(out))


@main.command("validate-pairs")
@click.argument("pairs_path", type=click.Path())
@_guard
def validate_pairs(pairs_path):
    violations = pipeline.cmd_validate_pairs(Path(pairs_path))
    if violations:
        for line in violations:
            click.echo(line, err=True)
        sys.exit(VALIDATION_EXIT)
    click.echo("ok")


@main.command("evaluate")
@click.option("--method", "methods", multiple=True,
              help="name=endpoint_url, repeatable; defaults to run.endpoint.")
@click.option("--eval-set", type=click.Path(), default=None)
@click.option("--tag", default="eval")
@click.pass_obj
@_guard
def evaluate(cfg: Config, methods, eval_set, tag):
    endpoints = {}
    for spec_str in methods:
        if "=" not in spec_str:
            raise ValidationError(f"--method expects name=url, got {spec_str!r}")
        name, url = spec_str.split("=", 1)
        endpoints[name] = url
    if not endpoints:
        endpoints = {"model": cfg.get("run", "endpoint")}
    csv_path, scores = pipeline.cmd_evaluate(cfg, _run_dir(cfg), endpoints,
                                             eval_set=eval_set, tag=tag)
    for name, score in sorted(scores.items()):
        click.echo(f"{name}: mean_score={score:.4f}")
    click.echo(str(csv_path))


@main.command("report")
@click.pass_obj
@_guard
def report(cfg: Config):
    """Print every evaluation report found under the run directory."""
    run_dir = _run_dir(cfg)
    found = sorted(run_dir.glob("report_*.txt"))
    if not found:
        raise ValidationError(f"no reports under {run_dir}")
    for path in found:
        click.echo(path.read_text().rstrip())


@main.command("loop")
@click.pass_obj
@_guard
def loop(cfg: Config):
    manifest = pipeline.run_self_evolved_loop(cfg)
    if manifest is not None:
        click.echo(json.dumps(manifest.to_dict(), sort_keys=True))


@main.command("mock-serve")
@click.argument("scenario_path", type=click.Path())
@click.option("--port", type=int, default=0)
@_guard
def mock_serve_cmd(scenario_path, port):
    scenario = MockScenario.load(scenario_path)
    with mock_serve(scenario, port=port) as handle:
        click.echo(handle.url)
        try:
            handle.thread.join()
        except KeyboardInterrupt:
            pass


if __name__ == "__main__":
    main()
