"""
RuleForge command line.

Every subcommand runs one pipeline stage against the run directory named by
the configuration; ``pipeline`` runs all of them in order. Machine-readable
output (errors, ``validate`` results) goes to stdout, progress to stderr.
"""
import json
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

import click
from rich.console import Console
from rich.table import Table

# Load environment variables from .env file
from dotenv import load_dotenv
load_dotenv()

from loguru import logger

from ruleforge import __version__
from ruleforge.services.errors import RuleCompileFailed, RuleForgeError
from ruleforge.services.models import Rule, RuleFormat
from ruleforge.services.pipeline_service import STAGE_TITLES, STAGES, Pipeline
from ruleforge.services.settings import RunConfig, load_config
from ruleforge.services.validator_service import RuleValidator

console = Console(stderr=True)

FORMAT_CHOICES = {
    "yara": [RuleFormat.YARA.value],
    "semgrep": [RuleFormat.SEMGREP.value],
    "both": [RuleFormat.YARA.value, RuleFormat.SEMGREP.value],
}


def configure_logging(verbose: bool = False, quiet: bool = False) -> None:
    logger.remove()
    level = "DEBUG" if verbose else "WARNING" if quiet else "INFO"
    logger.add(sys.stderr, level=level, format="{message}")


def _absolute(path: Optional[Path]) -> Optional[str]:
    return str(Path(path).resolve()) if path is not None else None


class CliState:
    """Config file plus flag overrides; the config is loaded on first use."""

    def __init__(self, config_path: Optional[Path], overrides: Dict[str, Any]):
        self.config_path = config_path
        self.overrides = overrides
        self._config: Optional[RunConfig] = None

    def config(self) -> RunConfig:
        if self._config is None:
            self._config = load_config(self.config_path, self.overrides)
        return self._config


def build_overrides(
    output_dir: Optional[Path] = None,
    jobs: Optional[int] = None,
    seed: Optional[int] = None,
    rule_format: Optional[str] = None,
    threshold: Optional[int] = None,
    llm_backend: Optional[str] = None,
    fixtures: Optional[Path] = None,
    record_fixtures: Optional[Path] = None,
    allow_network: bool = False,
) -> Dict[str, Any]:
    """Map command-line flags onto dotted config keys; unset flags map to None."""
    overrides: Dict[str, Any] = {
        "output_dir": _absolute(output_dir),
        "jobs": jobs,
        "cluster.seed": seed,
        "baseline.seed": seed,
        "generate.formats": FORMAT_CHOICES.get(rule_format) if rule_format else None,
        "matcher.threshold": threshold,
        "llm.backend": llm_backend,
        "llm.fixtures": _absolute(fixtures),
        "corpus.allow_network": True if allow_network else None,
    }
    if record_fixtures is not None:
        overrides["llm.backend"] = "record"
        overrides["llm.fixtures"] = _absolute(record_fixtures)
    return overrides


def _summary_table(pipeline: Pipeline, stages: Sequence[str]) -> Table:
    table = Table(title="Run summary")
    table.add_column("Stage")
    table.add_column("Result")
    recorded = pipeline.manifest.data.get("stages", {})
    for stage in stages:
        entries = recorded.get(stage, {})
        parts = []
        for key, value in sorted(entries.items()):
            if isinstance(value, bool) or not isinstance(value, (int, float, list)):
                continue
            parts.append(f"{key}={len(value) if isinstance(value, list) else value}")
        table.add_row(stage, ", ".join(parts))
    return table


def run_stages(state: CliState, stages: List[str]) -> None:
    config = state.config()
    pipeline = Pipeline(config)
    console.print("=" * 60)
    console.print(f"🛡️  RuleForge v{__version__}: {', '.join(stages)}")
    console.print(f"   Run directory: {config.output_dir}")
    console.print(f"   LLM backend: {config.llm.backend}")
    console.print("=" * 60)
    for stage in stages:
        pipeline.run_stage(stage)
    console.print(_summary_table(pipeline, stages))
    console.print("=" * 60)


@click.group()
@click.version_option(version=__version__, prog_name="ruleforge")
@click.option("--config", "config_path", type=click.Path(dir_okay=False, path_type=Path),
              help="YAML run configuration")
@click.option("--output-dir", type=click.Path(file_okay=False, path_type=Path), help="Run directory")
@click.option("--jobs", type=click.IntRange(min=1), help="Worker threads per stage")
@click.option("--seed", type=int, help="Seed for clustering and the baseline forest")
@click.option("--format", "rule_format", type=click.Choice(sorted(FORMAT_CHOICES)), help="Rule format(s) to generate")
@click.option("--threshold", type=click.IntRange(min=0), help="Matched-rule threshold for a malicious verdict")
@click.option("--llm-backend", type=click.Choice(["openai", "replay", "record", "heuristic"]))
@click.option("--fixtures", type=click.Path(dir_okay=False, path_type=Path), help="Replay fixture file")
@click.option("--record-fixtures", type=click.Path(dir_okay=False, path_type=Path),
              help="Record every LLM exchange into this fixture file")
@click.option("--allow-network", is_flag=True, help="Allow registry lookups for missing metadata")
@click.option("-v", "--verbose", is_flag=True)
@click.option("-q", "--quiet", is_flag=True)
@click.pass_context
def cli(ctx: click.Context, config_path, output_dir, jobs, seed, rule_format, threshold, llm_backend,
        fixtures, record_fixtures, allow_network, verbose, quiet) -> None:
    """RuleForge - YARA and Semgrep rules for malicious packages."""
    configure_logging(verbose, quiet)
    overrides = build_overrides(output_dir, jobs, seed, rule_format, threshold, llm_backend,
                                fixtures, record_fixtures, allow_network)
    ctx.obj = CliState(config_path, overrides)


def _stage_command(stage: str) -> click.Command:
    @click.pass_obj
    def command(state: CliState) -> None:
        run_stages(state, [stage])

    command.__doc__ = f"{STAGE_TITLES[stage]}."
    return click.command(stage)(command)


for _stage in STAGES:
    if _stage != "validate":
        cli.add_command(_stage_command(_stage))


@cli.command()
@click.argument("paths", nargs=-1, type=click.Path(exists=True, dir_okay=False, path_type=Path))
@click.pass_context
def validate(ctx: click.Context, paths: Sequence[Path]) -> None:
    """Validate generated rules, or the rule files given as PATHS.

    With PATHS, one JSON line per file is printed and the exit code is 1 if
    any file fails to compile.
    """
    state: CliState = ctx.obj
    if not paths:
        run_stages(state, ["validate"])
        return

    validator = RuleValidator.from_settings(state.config().validator)
    failed = False
    for path in paths:
        rule_format = RuleFormat.SEMGREP if path.suffix.lower() in (".yaml", ".yml") else RuleFormat.YARA
        outcome = validator.validate(path.read_bytes(), rule_format)
        if isinstance(outcome, Rule):
            payload = {"file": str(path), "ok": True, "rule": outcome.name, "format": rule_format.value}
        else:
            failed = True
            payload = dict(RuleCompileFailed(path.name, outcome).to_dict(), file=str(path))
            logger.error(f"❌ {path.name}: {len(outcome)} compile error(s)")
        click.echo(json.dumps(payload, sort_keys=True))
    if failed:
        ctx.exit(1)


@cli.command()
@click.pass_obj
def pipeline(state: CliState) -> None:
    """Run every stage in order."""
    run_stages(state, list(STAGES))


def run_subcommand(argv: Sequence[str]) -> int:
    """
    Run one command line and return its exit code.

    RuleForge errors print their JSON form on stdout and exit 1; usage
    errors keep click's own message and exit code.
    """
    try:
        rv = cli.main(args=list(argv), prog_name="ruleforge", standalone_mode=False)
    except RuleForgeError as exc:
        logger.error(f"❌ {exc}")
        click.echo(json.dumps(exc.to_dict(), sort_keys=True))
        return 1
    except click.ClickException as exc:
        exc.show()
        return exc.exit_code
    except click.exceptions.Abort:
        return 1
    return rv if isinstance(rv, int) else 0


def main() -> None:
    sys.exit(run_subcommand(sys.argv[1:]))


if __name__ == "__main__":
    main()
