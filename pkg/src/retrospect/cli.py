"""Operator entry points.

Configuration comes from a JSON file plus flag overrides; credentials
only ever come from the environment. Every command is deterministic
under the replay gateway. Errors map to distinct exit codes::

    0  success
    1  unexpected error
    2  usage error (bad arguments/arity)
    3  malformed content (plan/report/selection grammar)
    4  missing input (task, file, fixture entry)
    5  transport failure or budget exhaustion
    6  store conflict or integrity failure
"""

from __future__ import annotations

import json
import sys
from dataclasses import dataclass, fields, replace
from pathlib import Path
from typing import NoReturn

import click

from .critique import (
    DEFAULT_CRITIQUE_MODEL,
    EmptyInput,
    MalformedCritique,
    diff_plans,
    evolve,
    render_critique_report,
)
from .errors import RetrospectError
from .gateway import (
    BudgetExceeded,
    Gateway,
    LiveGateway,
    NoFixtureEntry,
    RecordingGateway,
    ReplayGateway,
    TransportError,
)
from .harness import (
    InvalidWorkers,
    ManifestError,
    RunOutcome,
    StdConvention,
    aggregate,
    aggregate_to_dict,
    evolution_loop,
    load_scenario,
    load_trajectory,
    report_to_json,
    run_stats,
)
from .model import Provenance
from .plans import MalformedPlan, parse_plan
from .retrace import DEFAULT_RETRACE_MODEL, MalformedRetrace, render_action_list, retrace_trajectory
from .selection import (
    DEFAULT_SELECTION_MODEL,
    EmptyCandidates,
    MalformedSelection,
    SelectionCandidate,
    WrongArity,
    select_completion,
)
from .store import KnowledgeStore, NotFound, ParentMissing, StoreIntegrityError, VersionConflict

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_USAGE = 2
EXIT_MALFORMED = 3
EXIT_NOT_FOUND = 4
EXIT_TRANSPORT = 5
EXIT_STORE = 6

_EXIT_CODES: list[tuple[tuple[type[BaseException], ...], int]] = [
    ((MalformedPlan, MalformedRetrace, MalformedCritique, MalformedSelection, EmptyInput, WrongArity, EmptyCandidates, InvalidWorkers), EXIT_MALFORMED),
    ((NotFound, NoFixtureEntry, ManifestError, FileNotFoundError), EXIT_NOT_FOUND),
    ((TransportError, BudgetExceeded), EXIT_TRANSPORT),
    ((VersionConflict, ParentMissing, StoreIntegrityError), EXIT_STORE),
    ((RetrospectError,), EXIT_ERROR),
]


@dataclass
class Config:
    """Run configuration; see README for the file schema."""

    gateway_mode: str = "replay"
    fixture: str = "fixtures.jsonl"
    endpoint: str | None = None
    retrace_model: str = DEFAULT_RETRACE_MODEL
    critique_model: str = DEFAULT_CRITIQUE_MODEL
    selection_model: str = DEFAULT_SELECTION_MODEL
    temperature: float = 0.0
    max_output: int = 4096
    store_root: str = "knowledge"
    workers: int = 1
    repeats: int = 3
    selection_mode: str = "random"
    std_convention: str = "sample"
    seed: int = 0
    max_steps: int = 15
    scenario: str | None = None

    @classmethod
    def load(cls, path: str | Path | None, overrides: dict) -> "Config":
        config = cls()
        if path is not None:
            data = json.loads(Path(path).read_text(encoding="utf-8"))
            known = {f.name for f in fields(cls)}
            unknown = set(data) - known
            if unknown:
                raise click.UsageError(f"unknown config keys: {', '.join(sorted(unknown))}")
            config = replace(config, **data)
        return replace(config, **{key: value for key, value in overrides.items() if value is not None})

    @property
    def convention(self) -> StdConvention:
        return StdConvention(self.std_convention)


def build_gateway(config: Config) -> Gateway:
    if config.gateway_mode == "replay":
        fixture = Path(config.fixture)
        if not fixture.exists():
            raise NotFound(f"replay fixture not found: {fixture}")
        return ReplayGateway(fixture)
    if config.gateway_mode in ("live", "record"):
        if config.endpoint:
            live = LiveGateway(config.endpoint)
        else:
            live = LiveGateway.from_env()
        if config.gateway_mode == "record":
            return RecordingGateway(live, config.fixture)
        return live
    raise click.UsageError(f"unknown gateway mode {config.gateway_mode!r}")


def _fail(exc: BaseException) -> NoReturn:
    for types, code in _EXIT_CODES:
        if isinstance(exc, types):
            click.echo(f"error: {exc}", err=True)
            sys.exit(code)
    raise exc


@click.group()
@click.option("--config", "-c", "config_path", type=click.Path(exists=True, dir_okay=False), default=None)
@click.option("--store-root", default=None, help="Override the knowledge store root.")
@click.option("--gateway-mode", type=click.Choice(["replay", "live", "record"]), default=None)
@click.option("--fixture", default=None, help="Fixture journal path for replay/record.")
@click.option("--workers", type=int, default=None)
@click.option("--repeats", type=int, default=None)
@click.option("--selection-mode", type=click.Choice(["random", "completion"]), default=None)
@click.option("--std-convention", type=click.Choice(["sample", "population"]), default=None)
@click.option("--seed", type=int, default=None)
@click.pass_context
def cli(ctx, config_path, **overrides) -> None:
    """Knowledge evolution pipeline for computer-use agents."""
    ctx.obj = Config.load(config_path, overrides)


@cli.command("retrace")
@click.argument("manifest", type=click.Path(dir_okay=False))
@click.option("--output", "-o", type=click.Path(dir_okay=False), default=None, help="Action-list file (default: stdout).")
@click.option("--dump-raw", type=click.Path(file_okay=False), default=None, help="Directory for raw per-step model outputs.")
@click.pass_obj
def cmd_retrace(config: Config, manifest: str, output: str | None, dump_raw: str | None) -> None:
    """Reconstruct the objective action list for a recorded trajectory."""
    try:
        trajectory = load_trajectory(manifest)
        gateway = build_gateway(config)
        on_raw_output = None
        if dump_raw is not None:
            dump_dir = Path(dump_raw)
            dump_dir.mkdir(parents=True, exist_ok=True)

            def on_raw_output(step_index: int, text: str) -> None:
                (dump_dir / f"step_{step_index:03d}.txt").write_text(text, encoding="utf-8")

        sequence = retrace_trajectory(
            trajectory,
            gateway,
            model_tag=config.retrace_model,
            temperature=config.temperature,
            on_raw_output=on_raw_output,
        )
        text = render_action_list(sequence)
        if output is None:
            click.echo(text)
        else:
            Path(output).write_text(text + ("\n" if text else ""), encoding="utf-8")
            click.echo(f"wrote {output}")
    except Exception as exc:  # noqa: BLE001
        _fail(exc)


@cli.command("evolve")
@click.argument("task_id")
@click.argument("manifest", type=click.Path(dir_okay=False))
@click.option("--output", "-o", type=click.Path(dir_okay=False), default=None, help="Critique report file.")
@click.pass_obj
def cmd_evolve(config: Config, task_id: str, manifest: str, output: str | None) -> None:
    """Critique one trajectory and store the evolved knowledge version."""
    try:
        store = KnowledgeStore(config.store_root)
        record = store.get_latest(task_id)
        trajectory = load_trajectory(manifest)
        if trajectory.task_id != task_id:
            raise click.UsageError(f"manifest is for task {trajectory.task_id!r}, not {task_id!r}")
        gateway = build_gateway(config)
        sequence = retrace_trajectory(
            trajectory, gateway, model_tag=config.retrace_model, temperature=config.temperature
        )
        evolved, report = evolve(
            record,
            sequence,
            gateway,
            model_tag=config.critique_model,
            temperature=config.temperature,
            producer_model=trajectory.producer_model or None,
        )
        store.put(evolved)
        report_path = Path(output) if output else Path(f"{task_id}.critique.txt")
        report_path.write_text(render_critique_report(report), encoding="utf-8")
        click.echo(f"evolved {task_id}: v{record.version} -> v{evolved.version}")
        for entry in diff_plans(record.plan, evolved.plan):
            click.echo(f"  {entry.kind.value}: {entry.subtask}")
        click.echo(f"wrote {report_path}")
    except click.ClickException:
        raise
    except Exception as exc:  # noqa: BLE001
        _fail(exc)


@cli.command("run")
@click.option("--output", "-o", type=click.Path(dir_okay=False), default="evolution_report.json")
@click.pass_obj
def cmd_run(config: Config, output: str) -> None:
    """Run the full evolution loop on the configured scenario."""
    try:
        if not config.scenario:
            raise NotFound("config has no scenario file; the simulated executor needs one")
        scenario = load_scenario(config.scenario)
        store = KnowledgeStore(config.store_root)
        for task in scenario.tasks:
            if task.task_id in store:
                continue
            seed_record = scenario.knowledge.get(task.task_id)
            if seed_record is None:
                raise NotFound(f"no initial knowledge for task {task.task_id!r} (store or scenario)")
            store.put(seed_record)
        gateway = build_gateway(config)
        report = evolution_loop(
            scenario.tasks,
            scenario.executor,
            gateway,
            store,
            repeats=config.repeats,
            selection_mode=config.selection_mode,
            workers=config.workers,
            seed=config.seed,
            convention=config.convention,
            retrace_model=config.retrace_model,
            critique_model=config.critique_model,
            selection_model=config.selection_model,
            temperature=config.temperature,
        )
        Path(output).write_text(report_to_json(report), encoding="utf-8")
        click.echo(
            f"phase 1 avg {report.phase1.overall.stats.avg:g} -> phase 2 avg {report.phase2.overall.stats.avg:g}"
        )
        click.echo(str(report.ssr))
        click.echo(f"wrote {output}")
    except Exception as exc:  # noqa: BLE001
        _fail(exc)


@cli.command("stats")
@click.argument("input_file", type=click.Path(exists=True, dir_okay=False))
@click.pass_obj
def cmd_stats(config: Config, input_file: str) -> None:
    """Success-rate statistics from a rates file or an outcomes file."""
    try:
        data = json.loads(Path(input_file).read_text(encoding="utf-8"))
        if "rates" in data:
            stats = run_stats(data["rates"], config.convention)
            click.echo(f"min {stats.min:g}")
            click.echo(f"max {stats.max:g}")
            click.echo(f"std {stats.std:.4g} ({stats.convention.value})")
            click.echo(f"avg {stats.avg:g}")
            return
        if "outcomes" in data:
            outcomes = [
                RunOutcome(
                    task_id=entry["task_id"],
                    repeat_index=entry["repeat_index"],
                    success=entry["success"],
                    trajectory=None,
                )
                for entry in data["outcomes"]
            ]
            result = aggregate(outcomes, data["groups"], convention=config.convention)
            click.echo(json.dumps(aggregate_to_dict(result), indent=2, sort_keys=True))
            return
        raise MalformedPlan("stats input must contain 'rates' or 'outcomes'")
    except Exception as exc:  # noqa: BLE001
        _fail(exc)


@cli.command("select")
@click.argument("action_lists", nargs=3, type=click.Path(exists=True, dir_okay=False))
@click.option("--instruction", "-i", required=True)
@click.option("--plan", "-p", "plan_file", required=True, type=click.Path(exists=True, dir_okay=False))
@click.pass_obj
def cmd_select(config: Config, action_lists, instruction: str, plan_file: str) -> None:
    """Pick the best of three retraced runs (completion-based selection)."""
    try:
        plan = parse_plan(Path(plan_file).read_text(encoding="utf-8"))
        candidates = [
            SelectionCandidate(index=i, action_list=Path(path).read_text(encoding="utf-8"), plan=plan)
            for i, path in enumerate(action_lists, start=1)
        ]
        gateway = build_gateway(config)
        best = select_completion(
            instruction,
            candidates,
            gateway,
            model_tag=config.selection_model,
            temperature=config.temperature,
            fallback_seed=config.seed,
        )
        click.echo(str(best))
    except Exception as exc:  # noqa: BLE001
        _fail(exc)


@cli.group("store")
def store_group() -> None:
    """Inspect and manage the knowledge store."""


@store_group.command("history")
@click.argument("task_id")
@click.pass_obj
def cmd_store_history(config: Config, task_id: str) -> None:
    """List the version chain for a task."""
    try:
        store = KnowledgeStore(config.store_root)
        for record in store.history(task_id):
            provenance = "web-search" if record.provenance is Provenance.WEB_SEARCH else "evolved"
            line = f"v{record.version} {provenance} producer={record.producer_model or '-'}"
            if record.parent_version is not None:
                line += f" parent=v{record.parent_version}"
            if record.critique_digest:
                line += f" critique={record.critique_digest[:12]}"
            click.echo(line)
    except Exception as exc:  # noqa: BLE001
        _fail(exc)


@store_group.command("freeze")
@click.pass_obj
def cmd_store_freeze(config: Config) -> None:
    """Freeze a snapshot of the latest records; prints the snapshot id."""
    try:
        snapshot = KnowledgeStore(config.store_root).freeze_snapshot()
        click.echo(snapshot.snapshot_id)
    except Exception as exc:  # noqa: BLE001
        _fail(exc)


@store_group.command("import")
@click.argument("other_root", type=click.Path(exists=True, file_okay=False))
@click.option("--producer", default=None, help="Only import records with this producer tag.")
@click.pass_obj
def cmd_store_import(config: Config, other_root: str, producer: str | None) -> None:
    """Import latest records from another store (knowledge transfer)."""
    try:
        store = KnowledgeStore(config.store_root)
        count = store.import_store(KnowledgeStore(other_root), producer_model=producer)
        click.echo(f"imported {count} record(s)")
    except Exception as exc:  # noqa: BLE001
        _fail(exc)


def main() -> None:
    cli(prog_name="retrospect")


if __name__ == "__main__":
    main()
