"""Evaluation harness: sharded parallel runs, stability statistics, and
the end-to-end knowledge evolution loop.

Tasks are the unit of parallelism. A benchmark run shards the task list
evenly over a pool of in-process workers, executes every (task, repeat)
pair against knowledge pinned to a frozen store snapshot, and merges
outcomes in (task_id, repeat_index) order so results are identical for
any worker count. Success rates are computed per repeat and summarized
as min/max/std/avg over repeats, with the std convention (sample or
population) carried in the output.

The evolution loop wires the stages together: run with v1 knowledge,
select one trajectory per task among the repeats, retrace it, critique
it, store the evolved plan, and re-run with v2 knowledge.
"""

from __future__ import annotations

import hashlib
import json
import logging
import statistics
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Mapping, Protocol, Sequence

from .critique import DEFAULT_CRITIQUE_MODEL, PlanDiffEntry, diff_plans, evolve
from .errors import RetrospectError
from .gateway import Gateway
from .model import (
    ImageBlob,
    KnowledgePlan,
    KnowledgeRecord,
    ObjectiveActionSequence,
    Observation,
    Provenance,
    RetraceOutcome,
    Step,
    Trajectory,
)
from .plans import parse_plan, render_plan
from .retrace import DEFAULT_RETRACE_MODEL, render_action_list, retrace_trajectory
from .selection import (
    DEFAULT_SELECTION_MODEL,
    SelectionCandidate,
    SsrRecord,
    SsrResult,
    compute_ssr,
    select_completion,
    select_random,
)
from .store import KnowledgeStore, Snapshot

logger = logging.getLogger(__name__)


class InvalidWorkers(RetrospectError):
    """Worker count must be at least 1."""


class ManifestError(RetrospectError):
    """A trajectory manifest is unreadable or references missing files."""


@dataclass(frozen=True)
class TaskSpec:
    task_id: str
    instruction: str
    group: str
    max_steps: int = 15

    def __post_init__(self) -> None:
        if not self.group:
            raise ValueError("task group must be non-empty")


@dataclass(frozen=True)
class RunOutcome:
    task_id: str
    repeat_index: int
    success: bool
    trajectory: Trajectory | None
    wall_time: float = field(default=0.0, compare=False)
    error: str | None = None

    def __post_init__(self) -> None:
        if self.repeat_index < 0:
            raise ValueError("repeat_index must be >= 0")


class StdConvention(Enum):
    SAMPLE = "sample"
    POPULATION = "population"


@dataclass(frozen=True)
class RunStats:
    min: float
    max: float
    std: float
    avg: float
    convention: StdConvention

    def __post_init__(self) -> None:
        if not (self.min <= self.avg <= self.max):
            raise ValueError("stats must satisfy min <= avg <= max")
        if self.std < 0:
            raise ValueError("std must be >= 0")


def run_stats(rates: Sequence[float], convention: StdConvention = StdConvention.SAMPLE) -> RunStats:
    """Min/max/std/avg over per-repeat success rates (percent)."""
    if not rates:
        return RunStats(min=0.0, max=0.0, std=0.0, avg=0.0, convention=convention)
    if len(rates) < 2:
        std = 0.0
    elif convention is StdConvention.SAMPLE:
        std = statistics.stdev(rates)
    else:
        std = statistics.pstdev(rates)
    return RunStats(min=min(rates), max=max(rates), std=std, avg=statistics.fmean(rates), convention=convention)


class Executor(Protocol):
    """Pluggable task executor: produce a trajectory and a success verdict."""

    def run(self, task: TaskSpec, plan: KnowledgePlan) -> tuple[Trajectory, bool]: ...


# --- sharding and benchmark runs -------------------------------------------


def shard(tasks: Sequence[TaskSpec], workers: int) -> list[list[TaskSpec]]:
    """Split tasks into contiguous shards whose sizes differ by at most one.

    Assignment is deterministic given input order; empty shards are omitted.
    """
    if workers < 1:
        raise InvalidWorkers(f"workers must be >= 1, got {workers}")
    base, extra = divmod(len(tasks), workers)
    shards: list[list[TaskSpec]] = []
    start = 0
    for i in range(workers):
        size = base + (1 if i < extra else 0)
        if size == 0:
            continue
        shards.append(list(tasks[start : start + size]))
        start += size
    return shards


def _run_one(
    task: TaskSpec, repeat_index: int, executor: Executor, store: KnowledgeStore, snapshot: Snapshot
) -> RunOutcome:
    started = time.perf_counter()
    try:
        record = store.read_at(snapshot, task.task_id)
        trajectory, success = executor.run(task, record.plan)
        return RunOutcome(
            task_id=task.task_id,
            repeat_index=repeat_index,
            success=success,
            trajectory=trajectory,
            wall_time=time.perf_counter() - started,
        )
    except Exception as exc:  # noqa: BLE001 - individual task faults must not abort the batch
        logger.warning("task %s repeat %d failed: %s", task.task_id, repeat_index, exc)
        return RunOutcome(
            task_id=task.task_id,
            repeat_index=repeat_index,
            success=False,
            trajectory=None,
            wall_time=time.perf_counter() - started,
            error=f"{type(exc).__name__}: {exc}",
        )


def run_benchmark(
    tasks: Sequence[TaskSpec],
    repeats: int,
    executor: Executor,
    store: KnowledgeStore,
    snapshot: Snapshot,
    *,
    workers: int = 1,
) -> list[RunOutcome]:
    """Execute every (task, repeat) pair once against the frozen snapshot.

    Outcomes are merged in (task_id, repeat_index) order regardless of
    worker interleaving; executor faults become success=False outcomes.
    """
    if workers < 1:
        raise InvalidWorkers(f"workers must be >= 1, got {workers}")
    outcomes: list[RunOutcome] = []
    for repeat_index in range(repeats):
        shards = shard(tasks, workers)
        if len(shards) <= 1:
            for shard_tasks in shards:
                for task in shard_tasks:
                    outcomes.append(_run_one(task, repeat_index, executor, store, snapshot))
            continue
        with ThreadPoolExecutor(max_workers=len(shards)) as pool:
            futures = [
                pool.submit(
                    lambda batch, r=repeat_index: [_run_one(t, r, executor, store, snapshot) for t in batch],
                    shard_tasks,
                )
                for shard_tasks in shards
            ]
            for future in futures:
                outcomes.extend(future.result())
    outcomes.sort(key=lambda outcome: (outcome.task_id, outcome.repeat_index))
    return outcomes


# --- aggregation ------------------------------------------------------------


@dataclass(frozen=True)
class GroupAggregate:
    rates_by_repeat: tuple[float, ...]
    stats: RunStats


@dataclass(frozen=True)
class AggregateResult:
    overall: GroupAggregate
    groups: Mapping[str, GroupAggregate]
    repeats: int

    def __post_init__(self) -> None:
        object.__setattr__(self, "groups", dict(self.groups))


def _rate(outcomes: Sequence[RunOutcome]) -> float:
    return 100.0 * sum(1 for outcome in outcomes if outcome.success) / len(outcomes)


def aggregate(
    outcomes: Sequence[RunOutcome],
    groups: Mapping[str, str],
    *,
    repeats: int | None = None,
    convention: StdConvention = StdConvention.SAMPLE,
) -> AggregateResult:
    """Per-repeat success rates (overall and per group) plus RunStats over repeats."""
    if repeats is None:
        repeats = max((outcome.repeat_index for outcome in outcomes), default=-1) + 1

    overall_rates: list[float] = []
    group_rates: dict[str, list[float]] = {}
    for repeat_index in range(repeats):
        batch = [outcome for outcome in outcomes if outcome.repeat_index == repeat_index]
        if not batch:
            continue
        overall_rates.append(_rate(batch))
        by_group: dict[str, list[RunOutcome]] = {}
        for outcome in batch:
            by_group.setdefault(groups[outcome.task_id], []).append(outcome)
        for group_name, group_batch in by_group.items():
            group_rates.setdefault(group_name, []).append(_rate(group_batch))

    return AggregateResult(
        overall=GroupAggregate(tuple(overall_rates), run_stats(overall_rates, convention)),
        groups={
            name: GroupAggregate(tuple(rates), run_stats(rates, convention))
            for name, rates in sorted(group_rates.items())
        },
        repeats=repeats,
    )


def _stats_dict(stats: RunStats) -> dict:
    return {
        "min": stats.min,
        "max": stats.max,
        "std": stats.std,
        "avg": stats.avg,
        "convention": stats.convention.value,
    }


def aggregate_to_dict(result: AggregateResult) -> dict:
    return {
        "repeats": result.repeats,
        "overall": {"rates_by_repeat": list(result.overall.rates_by_repeat), **_stats_dict(result.overall.stats)},
        "groups": {
            name: {"rates_by_repeat": list(group.rates_by_repeat), **_stats_dict(group.stats)}
            for name, group in sorted(result.groups.items())
        },
    }


def simulated_makespan(shards: Sequence[Sequence[TaskSpec]], durations: Mapping[str, float]) -> float:
    """Makespan under the simulated time model: slowest shard's total duration."""
    if not shards:
        return 0.0
    return max(sum(durations[task.task_id] for task in batch) for batch in shards)


# --- simulated executor ------------------------------------------------------


def synth_image(label: str) -> ImageBlob:
    """Deterministic stand-in screenshot for scripted trajectories."""
    return ImageBlob(f"synthetic-screenshot:{label}".encode("utf-8"))


class SimulatedFault(RetrospectError):
    """Scripted executor fault (stands in for a VM/task crash)."""


@dataclass(frozen=True)
class ScriptedStep:
    executed_code: str
    pre_label: str
    post_label: str


@dataclass(frozen=True)
class TaskBehavior:
    """Scripted behavior of the simulated executor for one task."""

    steps: tuple[ScriptedStep, ...]
    succeed_if_plan_contains: str | None = None
    always_succeed: bool = False
    duration: float = 1.0
    raise_error: str | None = None


class SimulatedExecutor:
    """Deterministic scripted executor standing in for a real agent + GUI.

    Success is decided by a plan-text rule, so evolved knowledge can flip
    a task from failing to passing without any real environment.
    """

    def __init__(self, behaviors: Mapping[str, TaskBehavior], producer_model: str = "sim"):
        self._behaviors = dict(behaviors)
        self.producer_model = producer_model

    def behavior(self, task_id: str) -> TaskBehavior:
        return self._behaviors[task_id]

    def durations(self) -> dict[str, float]:
        return {task_id: behavior.duration for task_id, behavior in self._behaviors.items()}

    def run(self, task: TaskSpec, plan: KnowledgePlan) -> tuple[Trajectory, bool]:
        behavior = self._behaviors[task.task_id]
        if behavior.raise_error:
            raise SimulatedFault(behavior.raise_error)
        plan_text = render_plan(plan).lower()
        success = behavior.always_succeed or (
            behavior.succeed_if_plan_contains is not None
            and behavior.succeed_if_plan_contains.lower() in plan_text
        )
        steps = tuple(
            Step(
                index=i,
                pre=Observation(step_index=i, image=synth_image(scripted.pre_label)),
                post=Observation(step_index=i + 1, image=synth_image(scripted.post_label)),
                executed_code=scripted.executed_code,
            )
            for i, scripted in enumerate(behavior.steps)
        )
        trajectory = Trajectory(
            task_id=task.task_id,
            instruction=task.instruction,
            steps=steps,
            terminal_success=success,
            producer_model=self.producer_model,
            max_steps=task.max_steps,
        )
        return trajectory, success


@dataclass(frozen=True)
class Scenario:
    """A loadable benchmark scenario: tasks, scripted behaviors, seed knowledge."""

    tasks: tuple[TaskSpec, ...]
    executor: SimulatedExecutor
    knowledge: Mapping[str, KnowledgeRecord]


def load_scenario(path: str | Path) -> Scenario:
    """Load a scenario JSON file (tasks + behaviors + initial plan documents)."""
    path = Path(path)
    data = json.loads(path.read_text(encoding="utf-8"))
    producer = data.get("producer_model", "sim")
    tasks = tuple(
        TaskSpec(
            task_id=entry["task_id"],
            instruction=entry["instruction"],
            group=entry.get("group", "default"),
            max_steps=entry.get("max_steps", 15),
        )
        for entry in data["tasks"]
    )
    behaviors = {}
    for task_id, raw in data.get("behaviors", {}).items():
        behaviors[task_id] = TaskBehavior(
            steps=tuple(
                ScriptedStep(
                    executed_code=step.get("executed_code", ""),
                    pre_label=step["pre"],
                    post_label=step["post"],
                )
                for step in raw.get("steps", [])
            ),
            succeed_if_plan_contains=raw.get("succeed_if_plan_contains"),
            always_succeed=raw.get("always_succeed", False),
            duration=raw.get("duration", 1.0),
            raise_error=raw.get("raise_error"),
        )
    knowledge = {}
    for task_spec in tasks:
        raw = data.get("knowledge", {}).get(task_spec.task_id)
        if raw is None:
            continue
        plan_text = raw["plan"] if "plan" in raw else (path.parent / raw["plan_file"]).read_text(encoding="utf-8")
        knowledge[task_spec.task_id] = KnowledgeRecord(
            task_id=task_spec.task_id,
            instruction=task_spec.instruction,
            plan=parse_plan(plan_text),
            provenance=Provenance.WEB_SEARCH,
            version=1,
            producer_model=raw.get("producer_model", "web"),
        )
    return Scenario(tasks=tasks, executor=SimulatedExecutor(behaviors, producer_model=producer), knowledge=knowledge)


# --- trajectory manifests ----------------------------------------------------


def save_trajectory(trajectory: Trajectory, directory: str | Path, *, manifest_name: str | None = None) -> Path:
    """Write a trajectory manifest plus content-addressed screenshot blobs.

    Blobs land in ``<directory>/blobs/<sha256>.bin`` and are shared
    across manifests, so repeated screenshots are stored once.
    """
    directory = Path(directory)
    blobs_dir = directory / "blobs"
    blobs_dir.mkdir(parents=True, exist_ok=True)

    def _store_blob(image: ImageBlob) -> str:
        blob_path = blobs_dir / f"{image.sha256}.bin"
        if not blob_path.exists():
            blob_path.write_bytes(image.data)
        return f"blobs/{image.sha256}.bin"

    def _observation_dict(observation: Observation) -> dict:
        return {
            "step_index": observation.step_index,
            "blob": _store_blob(observation.image),
            "captured_at": observation.captured_at,
        }

    manifest = {
        "task_id": trajectory.task_id,
        "instruction": trajectory.instruction,
        "producer_model": trajectory.producer_model,
        "terminal_success": trajectory.terminal_success,
        "max_steps": trajectory.max_steps,
        "steps": [
            {
                "index": step.index,
                "executed_code": step.executed_code,
                "subjective_action": step.subjective_action,
                "pre": _observation_dict(step.pre),
                "post": _observation_dict(step.post),
            }
            for step in trajectory.steps
        ],
    }
    name = manifest_name or f"{trajectory.task_id}.trajectory.json"
    manifest_path = directory / name
    manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True, ensure_ascii=False) + "\n", encoding="utf-8")
    return manifest_path


def load_trajectory(manifest_path: str | Path) -> Trajectory:
    """Load a trajectory manifest; raises ManifestError naming any missing blob file."""
    manifest_path = Path(manifest_path)
    try:
        data = json.loads(manifest_path.read_text(encoding="utf-8"))
    except FileNotFoundError as exc:
        raise ManifestError(f"manifest not found: {manifest_path}") from exc
    except json.JSONDecodeError as exc:
        raise ManifestError(f"manifest {manifest_path} is not valid JSON: {exc}") from exc

    def _load_observation(raw: dict) -> Observation:
        blob_path = manifest_path.parent / raw["blob"]
        try:
            payload = blob_path.read_bytes()
        except FileNotFoundError as exc:
            raise ManifestError(f"missing screenshot file: {blob_path}") from exc
        return Observation(step_index=raw["step_index"], image=ImageBlob(payload), captured_at=raw.get("captured_at"))

    steps = tuple(
        Step(
            index=raw["index"],
            pre=_load_observation(raw["pre"]),
            post=_load_observation(raw["post"]),
            executed_code=raw["executed_code"],
            subjective_action=raw.get("subjective_action"),
        )
        for raw in data["steps"]
    )
    return Trajectory(
        task_id=data["task_id"],
        instruction=data["instruction"],
        steps=steps,
        terminal_success=data.get("terminal_success"),
        producer_model=data.get("producer_model", ""),
        max_steps=data.get("max_steps", 15),
    )


# --- evolution loop ----------------------------------------------------------


@dataclass(frozen=True)
class TaskEvolution:
    task_id: str
    selected_repeat: int | None
    from_version: int | None
    to_version: int | None
    diff: tuple[PlanDiffEntry, ...] = ()
    mitigation_causes: tuple[str, ...] = ()
    indeterminate_heavy: bool = False
    error: str | None = None


@dataclass(frozen=True)
class EvolutionReport:
    selection_mode: str
    repeats: int
    phase1_snapshot: str
    phase2_snapshot: str
    phase1: AggregateResult
    phase2: AggregateResult
    ssr: SsrResult
    tasks: tuple[TaskEvolution, ...]


def report_to_dict(report: EvolutionReport) -> dict:
    return {
        "selection_mode": report.selection_mode,
        "repeats": report.repeats,
        "phase1_snapshot": report.phase1_snapshot,
        "phase2_snapshot": report.phase2_snapshot,
        "phase1": aggregate_to_dict(report.phase1),
        "phase2": aggregate_to_dict(report.phase2),
        "ssr": {
            "n_succ": report.ssr.n_succ,
            "n_solv": report.ssr.n_solv,
            "rate": None if report.ssr.rate is None else str(report.ssr.rate),
        },
        "tasks": [
            {
                "task_id": entry.task_id,
                "selected_repeat": entry.selected_repeat,
                "from_version": entry.from_version,
                "to_version": entry.to_version,
                "diff": [
                    {
                        "kind": diff_entry.kind.value,
                        "subtask": diff_entry.subtask,
                        "old_number": diff_entry.old_number,
                        "new_number": diff_entry.new_number,
                    }
                    for diff_entry in entry.diff
                ],
                "mitigation_causes": list(entry.mitigation_causes),
                "indeterminate_heavy": entry.indeterminate_heavy,
                "error": entry.error,
            }
            for entry in report.tasks
        ],
    }


def report_to_json(report: EvolutionReport) -> str:
    """Canonical report text; byte-identical for identical runs."""
    return json.dumps(report_to_dict(report), indent=2, sort_keys=True, ensure_ascii=False) + "\n"


def _task_seed(seed: int, task_id: str) -> int:
    digest = hashlib.sha256(f"{seed}:{task_id}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big")


def evolution_loop(
    tasks: Sequence[TaskSpec],
    executor: Executor,
    gateway: Gateway,
    store: KnowledgeStore,
    *,
    repeats: int = 3,
    selection_mode: str = "random",
    workers: int = 1,
    seed: int = 0,
    convention: StdConvention = StdConvention.SAMPLE,
    retrace_model: str = DEFAULT_RETRACE_MODEL,
    critique_model: str = DEFAULT_CRITIQUE_MODEL,
    selection_model: str = DEFAULT_SELECTION_MODEL,
    temperature: float = 0.0,
) -> EvolutionReport:
    """Run, select, retrace, critique, store, and re-run.

    Phase 1 executes all tasks against a frozen snapshot of current
    knowledge. Per task, one trajectory among the repeats is selected
    (seeded random, or completion-based via the selection prompt),
    retraced, and critiqued; the refined plan is stored as the next
    version. Phase 2 re-runs everything against a fresh snapshot.
    Per-task evolve failures leave the old version in place and are
    listed in the report.
    """
    if selection_mode not in ("random", "completion"):
        raise ValueError(f"unknown selection_mode {selection_mode!r}")
    groups = {task.task_id: task.group for task in tasks}

    snapshot1 = store.freeze_snapshot()
    phase1_outcomes = run_benchmark(tasks, repeats, executor, store, snapshot1, workers=workers)
    by_task: dict[str, list[RunOutcome]] = {}
    for outcome in phase1_outcomes:
        by_task.setdefault(outcome.task_id, []).append(outcome)

    task_entries: list[TaskEvolution] = []
    ssr_records: list[SsrRecord] = []
    for task in sorted(tasks, key=lambda t: t.task_id):
        outcomes = sorted(by_task.get(task.task_id, []), key=lambda o: o.repeat_index)
        any_succeeded = any(outcome.success for outcome in outcomes)
        candidates = [outcome for outcome in outcomes if outcome.trajectory is not None]
        if not candidates:
            ssr_records.append(SsrRecord(selected_succeeded=False, any_succeeded=any_succeeded))
            task_entries.append(
                TaskEvolution(
                    task_id=task.task_id,
                    selected_repeat=None,
                    from_version=None,
                    to_version=None,
                    error="no trajectory produced in phase 1",
                )
            )
            continue

        try:
            record = store.read_at(snapshot1, task.task_id)
            retraced: dict[int, ObjectiveActionSequence] = {}
            if selection_mode == "completion" and len(candidates) == 3:
                selection_candidates = []
                for position, outcome in enumerate(candidates, start=1):
                    sequence = retrace_trajectory(
                        outcome.trajectory, gateway, model_tag=retrace_model, temperature=temperature
                    )
                    retraced[position] = sequence
                    selection_candidates.append(
                        SelectionCandidate(
                            index=position, action_list=render_action_list(sequence), plan=record.plan
                        )
                    )
                best = select_completion(
                    task.instruction,
                    selection_candidates,
                    gateway,
                    model_tag=selection_model,
                    temperature=temperature,
                    fallback_seed=_task_seed(seed, task.task_id),
                )
                chosen = candidates[best - 1]
                sequence = retraced[best]
            else:
                if selection_mode == "completion":
                    logger.warning(
                        "task %s has %d usable trajectories (need 3); falling back to random selection",
                        task.task_id,
                        len(candidates),
                    )
                pick = select_random(len(candidates), _task_seed(seed, task.task_id))
                chosen = candidates[pick]
                sequence = retrace_trajectory(
                    chosen.trajectory, gateway, model_tag=retrace_model, temperature=temperature
                )

            ssr_records.append(SsrRecord(selected_succeeded=chosen.success, any_succeeded=any_succeeded))
            evolved, report = evolve(
                record,
                sequence,
                gateway,
                model_tag=critique_model,
                temperature=temperature,
                producer_model=chosen.trajectory.producer_model or record.producer_model,
            )
            store.put(evolved)
            task_entries.append(
                TaskEvolution(
                    task_id=task.task_id,
                    selected_repeat=chosen.repeat_index,
                    from_version=record.version,
                    to_version=evolved.version,
                    diff=diff_plans(record.plan, evolved.plan),
                    mitigation_causes=tuple(sorted({m.cause.value for m in report.mitigations})),
                    indeterminate_heavy=not any(
                        entry.outcome is RetraceOutcome.OPERATIONS for entry in sequence.entries
                    ),
                )
            )
        except RetrospectError as exc:
            logger.warning("evolution failed for task %s: %s", task.task_id, exc)
            task_entries.append(
                TaskEvolution(
                    task_id=task.task_id,
                    selected_repeat=None,
                    from_version=None,
                    to_version=None,
                    error=f"{type(exc).__name__}: {exc}",
                )
            )

    snapshot2 = store.freeze_snapshot()
    phase2_outcomes = run_benchmark(tasks, repeats, executor, store, snapshot2, workers=workers)

    return EvolutionReport(
        selection_mode=selection_mode,
        repeats=repeats,
        phase1_snapshot=snapshot1.snapshot_id,
        phase2_snapshot=snapshot2.snapshot_id,
        phase1=aggregate(phase1_outcomes, groups, repeats=repeats, convention=convention),
        phase2=aggregate(phase2_outcomes, groups, repeats=repeats, convention=convention),
        ssr=compute_ssr(ssr_records),
        tasks=tuple(task_entries),
    )
