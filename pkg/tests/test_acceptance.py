"""Acceptance suite: one test per criterion, each printing a pass/fail line.

Run with ``pytest tests/test_acceptance.py -v -s`` to see the lines.
"""

import collections
import functools
import re
import time
from fractions import Fraction

import pytest

from retrospect import (
    KnowledgeRecord,
    KnowledgeStore,
    OperationLine,
    Provenance,
    RetraceOutcome,
    RunOutcome,
    SsrRecord,
    StdConvention,
    TaskSpec,
    aggregate,
    aggregate_to_dict,
    compute_ssr,
    evolution_loop,
    make_plan,
    parse_critique_output,
    parse_retrace_output,
    render_critique_report,
    report_to_json,
    select_random,
    shard,
    validate_report,
)
from retrospect.critique import MalformedCritique, RootCause
from retrospect.retrace import RETRACE_PROMPT_TEMPLATE

from critique_corpus import conforming_corpus, mutation_corpus
from helpers import build_capitalize_scenario


def criterion(number, description):
    def decorator(func):
        @functools.wraps(func)
        def wrapper(*args, **kwargs):
            try:
                func(*args, **kwargs)
            except BaseException:
                print(f"FAIL criterion {number}: {description}")
                raise
            print(f"PASS criterion {number}: {description}")

        return wrapper

    return decorator


@criterion(1, "retrace grammar accepts all three template few-shots with exact structures")
def test_criterion_1_grammar_conformance():
    started = time.perf_counter()
    few_shots = re.findall(r"OUTPUT:\n(.*?)\n<END_EXAMPLE>", RETRACE_PROMPT_TEMPLATE, re.DOTALL)
    assert len(few_shots) == 3

    replace_all = parse_retrace_output(few_shots[0])
    assert replace_all.outcome is RetraceOutcome.OPERATIONS
    assert len(replace_all.operations) == 4
    assert replace_all.operations[0] == OperationLine(
        action="Pressed Ctrl+H in the VS Code editor", consequence="opening the Find/Replace panel"
    )

    clock = parse_retrace_output(few_shots[1])
    assert clock.outcome is RetraceOutcome.NO_OP and clock.operations == ()

    corrupted = parse_retrace_output(few_shots[2])
    assert corrupted.outcome is RetraceOutcome.INDETERMINATE and corrupted.operations == ()

    elapsed = time.perf_counter() - started
    assert elapsed < 1.0, f"grammar conformance took {elapsed:.3f}s"


@criterion(2, "critique corpus round-trips clean; every mutation hits its targeted violation")
def test_criterion_2_critique_roundtrip():
    corpus = conforming_corpus()
    assert len(corpus) >= 10
    assert "case-study-failure" in corpus
    for name, document in corpus.items():
        report = parse_critique_output(document)
        assert validate_report(report) == (), f"{name} should validate clean"
        assert parse_critique_output(render_critique_report(report)) == report, f"{name} round-trip"

    mutations = mutation_corpus()
    assert len(mutations) >= 10
    for required in ("sixteen-step-plan", "passive-step", "unknown-cause-letter", "shell-prompt-action"):
        assert required in mutations
    for name, (document, failure_kind, marker) in mutations.items():
        if failure_kind == "parse":
            with pytest.raises(MalformedCritique) as exc_info:
                parse_critique_output(document)
            assert marker in str(exc_info.value), f"{name}: wrong diagnostic"
        else:
            violations = validate_report(parse_critique_output(document))
            assert len(violations) == 1 and violations[0].rule == marker, f"{name}: {violations}"


def _outcomes_for_rates(per_mille_successes):
    """1000 tasks per repeat; k successes give a rate of exactly k/10 percent."""
    outcomes = []
    for repeat, k in enumerate(per_mille_successes):
        for i in range(1000):
            outcomes.append(
                RunOutcome(task_id=f"t{i:04d}", repeat_index=repeat, success=i < k, trajectory=None)
            )
    return outcomes


@criterion(3, "aggregate reproduces both reported-rate anchors (avg +/-0.05, sample std +/-0.01)")
def test_criterion_3_statistics_oracle():
    groups = {f"t{i:04d}": "all" for i in range(1000)}

    gpt4o = aggregate(_outcomes_for_rates([183, 194, 208]), groups)
    assert gpt4o.overall.rates_by_repeat == (18.3, 19.4, 20.8)
    assert abs(gpt4o.overall.stats.avg - 19.5) <= 0.05

    o3 = aggregate(_outcomes_for_rates([281, 285, 286]), groups)
    assert o3.overall.rates_by_repeat == (28.1, 28.5, 28.6)
    assert abs(o3.overall.stats.avg - 28.4) <= 0.05
    assert abs(o3.overall.stats.std - 0.26) <= 0.01

    assert aggregate_to_dict(o3)["overall"]["convention"] == "sample"
    population = aggregate(_outcomes_for_rates([281, 285, 286]), groups, convention=StdConvention.POPULATION)
    assert aggregate_to_dict(population)["overall"]["convention"] == "population"


@criterion(4, "SSR is exactly 0.70 and 0.85 on the 20-task fixtures, undefined at N_solv=0")
def test_criterion_4_ssr_definition():
    records_70 = [SsrRecord(selected_succeeded=i < 14, any_succeeded=True) for i in range(20)]
    assert compute_ssr(records_70).rate == Fraction(7, 10)

    records_85 = [SsrRecord(selected_succeeded=i < 17, any_succeeded=True) for i in range(20)]
    assert compute_ssr(records_85).rate == Fraction(17, 20)

    unsolvable = [SsrRecord(selected_succeeded=False, any_succeeded=False) for _ in range(20)]
    assert compute_ssr(unsolvable).rate is None


@criterion(5, "369 tasks shard over 30 workers into sizes {12,13}; sweep n<=500, w<=64 differs <=1")
def test_criterion_5_sharding():
    def tasks_named(n):
        return [TaskSpec(task_id=f"t{i:04d}", instruction="x", group="g") for i in range(n)]

    shards = shard(tasks_named(369), 30)
    sizes = [len(s) for s in shards]
    assert set(sizes) == {12, 13}
    assert sum(sizes) == 369

    for n in range(0, 501):
        tasks = tasks_named(n)
        for workers in range(1, 65):
            sizes = [len(s) for s in shard(tasks, workers)]
            assert sum(sizes) == n
            assert all(size >= 1 for size in sizes)
            if sizes:
                assert max(sizes) - min(sizes) <= 1, (n, workers, sizes)


@criterion(6, "evolution loop under replay is byte-identical for workers in {1, 4, 30}, < 60 s")
def test_criterion_6_determinism(tmp_path):
    started = time.perf_counter()
    reports = []
    for workers in (1, 4, 30):
        fixture = build_capitalize_scenario(tmp_path / f"w{workers}", n_tasks=4)
        report = evolution_loop(
            fixture.tasks, fixture.executor, fixture.gateway, fixture.store,
            repeats=3, workers=workers, seed=0,
        )
        reports.append(report_to_json(report))
    assert reports[0] == reports[1] == reports[2]
    elapsed = time.perf_counter() - started
    assert elapsed < 60.0, f"loop took {elapsed:.1f}s"


@criterion(7, "case-study fixture: 0% -> 100%, chain v1(web) -> v2(evolved), cause 'a' covered")
def test_criterion_7_end_to_end_improvement(tmp_path):
    fixture = build_capitalize_scenario(tmp_path / "store", n_tasks=2)
    report = evolution_loop(
        fixture.tasks, fixture.executor, fixture.gateway, fixture.store, repeats=3, seed=0
    )
    assert report.phase1.overall.rates_by_repeat == (0.0, 0.0, 0.0)
    assert report.phase1.overall.stats.avg == 0.0
    assert report.phase2.overall.rates_by_repeat == (100.0, 100.0, 100.0)
    assert report.phase2.overall.stats.avg == 100.0

    for task in fixture.tasks:
        history = fixture.store.history(task.task_id)
        assert [(r.version, r.provenance) for r in history] == [
            (1, Provenance.WEB_SEARCH),
            (2, Provenance.EVOLVED),
        ]
        assert history[1].parent_version == 1
        assert history[1].critique_digest
        assert "ctrl + a" in history[1].plan.steps[1].actions[0].lower()

    for entry in report.tasks:
        assert entry.error is None
        assert RootCause.SCREEN_MISUNDERSTANDING.value in entry.mitigation_causes


@criterion(8, "interrupted put leaves the store readable (all-or-nothing); snapshot reads survive 100 writes")
def test_criterion_8_snapshot_isolation_and_crash_safety(tmp_path, monkeypatch):
    def plan(marker):
        return make_plan([("Only step", [f"Run {marker}"], "do the work")])

    def web(task_id, marker="v1"):
        return KnowledgeRecord(
            task_id=task_id, instruction="i", plan=plan(marker),
            provenance=Provenance.WEB_SEARCH, version=1, producer_model="web",
        )

    def evolved(task_id, version, marker):
        return KnowledgeRecord(
            task_id=task_id, instruction="i", plan=plan(marker),
            provenance=Provenance.EVOLVED, version=version, parent_version=version - 1,
            producer_model="sim",
        )

    root = tmp_path / "crash-store"
    store = KnowledgeStore(root)
    store.put(web("pinned"))
    snapshot = store.freeze_snapshot()
    pinned_v1 = store.read_at(snapshot, "pinned")

    # interrupted mid-write: record must be absent afterwards
    def torn_append(self, handle, payload):
        handle.write(payload[: max(1, len(payload) // 3)])
        handle.flush()
        raise OSError("simulated crash")

    monkeypatch.setattr(KnowledgeStore, "_append", torn_append)
    with pytest.raises(OSError):
        store.put(evolved("pinned", 2, "torn"))
    monkeypatch.undo()

    reopened = KnowledgeStore(root)
    assert [r.version for r in reopened.history("pinned")] == [1]

    # interrupted after the full write: record must be fully present
    original_append = KnowledgeStore._append

    def crash_after_write(self, handle, payload):
        original_append(self, handle, payload)
        raise OSError("crash after flush")

    monkeypatch.setattr(KnowledgeStore, "_append", crash_after_write)
    with pytest.raises(OSError):
        reopened.put(evolved("pinned", 2, "landed"))
    monkeypatch.undo()

    reopened = KnowledgeStore(root)
    assert [r.version for r in reopened.history("pinned")] == [1, 2]

    # 100 further writes never disturb the frozen snapshot
    for i in range(99):
        reopened.put(web(f"extra-{i:03d}", marker=f"x{i}"))
    reopened.put(evolved("pinned", 3, "newest"))
    assert reopened.read_at(snapshot, "pinned") == pinned_v1
    reopened.verify_snapshot(snapshot)


@criterion(9, "30000 seeded draws at n=3 land within 1/3 +/- 0.02 per index")
def test_criterion_9_random_selection_statistics():
    counts = collections.Counter(select_random(3, seed) for seed in range(30000))
    assert set(counts) == {0, 1, 2}
    for index in range(3):
        frequency = counts[index] / 30000
        assert abs(frequency - 1 / 3) <= 0.02, f"index {index}: {frequency:.4f}"
