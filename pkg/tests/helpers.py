"""Shared builders for the test suite."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

from retrospect import (
    CompletionRequest,
    ImageBlob,
    KnowledgeRecord,
    KnowledgeStore,
    Observation,
    Provenance,
    ReplayGateway,
    SimulatedExecutor,
    Step,
    TaskBehavior,
    TaskSpec,
    Trajectory,
    build_critique_prompt,
    build_retrace_prompt,
    parse_plan,
    parse_retrace_output,
    render_action_list,
    request_digest,
)
from retrospect.harness import ScriptedStep
from retrospect.model import ObjectiveActionSequence


class SequenceGateway:
    """Test double returning queued responses in call order."""

    def __init__(self, responses):
        self._responses = list(responses)
        self.requests: list[CompletionRequest] = []

    def complete(self, request: CompletionRequest):
        from retrospect.gateway import BackendKind, CompletionResult

        self.requests.append(request)
        if not self._responses:
            raise AssertionError("SequenceGateway exhausted")
        return CompletionResult(
            text=self._responses.pop(0),
            request_digest=request_digest(request),
            backend=BackendKind.REPLAY,
        )


def make_image(label: str) -> ImageBlob:
    return ImageBlob(f"img:{label}".encode("utf-8"))


def make_step(index: int, code: str = "app.click()", pre: str | None = None, post: str | None = None) -> Step:
    return Step(
        index=index,
        pre=Observation(step_index=index, image=make_image(pre or f"s{index}")),
        post=Observation(step_index=index + 1, image=make_image(post or f"s{index + 1}")),
        executed_code=code,
    )


def make_trajectory(task_id: str = "task-1", n_steps: int = 2, instruction: str = "do the thing", **kwargs) -> Trajectory:
    return Trajectory(
        task_id=task_id,
        instruction=instruction,
        steps=tuple(make_step(i) for i in range(n_steps)),
        **kwargs,
    )


DRAG_PLAN_TEXT = """\
1. **Open the document**:
   - Double-click task.docx in the file manager
   - Purpose: load the document for editing
2. **Select all text**:
   - Click at the start of the text and drag to the end of the document
   - Purpose: highlight the text to format
3. **Apply capitalization**:
   - Use Format > Text > Capitalize Each Word
   - Purpose: capitalize every word
"""

RETRACE_OUTPUTS = [
    """[A] BEFORE
LibreOffice Writer shows the essay with no text selected.

[B] OPERATIONS
- Clicked at the start of the paragraph and dragged downward, selecting only the section from "Question Two" to "so important\"""",
    """[A] BEFORE
Part of the paragraph is highlighted in the document body.

[B] OPERATIONS
- Dragged the highlighted text toward the end of the passage, moving the selected section out of place""",
]


def critique_doc_failure(refined_plan_text: str) -> str:
    """Conforming report: failed run, deviation at step 2 (cause a), keyboard-shortcut fix."""
    return f"""SECTION A. Task Completion
Did the Agent achieve the task goal? No
Reason: The drag operation moved text instead of selecting the whole document.
Did the Agent execute more than the instruction required? No
Reason: Only selection and formatting were attempted.

SECTION B. Deviation Analysis
- Deviation Step: 2
- Expected Action: Select the entire document text
- Actual Action: Selected only a section of the paragraph, then dragged it out of place
- Root Cause: a

SECTION C. Alternative Approaches
Did the Agent attempt any approach beyond the Original Plan? No
No alternative approach tried.

SECTION D. Mitigation & Rationale
a) Output/screen misunderstanding → Use the Ctrl + A shortcut instead of dragging with the mouse (handled in Step 2).

SECTION E. REFINED PLAN:
REFINED PLAN:
{refined_plan_text}"""


def critique_doc_success(plan_text: str) -> str:
    """Conforming report for a run that already achieved the goal."""
    return f"""SECTION A. Task Completion
Did the Agent achieve the task goal? Yes
Reason: Every word in the document is capitalized at the end of the run.
Did the Agent execute more than the instruction required? No
Reason: No extra changes were made.

SECTION B. Deviation Analysis
- Deviation Step: None
- Expected Action: No deviation
- Actual Action: No deviation
- Root Cause: None

SECTION C. Alternative Approaches
Did the Agent attempt any approach beyond the Original Plan? No
No alternative approach tried.

SECTION D. Mitigation & Rationale
None

SECTION E. REFINED PLAN:
REFINED PLAN:
{plan_text}"""


REFINED_PLAN_TEXT = """\
1. **Open the document**:
   - Double-click task.docx in the file manager
   - Purpose: load the document for editing
2. **Select all text**:
   - Press Ctrl + A to select the entire document
   - Purpose: highlight the text to format
3. **Apply capitalization**:
   - Use Format > Text > Capitalize Each Word
   - Purpose: capitalize every word
"""


@dataclass
class ScenarioFixture:
    tasks: list[TaskSpec]
    executor: SimulatedExecutor
    gateway: ReplayGateway
    store: KnowledgeStore
    entries: dict[str, str]
    v1_plan_text: str


def _behavior_steps(task_id: str) -> tuple[ScriptedStep, ...]:
    return (
        ScriptedStep(executed_code="agent.drag(start, end)", pre_label=f"{task_id}-0", post_label=f"{task_id}-1"),
        ScriptedStep(executed_code="agent.drag(selection, end)", pre_label=f"{task_id}-1", post_label=f"{task_id}-2"),
    )


def build_capitalize_scenario(store_root: Path, n_tasks: int = 1) -> ScenarioFixture:
    """End-to-end fixture: drag-based v1 plans fail, the critiqued v2 plans succeed.

    Replay entries cover the retrace of every scripted step and the
    critique of the resulting action list, for each task.
    """
    tasks = []
    behaviors = {}
    store = KnowledgeStore(store_root)
    entries: dict[str, str] = {}
    v1_plan = parse_plan(DRAG_PLAN_TEXT)

    for i in range(n_tasks):
        task_id = f"writer-capitalize-{i:03d}"
        task = TaskSpec(
            task_id=task_id,
            instruction="Capitalize the first letter of each word in the open document.",
            group="Office",
        )
        tasks.append(task)
        behaviors[task_id] = TaskBehavior(
            steps=_behavior_steps(task_id),
            succeed_if_plan_contains="ctrl + a",
        )
        store.put(
            KnowledgeRecord(
                task_id=task_id,
                instruction=task.instruction,
                plan=v1_plan,
                provenance=Provenance.WEB_SEARCH,
                version=1,
                producer_model="web-search",
            )
        )

    executor = SimulatedExecutor(behaviors, producer_model="sim-agent")

    for task in tasks:
        trajectory, success = executor.run(task, v1_plan)
        assert success is False
        retraces = []
        for step, output in zip(trajectory.steps, RETRACE_OUTPUTS):
            request = build_retrace_prompt(step)
            entries[request_digest(request)] = output
            retraces.append(parse_retrace_output(output, step_index=step.index))
        sequence = ObjectiveActionSequence(task_id=task.task_id, entries=tuple(retraces))
        critique_request = build_critique_prompt(task.instruction, render_action_list(sequence), v1_plan)
        entries[request_digest(critique_request)] = critique_doc_failure(REFINED_PLAN_TEXT)

    return ScenarioFixture(
        tasks=tasks,
        executor=executor,
        gateway=ReplayGateway(entries),
        store=store,
        entries=entries,
        v1_plan_text=DRAG_PLAN_TEXT,
    )


def write_cli_bundle(directory: Path) -> dict[str, Path]:
    """Write scenario, fixture journal, and config files for CLI runs."""
    directory.mkdir(parents=True, exist_ok=True)
    store_root = directory / "knowledge"
    fixture = build_capitalize_scenario(directory / "seed-store")

    scenario = {
        "producer_model": "sim-agent",
        "tasks": [
            {"task_id": task.task_id, "instruction": task.instruction, "group": task.group}
            for task in fixture.tasks
        ],
        "behaviors": {
            task.task_id: {
                "steps": [
                    {"executed_code": s.executed_code, "pre": s.pre_label, "post": s.post_label}
                    for s in fixture.executor.behavior(task.task_id).steps
                ],
                "succeed_if_plan_contains": "ctrl + a",
            }
            for task in fixture.tasks
        },
        "knowledge": {
            task.task_id: {"plan": fixture.v1_plan_text, "producer_model": "web-search"}
            for task in fixture.tasks
        },
    }
    scenario_path = directory / "scenario.json"
    scenario_path.write_text(json.dumps(scenario, indent=2), encoding="utf-8")

    fixture_path = directory / "fixtures.jsonl"
    with open(fixture_path, "w", encoding="utf-8") as handle:
        for digest, response in fixture.entries.items():
            handle.write(json.dumps({"digest": digest, "model_tag": "", "summary": "", "response": response}) + "\n")

    config_path = directory / "config.json"
    config_path.write_text(
        json.dumps(
            {
                "gateway_mode": "replay",
                "fixture": str(fixture_path),
                "store_root": str(store_root),
                "scenario": str(scenario_path),
                "workers": 2,
                "repeats": 3,
                "selection_mode": "random",
                "seed": 0,
            },
            indent=2,
        ),
        encoding="utf-8",
    )
    return {"config": config_path, "scenario": scenario_path, "fixture": fixture_path, "store_root": store_root}
