"""End-to-end walkthrough on a simulated desktop task.

A web-sourced plan tells the agent to select text by dragging the mouse;
the simulated executor fails under that plan. The pipeline retraces the
recorded screenshots, critiques the run against the plan, stores a
refined plan that uses Ctrl + A instead, and the re-run succeeds.

Everything is deterministic: the executor is scripted and the model
gateway replays canned responses keyed by request digest. Run with:

    python demos/evolution_demo.py
"""

import tempfile
from pathlib import Path

from retrospect import (
    KnowledgeRecord,
    KnowledgeStore,
    Provenance,
    ReplayGateway,
    SimulatedExecutor,
    TaskBehavior,
    TaskSpec,
    build_critique_prompt,
    build_retrace_prompt,
    evolution_loop,
    parse_plan,
    parse_retrace_output,
    render_action_list,
    report_to_json,
    request_digest,
)
from retrospect.harness import ScriptedStep
from retrospect.model import ObjectiveActionSequence

WEB_PLAN = """\
1. **Open the document**:
   - Double-click essay.docx in the file manager
   - Purpose: load the document for editing
2. **Select all text**:
   - Click at the start of the text and drag to the end of the document
   - Purpose: highlight the text to format
3. **Apply capitalization**:
   - Use Format > Text > Capitalize Each Word
   - Purpose: capitalize every word
"""

# What the retrace model "sees" in the two recorded screenshot pairs.
RETRACE_REPLIES = [
    """[A] BEFORE
LibreOffice Writer shows the essay with no text selected.

[B] OPERATIONS
- Clicked at the start of the paragraph and dragged downward, selecting only part of the text""",
    """[A] BEFORE
Part of the paragraph is highlighted.

[B] OPERATIONS
- Dragged the highlighted text toward the end of the passage, moving it out of place""",
]

# The critique model's report: names the deviation, fixes step 2.
CRITIQUE_REPLY = """SECTION A. Task Completion
Did the Agent achieve the task goal? No
Reason: The drag operation moved text instead of selecting the whole document.
Did the Agent execute more than the instruction required? No
Reason: Only selection and formatting were attempted.

SECTION B. Deviation Analysis
- Deviation Step: 2
- Expected Action: Select the entire document text
- Actual Action: Selected only part of the paragraph, then dragged it out of place
- Root Cause: a

SECTION C. Alternative Approaches
Did the Agent attempt any approach beyond the Original Plan? No
No alternative approach tried.

SECTION D. Mitigation & Rationale
a) Output/screen misunderstanding → Use the Ctrl + A shortcut instead of dragging with the mouse (handled in Step 2).

SECTION E. REFINED PLAN:
REFINED PLAN:
1. **Open the document**:
   - Double-click essay.docx in the file manager
   - Purpose: load the document for editing
2. **Select all text**:
   - Press Ctrl + A to select the entire document
   - Purpose: highlight the text to format
3. **Apply capitalization**:
   - Use Format > Text > Capitalize Each Word
   - Purpose: capitalize every word
"""


def main():
    task = TaskSpec(
        task_id="writer-capitalize",
        instruction="Capitalize the first letter of each word in the open document.",
        group="Office",
    )
    executor = SimulatedExecutor(
        {
            task.task_id: TaskBehavior(
                steps=(
                    ScriptedStep("agent.drag(start, end)", "shot-0", "shot-1"),
                    ScriptedStep("agent.drag(selection, end)", "shot-1", "shot-2"),
                ),
                succeed_if_plan_contains="ctrl + a",
            )
        },
        producer_model="sim-agent",
    )

    with tempfile.TemporaryDirectory() as workdir:
        store = KnowledgeStore(Path(workdir) / "knowledge")
        v1_plan = parse_plan(WEB_PLAN)
        store.put(
            KnowledgeRecord(
                task_id=task.task_id,
                instruction=task.instruction,
                plan=v1_plan,
                provenance=Provenance.WEB_SEARCH,
                version=1,
                producer_model="web-search",
            )
        )

        # Author the replay fixture: compute the digests the pipeline will
        # issue and map each one to a canned reply.
        trajectory, _ = executor.run(task, v1_plan)
        entries = {}
        retraces = []
        for step, reply in zip(trajectory.steps, RETRACE_REPLIES):
            entries[request_digest(build_retrace_prompt(step))] = reply
            retraces.append(parse_retrace_output(reply, step_index=step.index))
        sequence = ObjectiveActionSequence(task_id=task.task_id, entries=tuple(retraces))
        critique_request = build_critique_prompt(task.instruction, render_action_list(sequence), v1_plan)
        entries[request_digest(critique_request)] = CRITIQUE_REPLY

        report = evolution_loop(
            [task], executor, ReplayGateway(entries), store, repeats=3, seed=0
        )

        print("objective action list fed to the critique stage:\n")
        print(render_action_list(sequence))
        print()
        rates = (report.phase1.overall.stats.avg, report.phase2.overall.stats.avg)
        print(f"success rate with web knowledge:     {rates[0]:6.1f} %")
        print(f"success rate with evolved knowledge: {rates[1]:6.1f} %")
        print()
        print("knowledge history:")
        for record in store.history(task.task_id):
            print(f"  v{record.version} [{record.provenance.value}] step 2 action: {record.plan.steps[1].actions[0]}")
        print()
        print("full report JSON:\n")
        print(report_to_json(report))


if __name__ == "__main__":
    main()
