"""Domain type invariants."""

import pytest

from retrospect import (
    ImageBlob,
    KnowledgePlan,
    KnowledgeRecord,
    ObjectiveActionSequence,
    Observation,
    OperationLine,
    PlanStep,
    Provenance,
    RetraceOutcome,
    Step,
    StepRetrace,
    Trajectory,
    make_plan,
)
from helpers import make_image, make_step, make_trajectory


def simple_plan():
    return make_plan([("Open app", ["Click the icon"], "launch the app")])


class TestObservations:
    def test_empty_image_rejected(self):
        with pytest.raises(ValueError, match="empty"):
            ImageBlob(b"")

    def test_negative_step_index_rejected(self):
        with pytest.raises(ValueError):
            Observation(step_index=-1, image=make_image("x"))

    def test_sha256_is_content_addressed(self):
        assert make_image("a").sha256 == make_image("a").sha256
        assert make_image("a").sha256 != make_image("b").sha256


class TestStep:
    def test_observation_indices_must_bracket_step(self):
        with pytest.raises(ValueError, match="pre observation"):
            Step(
                index=1,
                pre=Observation(0, make_image("a")),
                post=Observation(2, make_image("b")),
                executed_code="x()",
            )
        with pytest.raises(ValueError, match="post observation"):
            Step(
                index=0,
                pre=Observation(0, make_image("a")),
                post=Observation(2, make_image("b")),
                executed_code="x()",
            )

    def test_empty_code_requires_no_subjective_action(self):
        with pytest.raises(ValueError, match="subjective_action"):
            Step(
                index=0,
                pre=Observation(0, make_image("a")),
                post=Observation(1, make_image("b")),
                executed_code="",
                subjective_action="clicked something",
            )
        # a pure observation gap is fine
        Step(index=0, pre=Observation(0, make_image("a")), post=Observation(1, make_image("b")), executed_code="")


class TestTrajectory:
    def test_steps_must_be_contiguous(self):
        steps = (make_step(0), make_step(2))
        with pytest.raises(ValueError, match="contiguous"):
            Trajectory(task_id="t", instruction="i", steps=steps)

    def test_step_cap_enforced(self):
        with pytest.raises(ValueError, match="max"):
            make_trajectory(n_steps=16)
        assert len(make_trajectory(n_steps=15).steps) == 15
        assert len(make_trajectory(n_steps=3, max_steps=3).steps) == 3
        with pytest.raises(ValueError):
            make_trajectory(n_steps=4, max_steps=3)


class TestRetraceTypes:
    def test_operations_outcome_needs_lines(self):
        with pytest.raises(ValueError):
            StepRetrace(step_index=0, before_description="d", outcome=RetraceOutcome.OPERATIONS)

    def test_noop_carries_no_lines(self):
        line = OperationLine(action="Clicked OK", consequence="dialog closed")
        with pytest.raises(ValueError):
            StepRetrace(step_index=0, before_description="d", outcome=RetraceOutcome.NO_OP, operations=(line,))

    def test_operation_action_required(self):
        with pytest.raises(ValueError):
            OperationLine(action="  ")

    def test_sequence_entries_ordered(self):
        entries = (
            StepRetrace(1, "b", RetraceOutcome.NO_OP),
            StepRetrace(0, "a", RetraceOutcome.NO_OP),
        )
        with pytest.raises(ValueError, match="ordered"):
            ObjectiveActionSequence(task_id="t", entries=entries)


class TestPlanTypes:
    def test_plan_bounds(self):
        with pytest.raises(ValueError):
            KnowledgePlan(steps=())
        with pytest.raises(ValueError, match="1..15"):
            make_plan([(f"Step {i}", ["do it"], "why") for i in range(16)])

    def test_numbering_must_be_consecutive(self):
        steps = (
            PlanStep(number=1, subtask="A", actions=("x",), purpose="p"),
            PlanStep(number=3, subtask="B", actions=("y",), purpose="p"),
        )
        with pytest.raises(ValueError, match="consecutive"):
            KnowledgePlan(steps=steps)

    def test_shell_prompt_action_rejected(self):
        with pytest.raises(ValueError, match="shell prompt"):
            PlanStep(number=1, subtask="Install", actions=("# apt install thing",), purpose="p")
        with pytest.raises(ValueError, match="shell prompt"):
            PlanStep(number=1, subtask="Install", actions=("$ ls",), purpose="p")

    def test_purpose_required(self):
        with pytest.raises(ValueError, match="purpose"):
            PlanStep(number=1, subtask="A", actions=("x",), purpose="  ")


class TestKnowledgeRecord:
    def test_version_one_is_web_search_with_no_parent(self):
        with pytest.raises(ValueError):
            KnowledgeRecord("t", "i", simple_plan(), Provenance.EVOLVED, version=1)
        with pytest.raises(ValueError):
            KnowledgeRecord("t", "i", simple_plan(), Provenance.WEB_SEARCH, version=1, parent_version=1)

    def test_evolved_requires_parent_below_version(self):
        with pytest.raises(ValueError):
            KnowledgeRecord("t", "i", simple_plan(), Provenance.EVOLVED, version=2)
        with pytest.raises(ValueError):
            KnowledgeRecord("t", "i", simple_plan(), Provenance.EVOLVED, version=2, parent_version=2)
        record = KnowledgeRecord("t", "i", simple_plan(), Provenance.EVOLVED, version=2, parent_version=1)
        assert record.parent_version == 1

    def test_web_search_beyond_version_one_rejected(self):
        with pytest.raises(ValueError):
            KnowledgeRecord("t", "i", simple_plan(), Provenance.WEB_SEARCH, version=2, parent_version=1)

    def test_version_chain_reaches_root_within_version_hops(self):
        # chain v1 <- v2 <- v3: parents strictly decrease, so any walk
        # reaches the web-search root in at most version-1 hops
        records = {
            1: KnowledgeRecord("t", "i", simple_plan(), Provenance.WEB_SEARCH, version=1),
            2: KnowledgeRecord("t", "i", simple_plan(), Provenance.EVOLVED, version=2, parent_version=1),
            3: KnowledgeRecord("t", "i", simple_plan(), Provenance.EVOLVED, version=3, parent_version=2),
        }
        current = records[3]
        hops = 0
        while current.parent_version is not None:
            current = records[current.parent_version]
            hops += 1
        assert current.provenance is Provenance.WEB_SEARCH
        assert hops <= records[3].version - 1
