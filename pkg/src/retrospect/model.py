"""Domain types shared across the pipeline.

All types are immutable values after construction and safe to share
between concurrent workers.
"""

from __future__ import annotations

import hashlib
import re
from dataclasses import dataclass, field
from enum import Enum
from typing import Sequence

MAX_PLAN_STEPS = 15
DEFAULT_MAX_TRAJECTORY_STEPS = 15

_SHELL_PROMPT_RE = re.compile(r"^\s*[#$]")
_PURPOSE_PREFIX_RE = re.compile(r"^\s*purpose\s*:", re.IGNORECASE)


def content_hash(data: bytes) -> str:
    """Hex SHA-256 of a byte payload."""
    return hashlib.sha256(data).hexdigest()


def _require(condition: bool, message: str) -> None:
    if not condition:
        raise ValueError(message)


def _single_line(name: str, text: str) -> None:
    _require("\n" not in text and "\r" not in text, f"{name} must be single-line")


@dataclass(frozen=True)
class ImageBlob:
    """Opaque screenshot payload, addressed by content hash."""

    data: bytes
    sha256: str = field(init=False, compare=False)

    def __post_init__(self) -> None:
        _require(len(self.data) > 0, "image payload is empty")
        object.__setattr__(self, "sha256", content_hash(self.data))


@dataclass(frozen=True)
class Observation:
    step_index: int
    image: ImageBlob
    captured_at: float | None = None

    def __post_init__(self) -> None:
        _require(self.step_index >= 0, "step_index must be >= 0")


@dataclass(frozen=True)
class Step:
    """One executed step: the observations around it plus the code that ran."""

    index: int
    pre: Observation
    post: Observation
    executed_code: str
    subjective_action: str | None = None

    def __post_init__(self) -> None:
        _require(self.index >= 0, "step index must be >= 0")
        _require(
            self.pre.step_index == self.index,
            f"pre observation index {self.pre.step_index} != step index {self.index}",
        )
        _require(
            self.post.step_index == self.index + 1,
            f"post observation index {self.post.step_index} != step index {self.index} + 1",
        )
        # An empty snippet is only allowed for a pure observation gap.
        if not self.executed_code and self.subjective_action is not None:
            raise ValueError("empty executed_code with a subjective_action present")


@dataclass(frozen=True)
class Trajectory:
    task_id: str
    instruction: str
    steps: tuple[Step, ...]
    terminal_success: bool | None = None
    producer_model: str = ""
    max_steps: int = DEFAULT_MAX_TRAJECTORY_STEPS

    def __post_init__(self) -> None:
        object.__setattr__(self, "steps", tuple(self.steps))
        _require(
            len(self.steps) <= self.max_steps,
            f"trajectory has {len(self.steps)} steps, max is {self.max_steps}",
        )
        for position, step in enumerate(self.steps):
            _require(
                step.index == position,
                f"steps must be contiguous from 0; found index {step.index} at position {position}",
            )


class RetraceOutcome(Enum):
    OPERATIONS = "operations"
    NO_OP = "no_op"
    INDETERMINATE = "indeterminate"


# Exact bullets the output grammar reserves for the two special outcomes.
NO_OP_BULLET = "No operations performed."
INDETERMINATE_BULLET = "Unable to determine operations."


@dataclass(frozen=True)
class OperationLine:
    """An action paired with its visible consequence.

    The output grammar asks for both halves, but real outputs sometimes
    omit the consequence; an empty consequence is preserved as-is.
    """

    action: str
    consequence: str = ""

    def __post_init__(self) -> None:
        _require(bool(self.action.strip()), "operation action is empty")
        _single_line("action", self.action)
        _single_line("consequence", self.consequence)


@dataclass(frozen=True)
class StepRetrace:
    """The objective reconstruction of a single step."""

    step_index: int
    before_description: str
    outcome: RetraceOutcome
    operations: tuple[OperationLine, ...] = ()

    def __post_init__(self) -> None:
        object.__setattr__(self, "operations", tuple(self.operations))
        _require(self.step_index >= 0, "step_index must be >= 0")
        if self.outcome is RetraceOutcome.OPERATIONS:
            _require(len(self.operations) > 0, "OPERATIONS outcome with no operation lines")
        else:
            _require(len(self.operations) == 0, f"{self.outcome.name} outcome carries operation lines")


@dataclass(frozen=True)
class ObjectiveActionSequence:
    task_id: str
    entries: tuple[StepRetrace, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "entries", tuple(self.entries))
        indices = [entry.step_index for entry in self.entries]
        _require(indices == sorted(set(indices)), "entries must be ordered by step_index, one per step")


@dataclass(frozen=True)
class PlanStep:
    """One numbered subtask of a knowledge plan."""

    number: int
    subtask: str
    actions: tuple[str, ...]
    purpose: str

    def __post_init__(self) -> None:
        object.__setattr__(self, "actions", tuple(self.actions))
        _require(self.number >= 1, "plan step numbers are 1-based")
        _require(bool(self.subtask.strip()), "subtask title is empty")
        _single_line("subtask", self.subtask)
        # Grammar-reserved characters that would not survive a render/parse cycle.
        _require("**" not in self.subtask, "subtask title may not contain '**'")
        _require(not self.subtask.endswith(":"), "subtask title may not end with ':'")
        _require(len(self.actions) > 0, f"step {self.number} has no actions")
        for action in self.actions:
            _require(bool(action.strip()), f"step {self.number} has an empty action")
            _single_line("action", action)
            if _SHELL_PROMPT_RE.match(action):
                raise ValueError(f"step {self.number} action begins with a shell prompt character: {action!r}")
            # Reserved prefix: would be re-parsed as the purpose line.
            if _PURPOSE_PREFIX_RE.match(action):
                raise ValueError(f"step {self.number} action begins with reserved prefix 'Purpose:'")
        _require(bool(self.purpose.strip()), f"step {self.number} has an empty purpose")
        _single_line("purpose", self.purpose)


@dataclass(frozen=True)
class KnowledgePlan:
    steps: tuple[PlanStep, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "steps", tuple(self.steps))
        _require(
            1 <= len(self.steps) <= MAX_PLAN_STEPS,
            f"plan must have 1..{MAX_PLAN_STEPS} steps, got {len(self.steps)}",
        )
        for position, step in enumerate(self.steps, start=1):
            _require(
                step.number == position,
                f"step numbers must be consecutive from 1; found {step.number} at position {position}",
            )


class Provenance(Enum):
    WEB_SEARCH = "web_search"
    EVOLVED = "evolved"


@dataclass(frozen=True)
class KnowledgeRecord:
    """A versioned, provenance-tracked knowledge plan for one task."""

    task_id: str
    instruction: str
    plan: KnowledgePlan
    provenance: Provenance
    version: int
    parent_version: int | None = None
    producer_model: str = ""
    critique_digest: str | None = None

    def __post_init__(self) -> None:
        _require(self.version >= 1, "version must be >= 1")
        if self.version == 1:
            _require(self.parent_version is None, "version 1 must not have a parent_version")
            _require(
                self.provenance is Provenance.WEB_SEARCH,
                "version 1 records must have WEB_SEARCH provenance",
            )
        else:
            _require(self.parent_version is not None, "evolved records must reference a parent_version")
            _require(
                self.provenance is Provenance.EVOLVED,
                "records beyond version 1 must have EVOLVED provenance",
            )
            assert self.parent_version is not None
            _require(
                1 <= self.parent_version < self.version,
                f"parent_version {self.parent_version} must be below version {self.version}",
            )


def plan_to_dict(plan: KnowledgePlan) -> dict:
    """Plain-data form of a plan, used by serialization layers."""
    return {
        "steps": [
            {
                "number": step.number,
                "subtask": step.subtask,
                "actions": list(step.actions),
                "purpose": step.purpose,
            }
            for step in plan.steps
        ]
    }


def plan_from_dict(data: dict) -> KnowledgePlan:
    return KnowledgePlan(
        steps=tuple(
            PlanStep(
                number=entry["number"],
                subtask=entry["subtask"],
                actions=tuple(entry["actions"]),
                purpose=entry["purpose"],
            )
            for entry in data["steps"]
        )
    )


def make_plan(steps: Sequence[tuple[str, Sequence[str], str]]) -> KnowledgePlan:
    """Build a plan from (subtask, actions, purpose) triples, numbering 1..n."""
    return KnowledgePlan(
        steps=tuple(
            PlanStep(number=i, subtask=subtask, actions=tuple(actions), purpose=purpose)
            for i, (subtask, actions, purpose) in enumerate(steps, start=1)
        )
    )
