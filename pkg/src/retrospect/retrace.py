"""Retrace stage: reconstruct objective actions from screenshot pairs.

For every recorded step the model receives the BEFORE/AFTER screenshots
plus the automation snippet that ran, and must answer in a strict
two-section grammar (``[A] BEFORE`` description, ``[B] OPERATIONS``
bullets). The union of per-step results is the objective action
sequence that feeds the critique stage.
"""

from __future__ import annotations

import logging
from typing import Callable

from .errors import RetrospectError
from .gateway import ChatMessage, CompletionRequest, Gateway, ImagePart, Role, TextPart
from .model import (
    INDETERMINATE_BULLET,
    NO_OP_BULLET,
    ObjectiveActionSequence,
    OperationLine,
    RetraceOutcome,
    Step,
    StepRetrace,
    Trajectory,
)

logger = logging.getLogger(__name__)

DEFAULT_RETRACE_MODEL = "gpt-4o"

RETRACE_PROMPT_TEMPLATE = """You are a senior QA assistant.
You receive:
• BEFORE screenshot <image0>
• AFTER  screenshot <image1>
• A snippet of Python automation code.

Your task:

PART A - BEFORE DESCRIPTION
Describe concisely and objectively what is visible in the BEFORE screenshot only.
• <= 80 words, declarative sentences.
• No speculation, no mention of AFTER, no hidden reasoning.

PART B - UI OPERATION LIST
List, in chronological order, every visible UI step (mouse-click, key-stroke, drag, menu selection…) that converted the BEFORE state into the AFTER state.

OUTPUT FORMAT (STRICT)
[A] BEFORE
<one-to-three short sentences that satisfy PART A>

[B] OPERATIONS
- <action>, <visible consequence>
- …

RULES FOR PART B (inherited)
1. Bullet list; every line begins with "-".
2. Each bullet MUST pair the action with its visible consequence, e.g.
- Clicked the "Replace All" button in VS Code's Search sidebar, replacing all 12 occurrences of "text" with "test" in the open file
3. Do not add headings, explanations or blank lines beyond the specified format.
4. If the ONLY difference is the system clock, Part B must contain exactly one bullet:
- No operations performed.
5. If the screenshots cannot be compared, Part B must contain exactly one bullet:
- Unable to determine operations.

Think step-by-step internally but reveal ONLY the two required sections.

FEW-SHOT EXAMPLES

<BEGIN_EXAMPLE>
# Normal change with visible result
BEFORE: VS Code shows 3 occurrences of "foo"
AFTER : All occurrences now read "bar"
CODE  : editor.replace_all("foo", "bar")
OUTPUT:
[A] BEFORE
VS Code editor window is open; the Find/Replace panel indicates 3 matches for the word "foo".

[B] OPERATIONS
- Pressed Ctrl+H in the VS Code editor, opening the Find/Replace panel
- Typed "foo" into the Find box, highlighting 3 matches in the file
- Typed "bar" into the Replace box
- Clicked the "Replace All" button in the Find/Replace panel, replacing all 3 occurrences of "foo" with "bar" in the document
<END_EXAMPLE>

<BEGIN_EXAMPLE>
# Only the clock changed
BEFORE: Desktop 10:01
AFTER : Desktop 10:02
OUTPUT:
[A] BEFORE
Desktop environment showing wallpaper and system clock reading 10:01.

[B] OPERATIONS
- No operations performed.
<END_EXAMPLE>

<BEGIN_EXAMPLE>
# Incomparable
BEFORE: Corrupted screenshot
AFTER : Corrupted screenshot
OUTPUT:
[A] BEFORE
Screenshot is corrupted; no discernible UI elements are visible.

[B] OPERATIONS
- Unable to determine operations.
<END_EXAMPLE>

The FIRST image (<image0>) shows the screen BEFORE the Agent acted.
The SECOND image (<image1>) shows the screen AFTER the Agent acted.

The Agent executed the following Python code:

```python
{code}
List the UI operations (action + visible result)."""

CORRECTIVE_SUFFIX = (
    "\n\nYour previous reply did not follow the OUTPUT FORMAT. Respond again with "
    "exactly two sections: the line [A] BEFORE followed by the description, then "
    "the line [B] OPERATIONS followed by bullet lines starting with \"-\", and no other text."
)

_PART_A_HEADER = "[A] BEFORE"
_PART_B_HEADER = "[B] OPERATIONS"


class MalformedRetrace(RetrospectError):
    """Model output does not follow the [A]/[B] grammar."""


class MissingObservation(RetrospectError):
    """A step lacks one of its two observations."""


def build_retrace_prompt(
    step: Step,
    *,
    model_tag: str = DEFAULT_RETRACE_MODEL,
    temperature: float = 0.0,
    max_output: int | None = None,
    corrective: bool = False,
) -> CompletionRequest:
    """Fill the retrace template for one step: text plus the two screenshots in order."""
    if step.pre is None or step.post is None:
        raise MissingObservation(f"step {step.index} lacks a pre or post observation")
    text = RETRACE_PROMPT_TEMPLATE.replace("{code}", step.executed_code)
    if corrective:
        text += CORRECTIVE_SUFFIX
    message = ChatMessage(
        role=Role.USER,
        parts=(TextPart(text), ImagePart(step.pre.image), ImagePart(step.post.image)),
    )
    kwargs = {} if max_output is None else {"max_output": max_output}
    return CompletionRequest(messages=(message,), model_tag=model_tag, temperature=temperature, **kwargs)


def _normalize_header(line: str) -> str:
    return line.strip().strip("*").strip()


def parse_retrace_output(text: str, *, step_index: int = 0) -> StepRetrace:
    """Parse one model reply into a :class:`StepRetrace`.

    Raises :class:`MalformedRetrace` on missing section headers,
    non-bullet lines in Part B, or the reserved NoOp/Indeterminate
    bullets mixed with other bullets.
    """
    lines = text.splitlines()
    a_index = b_index = None
    for i, line in enumerate(lines):
        header = _normalize_header(line)
        if header == _PART_A_HEADER and a_index is None:
            a_index = i
        elif header == _PART_B_HEADER and b_index is None:
            b_index = i
    if a_index is None:
        raise MalformedRetrace(f"missing section header {_PART_A_HEADER!r}")
    if b_index is None or b_index < a_index:
        raise MalformedRetrace(f"missing section header {_PART_B_HEADER!r}")

    before_description = "\n".join(lines[a_index + 1 : b_index]).strip()

    bullets: list[str] = []
    for line in lines[b_index + 1 :]:
        stripped = line.strip()
        if not stripped:
            continue
        if not stripped.startswith("-"):
            raise MalformedRetrace(f"non-bullet line in Part B: {stripped!r}")
        bullets.append(stripped[1:].strip())
    if not bullets:
        raise MalformedRetrace("Part B contains no bullets")

    for reserved, outcome in ((NO_OP_BULLET, RetraceOutcome.NO_OP), (INDETERMINATE_BULLET, RetraceOutcome.INDETERMINATE)):
        if reserved in bullets:
            if len(bullets) != 1:
                raise MalformedRetrace(f"reserved bullet {reserved!r} mixed with other bullets")
            return StepRetrace(step_index=step_index, before_description=before_description, outcome=outcome)

    operations = []
    for bullet in bullets:
        action, _, consequence = bullet.partition(",")
        action = action.strip()
        if not action:
            raise MalformedRetrace(f"operation bullet with empty action: {bullet!r}")
        operations.append(OperationLine(action=action, consequence=consequence.strip()))
    return StepRetrace(
        step_index=step_index,
        before_description=before_description,
        outcome=RetraceOutcome.OPERATIONS,
        operations=tuple(operations),
    )


def retrace_step(
    step: Step,
    gateway: Gateway,
    *,
    model_tag: str = DEFAULT_RETRACE_MODEL,
    temperature: float = 0.0,
    max_output: int | None = None,
    on_raw_output: Callable[[int, str], None] | None = None,
) -> StepRetrace:
    """Retrace one step: build, complete, parse; one corrective reprompt, then Indeterminate.

    ``on_raw_output`` receives (step_index, raw model text) for every
    completion, for debug dumps.
    """
    request = build_retrace_prompt(step, model_tag=model_tag, temperature=temperature, max_output=max_output)
    result = gateway.complete(request)
    if on_raw_output is not None:
        on_raw_output(step.index, result.text)
    try:
        return parse_retrace_output(result.text, step_index=step.index)
    except MalformedRetrace as first_error:
        logger.warning("malformed retrace output for step %d (%s); reprompting", step.index, first_error)
    retry = build_retrace_prompt(
        step, model_tag=model_tag, temperature=temperature, max_output=max_output, corrective=True
    )
    result = gateway.complete(retry)
    if on_raw_output is not None:
        on_raw_output(step.index, result.text)
    try:
        return parse_retrace_output(result.text, step_index=step.index)
    except MalformedRetrace as second_error:
        logger.warning(
            "retrace output for step %d still malformed (%s); marking indeterminate. Raw output:\n%s",
            step.index,
            second_error,
            result.text,
        )
        return StepRetrace(step_index=step.index, before_description="", outcome=RetraceOutcome.INDETERMINATE)


def retrace_trajectory(trajectory: Trajectory, gateway: Gateway, **kwargs) -> ObjectiveActionSequence:
    """Retrace every step of a trajectory, preserving order.

    NoOp and Indeterminate entries are retained with their step indices
    so downstream deviation analysis can cite them. Step-level transport
    errors propagate; no partial sequence is emitted.
    """
    entries = tuple(retrace_step(step, gateway, **kwargs) for step in trajectory.steps)
    return ObjectiveActionSequence(task_id=trajectory.task_id, entries=entries)


def render_operation_line(operation: OperationLine) -> str:
    if operation.consequence:
        return f"- {operation.action}, {operation.consequence}"
    return f"- {operation.action}"


def render_action_list(sequence: ObjectiveActionSequence) -> str:
    """Render the sequence as per-step blocks, the textual input to critique."""
    blocks: list[str] = []
    for entry in sequence.entries:
        lines = [f"Step {entry.step_index}:"]
        if entry.outcome is RetraceOutcome.NO_OP:
            lines.append(f"- {NO_OP_BULLET}")
        elif entry.outcome is RetraceOutcome.INDETERMINATE:
            lines.append(f"- {INDETERMINATE_BULLET}")
        else:
            lines.extend(render_operation_line(operation) for operation in entry.operations)
        blocks.append("\n".join(lines))
    return "\n\n".join(blocks)
