"""Parser and renderer for plan documents.

The same grammar ingests both web-sourced knowledge and refined plans.
A document is a numbered list of subtasks, each followed by bullet
actions and a final ``Purpose:`` bullet::

    1. **Select all text**:
       - Press Ctrl+A in the document
       - Purpose: select entire document

Parsing is lenient about formatting that web sources get wrong: subtask
titles may be unbolded, bullets may use ``-`` or ``*``, and source step
numbers may have gaps (numbering is normalized to 1..n). Structural
rules are enforced: every step needs at least one action and a Purpose
line, plans hold 1..15 steps, and no action may start with a shell
prompt character (``#`` or ``$``).
"""

from __future__ import annotations

import re

from .errors import RetrospectError
from .model import MAX_PLAN_STEPS, KnowledgePlan, PlanStep

_STEP_RE = re.compile(r"^\s*(\d+)[.)]\s*(.*)$")
_BULLET_RE = re.compile(r"^\s*[-*]\s+(.*)$")
_PURPOSE_RE = re.compile(r"^\**\s*purpose\s*\**\s*:\s*(.*)$", re.IGNORECASE)
_SHELL_PROMPT_RE = re.compile(r"^[#$]")


class MalformedPlan(RetrospectError):
    """A plan document violates the grammar; carries the offending location."""

    def __init__(self, message: str, *, line: int | None = None, step: int | None = None):
        location = []
        if step is not None:
            location.append(f"step {step}")
        if line is not None:
            location.append(f"line {line}")
        suffix = f" ({', '.join(location)})" if location else ""
        super().__init__(f"{message}{suffix}")
        self.line = line
        self.step = step


def _normalize_title(raw: str) -> str:
    title = raw.strip()
    if title.endswith(":"):
        title = title[:-1].strip()
    if title.startswith("**") and title.endswith("**") and len(title) > 4:
        title = title[2:-2].strip()
    if title.endswith(":"):
        title = title[:-1].strip()
    return title


class _DraftStep:
    def __init__(self, title: str, line: int):
        self.title = title
        self.line = line
        self.actions: list[str] = []
        self.purpose: str | None = None


def parse_plan(text: str) -> KnowledgePlan:
    """Parse a plan document into a :class:`KnowledgePlan`.

    Raises :class:`MalformedPlan` with the offending line/step on any
    grammar violation.
    """
    drafts: list[_DraftStep] = []
    for line_no, raw_line in enumerate(text.splitlines(), start=1):
        line = raw_line.rstrip()
        if not line.strip():
            continue

        step_match = _STEP_RE.match(line)
        if step_match:
            title = _normalize_title(step_match.group(2))
            if not title:
                raise MalformedPlan("numbered step is missing a subtask title", line=line_no)
            drafts.append(_DraftStep(title, line_no))
            continue

        bullet_match = _BULLET_RE.match(line)
        if bullet_match:
            if not drafts:
                raise MalformedPlan("bullet appears before any numbered step", line=line_no)
            draft = drafts[-1]
            body = bullet_match.group(1).strip()
            purpose_match = _PURPOSE_RE.match(body)
            if purpose_match:
                if draft.purpose is not None:
                    raise MalformedPlan("duplicate Purpose line", line=line_no, step=len(drafts))
                purpose = purpose_match.group(1).strip()
                if not purpose:
                    raise MalformedPlan("empty Purpose line", line=line_no, step=len(drafts))
                draft.purpose = purpose
            else:
                if not body:
                    raise MalformedPlan("empty action bullet", line=line_no, step=len(drafts))
                if _SHELL_PROMPT_RE.match(body):
                    raise MalformedPlan(
                        f"action begins with a shell prompt character: {body!r}",
                        line=line_no,
                        step=len(drafts),
                    )
                draft.actions.append(body)
            continue

        raise MalformedPlan(f"unrecognized line: {line.strip()!r}", line=line_no)

    if not drafts:
        raise MalformedPlan("document contains no plan steps")
    if len(drafts) > MAX_PLAN_STEPS:
        raise MalformedPlan(f"plan has {len(drafts)} steps, maximum is {MAX_PLAN_STEPS}")

    steps = []
    for number, draft in enumerate(drafts, start=1):
        if not draft.actions:
            raise MalformedPlan("step has no actions", line=draft.line, step=number)
        if draft.purpose is None:
            raise MalformedPlan("step is missing its Purpose line", line=draft.line, step=number)
        steps.append(
            PlanStep(number=number, subtask=draft.title, actions=tuple(draft.actions), purpose=draft.purpose)
        )
    return KnowledgePlan(steps=tuple(steps))


def render_plan(plan: KnowledgePlan) -> str:
    """Render a plan in the canonical strict form. Round-trip stable with :func:`parse_plan`."""
    lines: list[str] = []
    for step in plan.steps:
        lines.append(f"{step.number}. **{step.subtask}**:")
        for action in step.actions:
            lines.append(f"   - {action}")
        lines.append(f"   - Purpose: {step.purpose}")
    return "\n".join(lines) + "\n"
