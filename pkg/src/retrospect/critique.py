"""Critique stage: structured analysis of a run against its reference plan.

The model receives the task instruction, the objective action list from
the retrace stage, and the current plan, and must answer in a five
section grammar:

* A — task completion (achieved / over-executed, with reasons)
* B — deviation rows (step, expected vs actual, root-cause letters a-i)
* C — alternative approaches the agent tried
* D — one mitigation per root cause, tied to a forthcoming plan step
* E — the refined plan, in the same grammar as :mod:`retrospect.plans`

Parsing is header-anchored and tolerant of bold markers and stray
whitespace; everything else is strict. Rule violations (passive steps,
uncovered root causes) are reported as data by :func:`validate_report`,
and :func:`evolve` gates knowledge persistence on a clean report.
"""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass
from enum import Enum

from .errors import RetrospectError
from .gateway import ChatMessage, CompletionRequest, Gateway, Role, TextPart
from .model import KnowledgePlan, KnowledgeRecord, ObjectiveActionSequence, Provenance, content_hash
from .plans import MalformedPlan, parse_plan, render_plan
from .retrace import render_action_list

logger = logging.getLogger(__name__)

DEFAULT_CRITIQUE_MODEL = "o3"

PASSIVE_ACTION_RE = re.compile(r"^(Confirm|Verify|Check|Make sure)\b")


class RootCause(Enum):
    SCREEN_MISUNDERSTANDING = "a"
    KNOWLEDGE_GAP = "b"
    SYNTAX_ERROR = "c"
    ENVIRONMENT_OR_PERMISSION = "d"
    OTHER = "e"
    INVALID_ASSUMPTION = "f"
    TRANSIENT_FAILURE = "g"
    STEP_ORDER = "h"
    MISSING_PRECONDITION = "i"


ROOT_CAUSE_LABELS = {
    RootCause.SCREEN_MISUNDERSTANDING: "Output/screen misunderstanding",
    RootCause.KNOWLEDGE_GAP: "Knowledge gap",
    RootCause.SYNTAX_ERROR: "Command / code / syntax error",
    RootCause.ENVIRONMENT_OR_PERMISSION: "Environment or permission issue",
    RootCause.OTHER: "Other",
    RootCause.INVALID_ASSUMPTION: "Invalid assumption",
    RootCause.TRANSIENT_FAILURE: "External transient failure",
    RootCause.STEP_ORDER: "Step order issue",
    RootCause.MISSING_PRECONDITION: "Missing precondition",
}

_BY_LETTER = {cause.value: cause for cause in RootCause}


class MalformedCritique(RetrospectError):
    """Model output does not follow the five-section grammar."""

    def __init__(self, message: str, *, section: str | None = None):
        prefix = f"SECTION {section}: " if section else ""
        super().__init__(f"{prefix}{message}")
        self.section = section


class EmptyInput(RetrospectError):
    """A required prompt input is empty."""


def _single_line(name: str, text: str) -> None:
    if "\n" in text or "\r" in text:
        raise ValueError(f"{name} must be single-line")


@dataclass(frozen=True)
class CompletionAssessment:
    achieved: bool
    reason: str
    over_executed: bool = False
    over_reason: str = ""

    def __post_init__(self) -> None:
        _single_line("reason", self.reason)
        _single_line("over_reason", self.over_reason)


@dataclass(frozen=True)
class DeviationRow:
    """One mismatch between the plan and what actually happened.

    ``deviation_step`` of None marks a row that carries no deviation;
    such rows have no root causes, and vice versa.
    """

    deviation_step: int | None
    expected_action: str
    actual_action: str
    root_causes: frozenset[RootCause] = frozenset()

    def __post_init__(self) -> None:
        object.__setattr__(self, "root_causes", frozenset(self.root_causes))
        _single_line("expected_action", self.expected_action)
        _single_line("actual_action", self.actual_action)
        if (self.deviation_step is None) != (len(self.root_causes) == 0):
            raise ValueError("root_causes must be empty exactly when deviation_step is None")
        if self.deviation_step is not None and self.deviation_step < 0:
            raise ValueError("deviation_step must be >= 0")


class PlanChoice(Enum):
    ORIGINAL = "Original"
    ALTERNATIVE = "Alternative"


@dataclass(frozen=True)
class BetterChoice:
    choice: PlanChoice
    reason: str = ""

    def __post_init__(self) -> None:
        _single_line("reason", self.reason)


@dataclass(frozen=True)
class AlternativeAnalysis:
    attempted: bool
    descriptions: tuple[str, ...] = ()
    better: BetterChoice | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "descriptions", tuple(self.descriptions))
        for description in self.descriptions:
            _single_line("description", description)
        if not self.attempted and (self.descriptions or self.better is not None):
            raise ValueError("alternatives not attempted but descriptions/choice present")


@dataclass(frozen=True)
class Mitigation:
    cause: RootCause
    idea: str
    embodied_in_step: int

    def __post_init__(self) -> None:
        _single_line("idea", self.idea)
        if not self.idea.strip():
            raise ValueError("mitigation idea is empty")
        if self.embodied_in_step < 1:
            raise ValueError("embodied_in_step is 1-based")


@dataclass(frozen=True)
class CritiqueReport:
    completion: CompletionAssessment
    deviations: tuple[DeviationRow, ...]
    alternatives: AlternativeAnalysis
    mitigations: tuple[Mitigation, ...]
    refined_plan: KnowledgePlan

    def __post_init__(self) -> None:
        object.__setattr__(self, "deviations", tuple(self.deviations))
        object.__setattr__(self, "mitigations", tuple(self.mitigations))


@dataclass(frozen=True)
class Violation:
    """One broken report rule; violations are data, not errors."""

    rule: str
    location: str
    detail: str

    def __str__(self) -> str:
        return f"{self.rule} at {self.location}: {self.detail}"


# --- prompt ---------------------------------------------------------------

CRITIQUE_PROMPT_TEMPLATE = """INPUT
  Task Instruction: …
  Action List: …
  Original Plan: …

REQUIREMENTS
    • Follow the FIVE SECTION HEADERS below exactly.
    • SECTION E output style:
          1. **<Subtask>**:
             - <Concrete UI / CLI action(s) only>
             - Purpose: <<= 10-word reason>
    • If a field is not applicable, write “None” or “No deviation”.
    • If SECTION C judges an Alternative better, the final NEW PLAN must adopt it (or its key advantages).
    • Every Root Cause from SECTION B must have a mitigation explained in SECTION D and be implicitly addressed (not as a standalone step) in SECTION E.
    • Exclude passive “Confirm / Verify / Check / Make sure …” kinds of steps.
    • Visual inspections are assumed; do not list them.
    • If the Action List shows a dialog / branch / extra option that the Original Plan did not anticipate:
    - Treat it as a Deviation (Root Cause usually f) Invalid assumption).
    - If the Agent picked the wrong option, SECTION D must state the correct option and SECTION E must insert that corrected step.
    - If the Agent picked the right option, still add that step to SECTION E (it is an “added step”).
    - Any action shown to be unnecessary in the trajectory must be omitted from SECTION E (this is a “removed step”).

SECTION A. Task Completion
  Did the Agent achieve the task goal? (Yes / No)
  Reason.
  Did the Agent execute more than the instruction required? (Yes / No)
  Reason.

SECTION B. Deviation Analysis
  For every mismatch between an Original-Plan assumption and the actual screen/CLI output in Action List, record a Deviation row. Fill in ALL items, even if “No deviation”.
  • Deviation Step: <# or “None”>
  • Expected Action : …
  • Actual Action    : …
  • Root Cause (letters, commas allowed):
        a) Output/screen misunderstanding
        b) Knowledge gap
        c) Command / code / syntax error
        d) Environment or permission issue
        e) Other
        f) Invalid assumption
        g) External transient failure
        h) Step order issue
        i) Missing precondition

SECTION C. Alternative Approaches
  Did the Agent attempt any approach beyond the Original Plan? (Yes / No)
  If Yes:
      • Describe each approach briefly.
      • Which is better (Original / Alternative)? Why?
  If No: “No alternative approach tried.”

SECTION D. Mitigation & Rationale
  For every Root Cause from SECTION B, describe the preventive or corrective idea and mention which forthcoming step embodies it.
  Example:
      c) Syntax error → Add “lint before run” check (handled in Step 2).
      d) Permission → Verify sudo rights before executing installer (Step 5).
      f) Invalid assumption → Choose “Typical” in installer dialog (Step 2).

SECTION E. REFINED PLAN:
  REFINED PLAN:
      1. **<Subtask>**:
         - <Concrete action(s)>
         - Purpose: <Why this step?>
      2. **<Subtask>**:
         - <Concrete action(s)>
         - Purpose: …
      …
      up to 15 steps total.
  • No shell prompts (#, $).
  • Safeguards are implicit per SECTION D; do not list them as separate lines.
  • Newly added corrective steps must appear in the proper sequence among Steps 1-15; actions deemed unnecessary must not appear here."""

_SLOT_LINES = {
    "instruction": "  Task Instruction: …",
    "action_list": "  Action List: …",
    "plan": "  Original Plan: …",
}


def _fill_slot(template: str, slot_line: str, value: str) -> str:
    label = slot_line[: slot_line.index("…")].rstrip()
    if "\n" in value:
        replacement = f"{label}\n{value.rstrip()}"
    else:
        replacement = f"{label} {value}"
    return template.replace(slot_line, replacement, 1)


def build_critique_prompt(
    instruction: str,
    action_list: str,
    original_plan: KnowledgePlan,
    *,
    model_tag: str = DEFAULT_CRITIQUE_MODEL,
    temperature: float = 0.0,
    max_output: int | None = None,
    feedback: str | None = None,
) -> CompletionRequest:
    """Fill the critique template's three INPUT slots.

    ``feedback`` appends a corrective note (used for the one bounded
    reprompt after a rule-violating reply).
    """
    if not action_list.strip():
        raise EmptyInput("action list is empty")
    text = CRITIQUE_PROMPT_TEMPLATE
    text = _fill_slot(text, _SLOT_LINES["instruction"], instruction)
    text = _fill_slot(text, _SLOT_LINES["action_list"], action_list)
    text = _fill_slot(text, _SLOT_LINES["plan"], render_plan(original_plan))
    if feedback:
        text += (
            "\n\nFEEDBACK\nYour previous output broke the rules listed below. "
            "Produce the complete corrected output, following the FIVE SECTION HEADERS exactly.\n"
            + feedback
        )
    message = ChatMessage(role=Role.USER, parts=(TextPart(text),))
    kwargs = {} if max_output is None else {"max_output": max_output}
    return CompletionRequest(messages=(message,), model_tag=model_tag, temperature=temperature, **kwargs)


# --- parsing ---------------------------------------------------------------

_SECTION_HEADER_RE = re.compile(r"^\s*[#*]*\s*SECTION\s+([A-E])\b")
_YES_NO_TEMPLATE_RE = re.compile(r"\(\s*Yes\s*/\s*No\s*\)", re.IGNORECASE)
_CHOICE_TEMPLATE_RE = re.compile(r"\(\s*Original\s*/\s*Alternative\s*\)", re.IGNORECASE)
_REASON_LINE_RE = re.compile(r"^\s*[-•*]?\s*\**Reason\**\s*[:.]\s*(.*)$")
_DEVIATION_FIELD_RE = re.compile(r"^\s*[-•*]?\s*\**(Deviation Step|Expected Action|Actual Action|Root Cause)\b[^:]*\**\s*:\s*(.*)$")
_MITIGATION_LINE_RE = re.compile(r"^\s*[-•*]?\s*\(?([a-zA-Z])\)\s*(.*)$")
_MITIGATION_STEP_SUFFIX_RE = re.compile(r"\s*\(\s*(?:handled in\s+)?Step\s+(\d+)\s*\)\s*\.?\s*$", re.IGNORECASE)
_STEP_MENTION_RE = re.compile(r"\bStep\s+(\d+)\b", re.IGNORECASE)
_APPROACH_BULLET_RE = re.compile(r"^\s*[-•*]\s*(?:Approach\s*:\s*)?(.*)$")
_BETTER_LINE_RE = re.compile(r"^\s*[-•*]?\s*\**Which is better\b", re.IGNORECASE)
_REFINED_MARKER_RE = re.compile(r"^\s*\**\s*REFINED PLAN\s*:?\s*\**\s*$", re.IGNORECASE)

_NONE_TOKENS = {"", "none", "no deviation", "n/a"}


def _is_none_text(value: str) -> bool:
    return value.strip().strip(".").strip("“”\"'").lower() in _NONE_TOKENS


def _split_sections(text: str) -> dict[str, str]:
    sections: dict[str, list[str]] = {}
    order: list[str] = []
    current: str | None = None
    for line in text.splitlines():
        match = _SECTION_HEADER_RE.match(line)
        if match:
            letter = match.group(1)
            if letter in sections:
                raise MalformedCritique("duplicate header", section=letter)
            sections[letter] = []
            order.append(letter)
            current = letter
            continue
        if current is not None:
            sections[current].append(line)
    for letter in "ABCDE":
        if letter not in sections:
            raise MalformedCritique("missing section header", section=letter)
    if order != sorted(order):
        raise MalformedCritique(f"section headers out of order: {' '.join(order)}")
    return {letter: "\n".join(body) for letter, body in sections.items()}


def _find_yes_no(block: str, anchor: str, *, section: str, stop_anchor: str | None = None) -> bool:
    lower = block.lower()
    start = lower.find(anchor.lower())
    if start < 0:
        raise MalformedCritique(f"missing question {anchor!r}", section=section)
    end = len(block)
    if stop_anchor:
        stop = lower.find(stop_anchor.lower(), start + len(anchor))
        if stop >= 0:
            end = stop
    tail = _YES_NO_TEMPLATE_RE.sub(" ", block[start + len(anchor) : end])
    answer = re.search(r"\b(yes|no)\b", tail, re.IGNORECASE)
    if not answer:
        raise MalformedCritique(f"missing Yes/No answer for {anchor!r}", section=section)
    return answer.group(1).lower() == "yes"


def _parse_section_a(block: str) -> CompletionAssessment:
    achieved = _find_yes_no(
        block, "achieve the task goal", section="A", stop_anchor="more than the instruction required"
    )
    over = _find_yes_no(block, "more than the instruction required", section="A")
    reasons = [match.group(1).strip() for line in block.splitlines() if (match := _REASON_LINE_RE.match(line))]
    reason = reasons[0] if reasons else ""
    over_reason = reasons[1] if len(reasons) > 1 else ""
    return CompletionAssessment(achieved=achieved, reason=reason, over_executed=over, over_reason=over_reason)


def _parse_root_causes(value: str) -> frozenset[RootCause]:
    if _is_none_text(value):
        return frozenset()
    causes = set()
    for token in value.split(","):
        token = token.strip()
        if not token:
            continue
        letter_match = re.match(r"^\(?([a-zA-Z])\)?(?:\b|$)", token)
        if not letter_match:
            raise MalformedCritique(f"unreadable root-cause token {token!r}", section="B")
        letter = letter_match.group(1).lower()
        if letter not in _BY_LETTER:
            raise MalformedCritique(f"unknown root-cause letter {letter!r}", section="B")
        causes.add(_BY_LETTER[letter])
    if not causes:
        raise MalformedCritique(f"empty root-cause list {value!r}", section="B")
    return frozenset(causes)


def _parse_section_b(block: str) -> tuple[DeviationRow, ...]:
    raw_rows: list[dict[str, str]] = []
    for line in block.splitlines():
        match = _DEVIATION_FIELD_RE.match(line)
        if not match:
            continue
        label, value = match.group(1), match.group(2).strip()
        if label == "Deviation Step":
            raw_rows.append({"step": value})
        elif raw_rows:
            key = {"Expected Action": "expected", "Actual Action": "actual", "Root Cause": "causes"}[label]
            raw_rows[-1][key] = value

    rows: list[DeviationRow] = []
    for raw in raw_rows:
        step_text = raw.get("step", "")
        if _is_none_text(step_text):
            step = None
        else:
            digits = re.search(r"\d+", step_text)
            if not digits:
                raise MalformedCritique(f"unreadable deviation step {step_text!r}", section="B")
            step = int(digits.group(0))
        causes = _parse_root_causes(raw.get("causes", ""))
        expected = raw.get("expected", "")
        actual = raw.get("actual", "")
        if step is None and not causes and _is_none_text(expected) and _is_none_text(actual):
            continue  # placeholder "No deviation" row
        try:
            rows.append(
                DeviationRow(
                    deviation_step=step,
                    expected_action=expected,
                    actual_action=actual,
                    root_causes=causes,
                )
            )
        except ValueError as exc:
            raise MalformedCritique(str(exc), section="B") from exc
    return tuple(rows)


def _parse_section_c(block: str) -> AlternativeAnalysis:
    attempted = _find_yes_no(
        block, "attempt any approach beyond the Original Plan", section="C", stop_anchor="Which is better"
    )
    if not attempted:
        return AlternativeAnalysis(attempted=False)
    descriptions: list[str] = []
    better: BetterChoice | None = None
    lines = block.splitlines()
    for i, line in enumerate(lines):
        if _BETTER_LINE_RE.match(line):
            cleaned = _CHOICE_TEMPLATE_RE.sub(" ", line)
            choice_match = re.search(r"\b(Original|Alternative)\b", cleaned, re.IGNORECASE)
            if not choice_match:
                raise MalformedCritique("missing Original/Alternative choice", section="C")
            reason = ""
            for rest in lines[i + 1 :]:
                reason_match = _REASON_LINE_RE.match(rest)
                if reason_match:
                    reason = reason_match.group(1).strip()
                    break
            better = BetterChoice(choice=PlanChoice(choice_match.group(1).capitalize()), reason=reason)
            break
        bullet = _APPROACH_BULLET_RE.match(line)
        if bullet and bullet.group(1).strip():
            descriptions.append(bullet.group(1).strip())
    return AlternativeAnalysis(attempted=True, descriptions=tuple(descriptions), better=better)


def _parse_section_d(block: str) -> tuple[Mitigation, ...]:
    content = [line for line in block.splitlines() if line.strip()]
    if len(content) == 1 and _is_none_text(content[0]):
        return ()
    mitigations: list[Mitigation] = []
    for line in content:
        if _is_none_text(line):
            continue
        match = _MITIGATION_LINE_RE.match(line)
        if not match:
            raise MalformedCritique(f"unreadable mitigation line {line.strip()!r}", section="D")
        letter = match.group(1).lower()
        if letter not in _BY_LETTER:
            raise MalformedCritique(f"unknown root-cause letter {letter!r}", section="D")
        rest = match.group(2).strip()
        if "→" in rest:
            rest = rest.split("→", 1)[1].strip()
        elif "->" in rest:
            rest = rest.split("->", 1)[1].strip()
        suffix = _MITIGATION_STEP_SUFFIX_RE.search(rest)
        if suffix:
            step = int(suffix.group(1))
            idea = rest[: suffix.start()].strip()
        else:
            mention = _STEP_MENTION_RE.search(rest)
            if not mention:
                raise MalformedCritique(f"mitigation lacks a step reference: {line.strip()!r}", section="D")
            step = int(mention.group(1))
            idea = rest
        if not idea:
            raise MalformedCritique(f"mitigation lacks an idea: {line.strip()!r}", section="D")
        mitigations.append(Mitigation(cause=_BY_LETTER[letter], idea=idea, embodied_in_step=step))
    return tuple(mitigations)


def _parse_section_e(block: str) -> KnowledgePlan:
    lines = block.splitlines()
    start = 0
    while start < len(lines) and (not lines[start].strip() or _REFINED_MARKER_RE.match(lines[start])):
        start += 1
    body = "\n".join(lines[start:])
    try:
        return parse_plan(body)
    except MalformedPlan as exc:
        raise MalformedCritique(f"refined plan invalid: {exc}", section="E") from exc


def parse_critique_output(text: str) -> CritiqueReport:
    """Parse a five-section reply into a :class:`CritiqueReport`.

    "None" / "No deviation" placeholders normalize to empty structures.
    Raises :class:`MalformedCritique` with the offending section.
    """
    sections = _split_sections(text)
    return CritiqueReport(
        completion=_parse_section_a(sections["A"]),
        deviations=_parse_section_b(sections["B"]),
        alternatives=_parse_section_c(sections["C"]),
        mitigations=_parse_section_d(sections["D"]),
        refined_plan=_parse_section_e(sections["E"]),
    )


# --- rendering -------------------------------------------------------------


def _yes_no(flag: bool) -> str:
    return "Yes" if flag else "No"


def render_critique_report(report: CritiqueReport) -> str:
    """Canonical serialization; round-trip stable with :func:`parse_critique_output`."""
    out: list[str] = []
    out.append("SECTION A. Task Completion")
    out.append(f"Did the Agent achieve the task goal? {_yes_no(report.completion.achieved)}")
    out.append(f"Reason: {report.completion.reason}")
    out.append(f"Did the Agent execute more than the instruction required? {_yes_no(report.completion.over_executed)}")
    out.append(f"Reason: {report.completion.over_reason}")
    out.append("")

    out.append("SECTION B. Deviation Analysis")
    if report.deviations:
        for row in report.deviations:
            step = "None" if row.deviation_step is None else str(row.deviation_step)
            causes = ", ".join(sorted(c.value for c in row.root_causes)) if row.root_causes else "None"
            out.append(f"- Deviation Step: {step}")
            out.append(f"- Expected Action: {row.expected_action}")
            out.append(f"- Actual Action: {row.actual_action}")
            out.append(f"- Root Cause: {causes}")
    else:
        out.append("- Deviation Step: None")
        out.append("- Expected Action: No deviation")
        out.append("- Actual Action: No deviation")
        out.append("- Root Cause: None")
    out.append("")

    out.append("SECTION C. Alternative Approaches")
    out.append(f"Did the Agent attempt any approach beyond the Original Plan? {_yes_no(report.alternatives.attempted)}")
    if report.alternatives.attempted:
        for description in report.alternatives.descriptions:
            out.append(f"- Approach: {description}")
        if report.alternatives.better is not None:
            out.append(f"Which is better (Original / Alternative)? {report.alternatives.better.choice.value}")
            out.append(f"Reason: {report.alternatives.better.reason}")
    else:
        out.append("No alternative approach tried.")
    out.append("")

    out.append("SECTION D. Mitigation & Rationale")
    if report.mitigations:
        for mitigation in report.mitigations:
            out.append(
                f"{mitigation.cause.value}) {ROOT_CAUSE_LABELS[mitigation.cause]} → "
                f"{mitigation.idea} (handled in Step {mitigation.embodied_in_step})."
            )
    else:
        out.append("None")
    out.append("")

    out.append("SECTION E. REFINED PLAN:")
    out.append("REFINED PLAN:")
    out.append(render_plan(report.refined_plan).rstrip("\n"))
    return "\n".join(out) + "\n"


def critique_digest(report: CritiqueReport) -> str:
    """Content hash of the canonical report text."""
    return content_hash(render_critique_report(report).encode("utf-8"))


# --- validation ------------------------------------------------------------


def validate_report(report: CritiqueReport) -> tuple[Violation, ...]:
    """Check report rules; returns violations (empty when fully conforming)."""
    violations: list[Violation] = []

    covered = {mitigation.cause for mitigation in report.mitigations}
    seen: set[RootCause] = set()
    for row in report.deviations:
        for cause in sorted(row.root_causes, key=lambda c: c.value):
            if cause in seen:
                continue
            seen.add(cause)
            if cause not in covered:
                violations.append(
                    Violation(
                        rule="missing-mitigation",
                        location="SECTION D",
                        detail=f"root cause {cause.value}) {ROOT_CAUSE_LABELS[cause]} has no mitigation",
                    )
                )

    for step in report.refined_plan.steps:
        for action in step.actions:
            if PASSIVE_ACTION_RE.match(action):
                violations.append(
                    Violation(
                        rule="passive-step",
                        location=f"plan step {step.number}",
                        detail=f"passive action {action!r}",
                    )
                )
    return tuple(violations)


# --- plan diffing ----------------------------------------------------------


class DiffKind(Enum):
    ADDED = "added"
    REMOVED = "removed"
    MODIFIED = "modified"


@dataclass(frozen=True)
class PlanDiffEntry:
    kind: DiffKind
    subtask: str
    old_number: int | None = None
    new_number: int | None = None


def diff_plans(old: KnowledgePlan, new: KnowledgePlan) -> tuple[PlanDiffEntry, ...]:
    """Align steps by exact subtask title; report Added/Removed/Modified steps."""
    unmatched_old = list(old.steps)
    entries: list[PlanDiffEntry] = []
    for new_step in new.steps:
        match = next((s for s in unmatched_old if s.subtask == new_step.subtask), None)
        if match is None:
            entries.append(PlanDiffEntry(kind=DiffKind.ADDED, subtask=new_step.subtask, new_number=new_step.number))
            continue
        unmatched_old.remove(match)
        if match.actions != new_step.actions or match.purpose != new_step.purpose:
            entries.append(
                PlanDiffEntry(
                    kind=DiffKind.MODIFIED,
                    subtask=new_step.subtask,
                    old_number=match.number,
                    new_number=new_step.number,
                )
            )
    for old_step in unmatched_old:
        entries.append(PlanDiffEntry(kind=DiffKind.REMOVED, subtask=old_step.subtask, old_number=old_step.number))
    return tuple(entries)


# --- evolution -------------------------------------------------------------


def _parse_and_validate(text: str) -> tuple[CritiqueReport | None, str | None]:
    try:
        report = parse_critique_output(text)
    except MalformedCritique as exc:
        return None, f"- {exc}"
    violations = validate_report(report)
    if violations:
        return None, "\n".join(f"- {violation}" for violation in violations)
    return report, None


def evolve(
    record: KnowledgeRecord,
    sequence: ObjectiveActionSequence,
    gateway: Gateway,
    *,
    model_tag: str = DEFAULT_CRITIQUE_MODEL,
    temperature: float = 0.0,
    max_output: int | None = None,
    producer_model: str | None = None,
) -> tuple[KnowledgeRecord, CritiqueReport]:
    """Critique one run and produce the next knowledge version.

    Builds the prompt from the record's instruction, the rendered action
    list, and the current plan; parses and validates the reply; on any
    rule break, reprompts once with the problems appended, then fails
    with :class:`MalformedCritique`. A clean report becomes a new
    EVOLVED record at version + 1.
    """
    if record.task_id != sequence.task_id:
        raise ValueError(f"record task {record.task_id!r} does not match sequence task {sequence.task_id!r}")
    action_list = render_action_list(sequence)
    prompt_kwargs = dict(model_tag=model_tag, temperature=temperature, max_output=max_output)
    request = build_critique_prompt(record.instruction, action_list, record.plan, **prompt_kwargs)
    result = gateway.complete(request)
    report, problems = _parse_and_validate(result.text)
    if report is None:
        logger.warning("critique output for task %s broke rules; reprompting:\n%s", record.task_id, problems)
        retry = build_critique_prompt(
            record.instruction, action_list, record.plan, feedback=problems, **prompt_kwargs
        )
        result = gateway.complete(retry)
        report, problems = _parse_and_validate(result.text)
        if report is None:
            raise MalformedCritique(f"critique output invalid after corrective reprompt:\n{problems}")

    evolved = KnowledgeRecord(
        task_id=record.task_id,
        instruction=record.instruction,
        plan=report.refined_plan,
        provenance=Provenance.EVOLVED,
        version=record.version + 1,
        parent_version=record.version,
        producer_model=producer_model if producer_model is not None else record.producer_model,
        critique_digest=critique_digest(report),
    )
    return evolved, report
