"""Trajectory selection among repeated runs, and the selection success rate.

Repeated runs of the same task produce different trajectories; one must
be chosen as the critique input. Two strategies ship: seeded uniform
random choice, and completion-based choice where a model scores three
(action list, plan) pairs and names the best. Selection quality is
measured afterwards by SSR = N_succ / N_solv over tasks where at least
one repeat succeeded.
"""

from __future__ import annotations

import logging
import random
import re
from dataclasses import dataclass
from fractions import Fraction
from typing import Iterable, Mapping, Sequence

from .errors import RetrospectError
from .gateway import ChatMessage, CompletionRequest, Gateway, Role, TextPart
from .model import KnowledgePlan
from .plans import render_plan

logger = logging.getLogger(__name__)

DEFAULT_SELECTION_MODEL = "o3"
COMPLETION_SELECTION_ARITY = 3


class EmptyCandidates(RetrospectError):
    """select_random called with zero candidates."""


class WrongArity(RetrospectError):
    """Completion-based selection requires exactly three candidates."""


class MalformedSelection(RetrospectError):
    """Model output lacks the per-pair scores or a valid best-pair number."""


def select_random(n: int, seed: int) -> int:
    """Uniform choice of an index in 0..n-1; same (n, seed) always gives the same index."""
    if n < 1:
        raise EmptyCandidates("no candidates to select from")
    return random.Random(seed).randrange(n)


@dataclass(frozen=True)
class SelectionCandidate:
    index: int
    action_list: str
    plan: KnowledgePlan

    def __post_init__(self) -> None:
        if self.index not in (1, 2, 3):
            raise ValueError("candidate index must be 1, 2, or 3")


@dataclass(frozen=True)
class SelectionResult:
    scores: Mapping[int, int]
    best: int
    analysis: str

    def __post_init__(self) -> None:
        object.__setattr__(self, "scores", dict(self.scores))
        if self.best not in (1, 2, 3):
            raise ValueError("best pair must be 1, 2, or 3")
        if any(not 0 <= score <= 10 for score in self.scores.values()):
            raise ValueError("scores must be within 0..10")


SELECTION_PROMPT_TEMPLATE = """INPUT:
1. Task Instruction   : The instruction for the task.
2. Action_List1: The list1 of actions performed by a linux user.
3. Golden_Plan1: The plan1 that the user is trying to achieve to solve a task.
4. Action_List2: The list2 of actions performed by a linux user.
5. Golden_Plan2: The plan2 that the user is trying to achieve to solve a task.
6. Action_List3: The list3 of actions performed by a linux user.
7. Golden_Plan3: The plan3 that the user is trying to achieve to solve a task.

REQUIREMENTS:
You need to find out the best action_list and golden_plan pair that is most likely completed or closest to completion.
Your output should include the following information:
- <Analysis and Score>: Analysis and Give your score(0 to 10) for each pair, 10 is the best, 0 is the worst.
- <Best Pair>: A number in [1, 2, 3] indicating the best action_list and golden_plan pair."""

CORRECTIVE_SUFFIX = (
    "\n\nYour previous reply did not follow the output contract. Respond again with a "
    "line \"Score: <0-10>\" for each of the three pairs in order, then a final line "
    "\"Best Pair: <1|2|3>\"."
)

_SLOT_PREFIXES = [
    "1. Task Instruction   :",
    "2. Action_List1:",
    "3. Golden_Plan1:",
    "4. Action_List2:",
    "5. Golden_Plan2:",
    "6. Action_List3:",
    "7. Golden_Plan3:",
]

_SLOT_LINES = {
    "1. Task Instruction   :": "1. Task Instruction   : The instruction for the task.",
    "2. Action_List1:": "2. Action_List1: The list1 of actions performed by a linux user.",
    "3. Golden_Plan1:": "3. Golden_Plan1: The plan1 that the user is trying to achieve to solve a task.",
    "4. Action_List2:": "4. Action_List2: The list2 of actions performed by a linux user.",
    "5. Golden_Plan2:": "5. Golden_Plan2: The plan2 that the user is trying to achieve to solve a task.",
    "6. Action_List3:": "6. Action_List3: The list3 of actions performed by a linux user.",
    "7. Golden_Plan3:": "7. Golden_Plan3: The plan3 that the user is trying to achieve to solve a task.",
}


def _fill(template: str, prefix: str, value: str) -> str:
    slot_line = _SLOT_LINES[prefix]
    if "\n" in value:
        replacement = f"{prefix}\n{value.rstrip()}"
    else:
        replacement = f"{prefix} {value}"
    return template.replace(slot_line, replacement, 1)


def build_selection_prompt(
    instruction: str,
    candidates: Sequence[SelectionCandidate],
    *,
    model_tag: str = DEFAULT_SELECTION_MODEL,
    temperature: float = 0.0,
    max_output: int | None = None,
    corrective: bool = False,
) -> CompletionRequest:
    """Fill the seven INPUT slots in order: instruction, then (action list, plan) x3."""
    candidates = list(candidates)
    if len(candidates) != COMPLETION_SELECTION_ARITY:
        raise WrongArity(f"completion-based selection needs exactly 3 candidates, got {len(candidates)}")
    if [candidate.index for candidate in candidates] != [1, 2, 3]:
        raise WrongArity("candidates must be ordered with indices 1, 2, 3")

    text = SELECTION_PROMPT_TEMPLATE
    values = [instruction]
    for candidate in candidates:
        values.append(candidate.action_list)
        values.append(render_plan(candidate.plan))
    for prefix, value in zip(_SLOT_PREFIXES, values):
        text = _fill(text, prefix, value)
    if corrective:
        text += CORRECTIVE_SUFFIX
    message = ChatMessage(role=Role.USER, parts=(TextPart(text),))
    kwargs = {} if max_output is None else {"max_output": max_output}
    return CompletionRequest(messages=(message,), model_tag=model_tag, temperature=temperature, **kwargs)


_SCORE_RE = re.compile(r"Score\s*[:=]\s*\**\s*(\d{1,2})")
_BEST_PAIR_RE = re.compile(r"Best\s*Pair\**\s*[:=]?\s*\**\s*\[?(\d+)\]?", re.IGNORECASE)


def parse_selection_output(text: str) -> SelectionResult:
    """Extract the three per-pair scores and the best-pair number; analysis kept verbatim."""
    scores = [int(match) for match in _SCORE_RE.findall(text)]
    if len(scores) != COMPLETION_SELECTION_ARITY:
        raise MalformedSelection(f"expected 3 scores, found {len(scores)}")
    if any(not 0 <= score <= 10 for score in scores):
        raise MalformedSelection(f"score out of range 0..10: {scores}")
    best_match = _BEST_PAIR_RE.search(text)
    if not best_match:
        raise MalformedSelection("missing Best Pair line")
    best = int(best_match.group(1))
    if best not in (1, 2, 3):
        raise MalformedSelection(f"best pair {best} outside 1..3")
    return SelectionResult(scores={i + 1: score for i, score in enumerate(scores)}, best=best, analysis=text)


def select_completion(
    instruction: str,
    candidates: list[SelectionCandidate],
    gateway: Gateway,
    *,
    model_tag: str = DEFAULT_SELECTION_MODEL,
    temperature: float = 0.0,
    max_output: int | None = None,
    fallback_seed: int = 0,
) -> int:
    """Model-judged best pair (1-based).

    One corrective reprompt on malformed output; if still malformed,
    falls back to a seeded random choice with a logged warning rather
    than failing the pipeline.
    """
    request = build_selection_prompt(
        instruction, candidates, model_tag=model_tag, temperature=temperature, max_output=max_output
    )
    result = gateway.complete(request)
    try:
        return parse_selection_output(result.text).best
    except MalformedSelection as first_error:
        logger.warning("malformed selection output (%s); reprompting", first_error)
    retry = build_selection_prompt(
        instruction, candidates, model_tag=model_tag, temperature=temperature, max_output=max_output, corrective=True
    )
    result = gateway.complete(retry)
    try:
        return parse_selection_output(result.text).best
    except MalformedSelection as second_error:
        fallback = select_random(COMPLETION_SELECTION_ARITY, fallback_seed) + 1
        logger.warning(
            "selection output still malformed (%s); falling back to seeded random choice %d", second_error, fallback
        )
        return fallback


@dataclass(frozen=True)
class SsrRecord:
    """Per-task selection outcome: did the pick succeed, did anything succeed."""

    selected_succeeded: bool
    any_succeeded: bool

    def __post_init__(self) -> None:
        if self.selected_succeeded and not self.any_succeeded:
            raise ValueError("selected_succeeded implies any_succeeded")


@dataclass(frozen=True)
class SsrResult:
    n_succ: int
    n_solv: int

    @property
    def rate(self) -> Fraction | None:
        """Exact SSR, or None when no task was solvable (undefined)."""
        if self.n_solv == 0:
            return None
        return Fraction(self.n_succ, self.n_solv)

    def __str__(self) -> str:
        if self.rate is None:
            return "SSR undefined (no solvable tasks)"
        return f"SSR {self.n_succ}/{self.n_solv} = {float(self.rate):.4f}"


def compute_ssr(records: Iterable[SsrRecord]) -> SsrResult:
    """Count solvable tasks and successful selections; exact ratio via SsrResult.rate."""
    n_succ = n_solv = 0
    for record in records:
        if record.any_succeeded:
            n_solv += 1
        if record.selected_succeeded:
            n_succ += 1
    return SsrResult(n_succ=n_succ, n_solv=n_solv)
