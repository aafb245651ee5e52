"""Subgoal and plan data model, plus the textual template the planner model emits.

Subgoals are written one per line as ``(Action, object)``, or
``(Put, object, receptacle)`` for placement. Action names are matched
case-insensitively (internal spaces/underscores tolerated, so ``pick up``
parses as ``Pickup``); object names are normalized to single lowercase tokens
with no internal whitespace (``desk lamp`` becomes ``desklamp``).
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from enum import Enum
from typing import Iterable, Optional


class PlanParseError(ValueError):
    """A line (or completion) violates the subgoal template."""


class UnknownAction(PlanParseError):
    pass


class ArityMismatch(PlanParseError):
    pass


class EmptyObject(PlanParseError):
    pass


class NoSubgoalsFound(PlanParseError):
    def __init__(self, skipped_lines: int):
        super().__init__(f"no subgoal lines found ({skipped_lines} lines skipped)")
        self.skipped_lines = skipped_lines


class UnknownObject(ValueError):
    def __init__(self, name: str):
        super().__init__(f"object not in scenario vocabulary: {name!r}")
        self.name = name


class ActionKind(str, Enum):
    PICKUP = "Pickup"
    PUT = "Put"
    TOGGLE_ON = "ToggleOn"
    TOGGLE_OFF = "ToggleOff"
    OPEN = "Open"
    CLOSE = "Close"
    SLICE = "Slice"
    NAVIGATE = "Navigate"


_ACTION_LOOKUP = {kind.value.lower(): kind for kind in ActionKind}

# Optional list index ("1." / "2)"), then exactly one parenthesized field list.
_LINE_RE = re.compile(r"^\s*(?:\d+\s*[.)]\s*)?\((?P<body>[^()]*)\)\s*$")


def _normalize_token(token: str) -> str:
    return re.sub(r"[\s_-]+", "", token.strip().lower())


@dataclass(frozen=True)
class Subgoal:
    """One controller-executable step: action, target object, optional receptacle.

    A receptacle is present exactly when the action is Put.
    """

    action: ActionKind
    object: str
    receptacle: Optional[str] = None

    def __post_init__(self) -> None:
        if not self.object:
            raise EmptyObject("subgoal object must be a non-empty token")
        if self.receptacle is not None and not self.receptacle:
            raise EmptyObject("subgoal receptacle must be a non-empty token")
        if self.action is ActionKind.PUT and self.receptacle is None:
            raise ArityMismatch("Put requires a receptacle")
        if self.action is not ActionKind.PUT and self.receptacle is not None:
            raise ArityMismatch(f"{self.action.value} does not take a receptacle")


@dataclass(frozen=True)
class Plan:
    """An ordered subgoal sequence, tagged with how it came to be."""

    steps: tuple[Subgoal, ...]
    origin: str = "initial"  # "initial" or "replanned"
    replanned_at_step: Optional[int] = None


def parse_subgoal(line: str) -> Subgoal:
    """Parse one template line into a Subgoal.

    Raises UnknownAction, ArityMismatch or EmptyObject for template
    violations, and bare PlanParseError when the line has no template shape.
    """
    match = _LINE_RE.match(line)
    if not match:
        raise PlanParseError(f"not a subgoal template line: {line!r}")
    fields = [part.strip() for part in match.group("body").split(",")]
    if len(fields) < 2 or len(fields) > 3:
        raise ArityMismatch(f"expected 2 or 3 fields, got {len(fields)}: {line!r}")
    action_key = _normalize_token(fields[0])
    action = _ACTION_LOOKUP.get(action_key)
    if action is None:
        raise UnknownAction(f"unknown action {fields[0]!r}")
    obj = _normalize_token(fields[1])
    receptacle = _normalize_token(fields[2]) if len(fields) == 3 else None
    return Subgoal(action, obj, receptacle)


def parse_plan(raw: str, origin: str = "initial",
               replanned_at_step: Optional[int] = None) -> tuple[Plan, int]:
    """Extract every template line from a free-form completion, in order.

    Non-template lines are skipped and counted (blank lines are ignored
    outright); the count is returned alongside the plan. Raises
    NoSubgoalsFound when not a single line parses.
    """
    steps: list[Subgoal] = []
    skipped = 0
    for line in raw.splitlines():
        if not line.strip():
            continue
        try:
            steps.append(parse_subgoal(line))
        except PlanParseError:
            skipped += 1
    if not steps:
        raise NoSubgoalsFound(skipped)
    return Plan(tuple(steps), origin, replanned_at_step), skipped


def render_subgoal(sg: Subgoal) -> str:
    """Canonical template form; parse_subgoal(render_subgoal(sg)) == sg."""
    if sg.receptacle is not None:
        return f"({sg.action.value}, {sg.object}, {sg.receptacle})"
    return f"({sg.action.value}, {sg.object})"


def render_plan(plan: Plan) -> str:
    return "\n".join(render_subgoal(sg) for sg in plan.steps)


def validate_subgoal(sg: Subgoal, vocab: Iterable[str]) -> None:
    """Check that the subgoal's object (and receptacle) are known names."""
    known = set(vocab)
    if not known:
        raise ValueError("object vocabulary must be non-empty")
    if sg.object not in known:
        raise UnknownObject(sg.object)
    if sg.receptacle is not None and sg.receptacle not in known:
        raise UnknownObject(sg.receptacle)
