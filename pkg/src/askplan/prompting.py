"""Prompt generators for decomposition, planning, validity, feedback and
re-planning, implemented as substitution over versioned template files.

Templates live in the package's ``prompts/`` directory, one file per
generator, with a ``[system]`` section followed by a ``[user]`` section.
Placeholders are written ``{name}`` and substituted literally; every
placeholder appearing in a template must belong to that template's declared
set, which is checked at load time.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from enum import Enum
from functools import lru_cache
from importlib import resources

from .plans import Plan, Subgoal, render_subgoal


class EmptyTranscript(ValueError):
    pass


class TemplateError(ValueError):
    pass


TEMPLATE_PLACEHOLDERS: dict[str, frozenset[str]] = {
    "std": frozenset({"instruction"}),
    "tp": frozenset({"instruction", "QA"}),
    "tp_no_std": frozenset({"instruction"}),
    "std_cot": frozenset({"instruction"}),
    "validity": frozenset({"subgoal"}),
    "feedback": frozenset({"subgoal", "object", "validity"}),
    "replan": frozenset({"instruction", "initial high-level plan",
                         "observed_objects", "validity", "feedback"}),
}

_PLACEHOLDER_RE = re.compile(r"\{([A-Za-z_][A-Za-z0-9_ -]*)\}")


@dataclass(frozen=True)
class PromptTemplate:
    name: str
    system_text: str
    user_text: str
    placeholders: frozenset[str]


@dataclass(frozen=True)
class RenderedPrompt:
    system_text: str
    user_text: str


@dataclass(frozen=True)
class QATranscript:
    """Ordered (question, answer) turns; a lone answer with an empty question
    holds free-form decomposition text from the chain-of-thought variant."""

    turns: tuple[tuple[str, str], ...]


class Verdict(str, Enum):
    VALID = "valid"
    INVALID = "invalid"


@dataclass(frozen=True)
class Validity:
    verdict: Verdict
    raw: str


@dataclass(frozen=True)
class Feedback:
    raw: str

    def __post_init__(self) -> None:
        if not self.raw.strip():
            raise ValueError("feedback text must be non-empty")


@lru_cache(maxsize=None)
def load_template(name: str) -> PromptTemplate:
    declared = TEMPLATE_PLACEHOLDERS.get(name)
    if declared is None:
        raise TemplateError(f"unknown template {name!r}")
    text = resources.files("askplan").joinpath(f"prompts/{name}.txt").read_text("utf-8")
    match = re.match(r"\[system\]\n(?P<system>.*?)\n\[user\]\n(?P<user>.*)", text, re.DOTALL)
    if not match:
        raise TemplateError(f"template {name!r} lacks [system]/[user] sections")
    system_text = match.group("system").strip()
    user_text = match.group("user").strip()
    found = set(_PLACEHOLDER_RE.findall(user_text)) | set(_PLACEHOLDER_RE.findall(system_text))
    stray = found - declared
    if stray:
        raise TemplateError(f"template {name!r} has undeclared placeholders: {sorted(stray)}")
    return PromptTemplate(name, system_text, user_text, declared)


def _render(name: str, values: dict[str, str]) -> RenderedPrompt:
    template = load_template(name)
    missing = template.placeholders - values.keys()
    if missing:
        raise TemplateError(f"template {name!r} missing values for {sorted(missing)}")
    user_text = template.user_text
    system_text = template.system_text
    for key in sorted(template.placeholders, key=len, reverse=True):
        token = "{" + key + "}"
        user_text = user_text.replace(token, values[key])
        system_text = system_text.replace(token, values[key])
    return RenderedPrompt(system_text, user_text)


def format_transcript(qa: QATranscript) -> str:
    blocks = []
    for question, answer in qa.turns:
        if question:
            blocks.append(f"Q: {question}\nA: {answer}")
        else:
            blocks.append(answer)
    return "\n".join(blocks)


def gen_std_prompt(instruction: str) -> RenderedPrompt:
    """Self-questioning decomposition prompt for a raw instruction."""
    return _render("std", {"instruction": instruction})


def gen_cot_prompt(instruction: str) -> RenderedPrompt:
    """Ablation variant: step-by-step decomposition instead of self-QA."""
    return _render("std_cot", {"instruction": instruction})


def gen_tp_prompt(instruction: str, qa: QATranscript, cot: bool = False) -> RenderedPrompt:
    """Planning prompt fed with the decomposition transcript.

    With ``cot=True`` the transcript is free-form decomposition text rather
    than a conversation, and the surrounding wording changes accordingly.
    """
    if not qa.turns:
        raise EmptyTranscript("planning with a decomposition requires at least one turn")
    prompt = _render("tp", {"instruction": instruction, "QA": format_transcript(qa)})
    if cot:
        user_text = prompt.user_text.replace("Conversation:", "Decomposition:")
        user_text = user_text.replace(
            "Based on this conversation,", "Based on this step-by-step decomposition,")
        prompt = RenderedPrompt(prompt.system_text, user_text)
    return prompt


def gen_tp_no_std_prompt(instruction: str) -> RenderedPrompt:
    """Planning prompt for the no-decomposition ablation."""
    return _render("tp_no_std", {"instruction": instruction})


def gen_validity_prompt(sg: Subgoal) -> RenderedPrompt:
    return _render("validity", {"subgoal": render_subgoal(sg)})


def gen_feedback_prompt(sg: Subgoal, validity: Validity) -> RenderedPrompt:
    return _render("feedback", {
        "subgoal": render_subgoal(sg),
        "object": sg.object,
        "validity": validity.verdict.value.upper(),
    })


def gen_replan_prompt(feedback: Feedback, plan: Plan, observed: set[str] | frozenset[str],
                      validity: Validity, instruction: str) -> RenderedPrompt:
    """Re-planning prompt: instruction, current plan, observations, verdict, feedback."""
    if not plan.steps:
        raise ValueError("cannot request a revision of an empty plan")
    return _render("replan", {
        "instruction": instruction,
        "initial high-level plan": "\n".join(render_subgoal(sg) for sg in plan.steps),
        "observed_objects": ", ".join(sorted(set(observed))),
        "validity": validity.verdict.value.upper(),
        "feedback": feedback.raw,
    })


def classify_validity(raw: str) -> Validity:
    """Keyword rule: INVALID anywhere wins (checked first so VALID inside
    INVALID cannot be misread); bare VALID passes; anything else is treated
    as invalid so that re-planning is triggered rather than a blind retry."""
    upper = raw.upper()
    if "INVALID" in upper:
        verdict = Verdict.INVALID
    elif "VALID" in upper:
        verdict = Verdict.VALID
    else:
        verdict = Verdict.INVALID
    return Validity(verdict, raw)


DISCOVERY_DIMENSIONS: dict[str, tuple[str, ...]] = {
    "sub_tasks": ("sub-task", "subtask", "sub task"),
    "order": ("order", "sequence", "before", "first"),
    "objects": ("object", "receptacle"),
    "execution": ("execute", "step", "how"),
}


def discovery_coverage(qa: QATranscript) -> set[str]:
    """Lexical proxy for transcript quality: which discovery dimensions the
    questions touch, judged by keyword presence."""
    text = " ".join(question.lower() for question, _ in qa.turns)
    return {
        dimension
        for dimension, keywords in DISCOVERY_DIMENSIONS.items()
        if any(keyword in text for keyword in keywords)
    }
