"""Shared vocabulary: questions, tool calls, trajectories and the two
response grammars (``[TOOL]<SUBTASK>`` directives and ``TOOL[PARAMETER]``
invocations).

All value types are frozen dataclasses so they can be shared across threads.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from enum import Enum
from typing import Any

DEFAULT_MAX_STEPS = 10


class TumsError(Exception):
    """Base class for every error raised by this package."""


class ParseError(TumsError):
    """A model response did not follow the expected grammar."""


class NoDirectiveFound(ParseError):
    pass


class NoInvocationFound(ParseError):
    pass


class UnbalancedBrackets(NoInvocationFound):
    pass


class UnknownTool(ParseError):
    def __init__(self, name: str):
        super().__init__(f"unknown tool {name!r}")
        self.name = name


class UnknownDatasetClass(ParseError):
    pass


class Difficulty(Enum):
    EASY = "Easy"
    HARD = "Hard"


class DatasetClass(Enum):
    FLIGHT = "Flight"
    COFFEE = "Coffee"
    YELP = "Yelp"
    AIRBNB = "Airbnb"
    DBLP = "DBLP"
    SCIREX = "SciREX"
    AGENDA = "Agenda"
    GSM8K = "GSM8K"

    @classmethod
    def parse(cls, label: str) -> DatasetClass:
        """Case-insensitive lookup; ``flights`` is accepted as an alias."""
        key = label.strip().casefold()
        for member in cls:
            if member.value.casefold() == key:
                return member
        if key == "flights":
            return cls.FLIGHT
        raise UnknownDatasetClass(f"unknown dataset class {label!r}")

    @property
    def is_tabular(self) -> bool:
        return self in TABULAR_CLASSES


TABULAR_CLASSES = frozenset(
    {DatasetClass.FLIGHT, DatasetClass.COFFEE, DatasetClass.YELP, DatasetClass.AIRBNB}
)


class ToolName(Enum):
    LOAD_DB = "LoadDB"
    FILTER_DB = "FilterDB"
    GET_VALUE = "GetValue"
    CALCULATE = "Calculate"
    SQL_INTERPRETER = "SQLInterpreter"
    LOAD_GRAPH = "LoadGraph"
    NEIGHBOUR_CHECK = "NeighbourCheck"
    NODE_CHECK = "NodeCheck"
    EDGE_CHECK = "EdgeCheck"
    RETRIEVE_AGENDA = "RetrieveAgenda"
    RETRIEVE_SCIREX = "RetrieveScirex"
    CODE_TOOL = "CodeTool"
    FINISH = "Finish"

    @classmethod
    def parse(cls, name: str) -> ToolName:
        try:
            return _TOOLS_BY_NAME[name.strip()]
        except KeyError:
            raise UnknownTool(name) from None

    def __str__(self) -> str:
        return self.value


_TOOLS_BY_NAME = {t.value: t for t in ToolName}


class HintFlavor(Enum):
    STANDARD = "standard"
    PREFERENCE = "preference"


class HandlerStructure(Enum):
    DIRECT = "direct"
    PARALLEL = "parallel"
    SERIAL = "serial"

    @classmethod
    def parse(cls, text: str) -> HandlerStructure:
        try:
            return cls(text.strip().lower())
        except ValueError:
            raise ValueError(f"unknown handler structure {text!r}") from None


class Termination(Enum):
    FINISHED = "Finished"
    MAX_STEPS_EXCEEDED = "MaxStepsExceeded"
    ABORTED = "Aborted"


@dataclass(frozen=True)
class Question:
    id: str
    text: str
    difficulty: Difficulty = Difficulty.EASY
    gold_answer: str | None = None
    dataset: DatasetClass | None = None

    def __post_init__(self) -> None:
        if not self.text.strip():
            raise ValueError(f"question {self.id!r} has empty text")

    def to_dict(self) -> dict[str, Any]:
        return {
            "id": self.id,
            "text": self.text,
            "difficulty": self.difficulty.value,
            "gold_answer": self.gold_answer,
            "dataset": self.dataset.value if self.dataset else None,
        }


_BRACKETED_TOOL = re.compile(r"\[[^\[\]]*\]")


@dataclass(frozen=True)
class Hint:
    dataset: DatasetClass
    text: str
    flavor: HintFlavor = HintFlavor.STANDARD

    def __post_init__(self) -> None:
        if not self.text.strip():
            raise ValueError(f"empty hint for {self.dataset.value}")
        if not any(
            m.group(0)[1:-1].strip() in _TOOLS_BY_NAME
            for m in _BRACKETED_TOOL.finditer(self.text)
        ):
            raise ValueError(
                f"hint for {self.dataset.value} does not name any [Tool] in brackets"
            )

    def to_dict(self) -> dict[str, Any]:
        return {"dataset": self.dataset.value, "flavor": self.flavor.value, "text": self.text}


@dataclass(frozen=True)
class SubtaskDirective:
    thoughts: str
    tool: ToolName
    subtask_text: str

    def render(self) -> str:
        head = f"{self.thoughts} " if self.thoughts else ""
        return f"{head}[{self.tool.value}]<{self.subtask_text}>"


@dataclass(frozen=True)
class ToolInvocation:
    tool: ToolName
    parameter: str

    def render(self) -> str:
        return render_invocation(self)


@dataclass(frozen=True)
class Step:
    """One loop iteration.

    ``directive`` is None when the decomposer response could not be parsed and
    ``invocation`` is None when no tool call was produced; ``raw`` keeps the
    decomposer response so the model can see what it wrote.
    """

    index: int
    directive: SubtaskDirective | None
    invocation: ToolInvocation | None
    result: str
    raw: str = ""

    def __post_init__(self) -> None:
        if self.index < 1:
            raise ValueError("step index must be positive")

    def to_dict(self) -> dict[str, Any]:
        d = self.directive
        inv = self.invocation
        return {
            "index": self.index,
            "raw": self.raw,
            "directive": None
            if d is None
            else {"thoughts": d.thoughts, "tool": d.tool.value, "subtask": d.subtask_text},
            "invocation": None
            if inv is None
            else {"tool": inv.tool.value, "parameter": inv.parameter},
            "result": self.result,
        }


@dataclass(frozen=True)
class Trajectory:
    question: Question
    steps: tuple[Step, ...]
    termination: Termination
    hint: Hint | None = None
    final_answer: str | None = None
    max_steps: int = DEFAULT_MAX_STEPS
    recognized: DatasetClass | None = None
    notes: tuple[str, ...] = ()
    responses: dict[str, int] = field(default_factory=dict)

    def __post_init__(self) -> None:
        object.__setattr__(self, "steps", tuple(self.steps))
        object.__setattr__(self, "notes", tuple(self.notes))
        if len(self.steps) > self.max_steps:
            raise ValueError(f"{len(self.steps)} steps exceeds max_steps={self.max_steps}")
        for expected, step in enumerate(self.steps, start=1):
            if step.index != expected:
                raise ValueError("step indices must be 1..n consecutive")
        finished = self.termination is Termination.FINISHED
        if finished != (self.final_answer is not None):
            raise ValueError("final_answer must be present iff termination is Finished")
        if finished:
            last = self.steps[-1] if self.steps else None
            if last is None or last.directive is None or last.directive.tool is not ToolName.FINISH:
                raise ValueError("a Finished trajectory must end with a Finish step")

    def to_dict(self) -> dict[str, Any]:
        return {
            "question": self.question.to_dict(),
            "recognized": self.recognized.value if self.recognized else None,
            "hint": self.hint.to_dict() if self.hint else None,
            "steps": [s.to_dict() for s in self.steps],
            "termination": self.termination.value,
            "final_answer": self.final_answer,
            "max_steps": self.max_steps,
            "notes": list(self.notes),
            "responses": dict(sorted(self.responses.items())),
        }


# --- response grammars ------------------------------------------------------

_DIRECTIVE_HEAD = re.compile(r"\[([^\[\]\n]*)\][ \t]*<")
_IDENT_BRACKET = re.compile(r"[A-Za-z_][A-Za-z0-9_]*\[")


def parse_directive(raw: str) -> SubtaskDirective:
    """Extract the last ``[TOOL]<SUBTASK>`` occurrence from a decomposer response.

    The subtask runs to the last ``>`` on the same line, so comparison signs
    inside the subtask survive.
    """
    heads = list(_DIRECTIVE_HEAD.finditer(raw))
    for head in reversed(heads):
        start = head.end()
        line_end = raw.find("\n", start)
        segment = raw[start:] if line_end == -1 else raw[start:line_end]
        close = segment.rfind(">")
        if close == -1:
            continue
        tool = ToolName.parse(head.group(1))
        return SubtaskDirective(
            thoughts=raw[: head.start()].strip(),
            tool=tool,
            subtask_text=segment[:close],
        )
    raise NoDirectiveFound("no [TOOL]<SUBTASK> pattern in response")


def _match_bracket(text: str, open_pos: int) -> int:
    """Index of the ``]`` closing the ``[`` at ``open_pos``, or -1."""
    depth = 0
    for i in range(open_pos, len(text)):
        ch = text[i]
        if ch == "[":
            depth += 1
        elif ch == "]":
            depth -= 1
            if depth == 0:
                return i
    return -1


def parse_invocation(raw: str) -> ToolInvocation:
    """Extract the last top-level ``NAME[...]`` call whose NAME is a known tool.

    Brackets inside the parameter are matched by nesting depth; text inside a
    known tool's brackets is never scanned for further calls.
    """
    found: ToolInvocation | None = None
    unknown: str | None = None
    pos = 0
    while True:
        m = _IDENT_BRACKET.search(raw, pos)
        if m is None:
            break
        name = m.group(0)[:-1]
        open_pos = m.end() - 1
        if name not in _TOOLS_BY_NAME:
            unknown = name
            pos = m.end()
            continue
        close = _match_bracket(raw, open_pos)
        if close == -1:
            raise UnbalancedBrackets(f"unbalanced brackets after {name}")
        found = ToolInvocation(_TOOLS_BY_NAME[name], raw[open_pos + 1 : close])
        pos = close + 1
    if found is not None:
        return found
    if unknown is not None:
        raise UnknownTool(unknown)
    raise NoInvocationFound("no TOOL[PARAMETER] pattern in response")


def render_invocation(inv: ToolInvocation) -> str:
    return f"{inv.tool.value}[{inv.parameter}]"
