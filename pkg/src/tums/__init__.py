"""Tool-use agent that decomposes questions into tool calls and generates
each call's parameter with a structure chosen per tool."""

from .core import (
    DatasetClass,
    Difficulty,
    HandlerStructure,
    Hint,
    HintFlavor,
    Question,
    Step,
    SubtaskDirective,
    Termination,
    ToolInvocation,
    ToolName,
    Trajectory,
    TumsError,
    parse_directive,
    parse_invocation,
    render_invocation,
)

__version__ = "0.1.0"

__all__ = [
    "DatasetClass",
    "Difficulty",
    "HandlerStructure",
    "Hint",
    "HintFlavor",
    "Question",
    "Step",
    "SubtaskDirective",
    "Termination",
    "ToolInvocation",
    "ToolName",
    "Trajectory",
    "TumsError",
    "__version__",
    "parse_directive",
    "parse_invocation",
    "render_invocation",
]
