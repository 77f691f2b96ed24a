from __future__ import annotations

from ..core import TumsError


class ToolError(TumsError):
    """A tool failed; rendered to the model as ``Error: <kind>: <detail>``."""

    @property
    def kind(self) -> str:
        return type(self).__name__

    def render(self) -> str:
        return f"Error: {self.kind}: {self}"


class UnknownDataset(ToolError):
    pass


class UnknownCorpus(ToolError):
    pass


class UnknownColumn(ToolError):
    pass


class UnknownTable(ToolError):
    pass


class UnknownNode(ToolError):
    pass


class NoTableLoaded(ToolError):
    pass


class NoGraphLoaded(ToolError):
    pass


class BadCondition(ToolError):
    pass


class TypeMismatch(ToolError):
    pass


class EmptySelection(ToolError):
    pass


class EmptyQuery(ToolError):
    pass


class ToolUnavailable(ToolError):
    pass


class BadArguments(ToolError):
    pass


class CalcParseError(ToolError):
    def __init__(self, message: str, position: int):
        super().__init__(f"{message} at offset {position}")
        self.position = position

    @property
    def kind(self) -> str:
        return "ParseError"


class DivisionByZero(ToolError):
    pass


class SqlParseError(ToolError):
    def __init__(self, message: str, position: int):
        super().__init__(f"{message} at offset {position}")
        self.position = position
