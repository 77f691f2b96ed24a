"""Conjunctive ``column op value`` conditions shared by FilterDB and SQL WHERE."""

from __future__ import annotations

import math
import operator
import re
from collections.abc import Callable, Iterable, Sequence
from dataclasses import dataclass
from typing import Any

from ..datastore import DATE, INTEGER, REAL, Table, convert, normalize_date
from .errors import BadCondition, TypeMismatch, UnknownColumn

OPS: dict[str, Callable[[Any, Any], bool]] = {
    "=": operator.eq,
    "!=": operator.ne,
    "<": operator.lt,
    ">": operator.gt,
    "<=": operator.le,
    ">=": operator.ge,
}

# longest spellings first so "<=" is never read as "<"
_OP_RE = re.compile(r"==|<=|>=|!=|<>|=|<|>")
_OP_ALIASES = {"==": "=", "<>": "!="}


@dataclass(frozen=True)
class Condition:
    column: str
    op: str
    value: str

    def render(self) -> str:
        return f"{self.column}{self.op}{self.value}"


def split_top_level(text: str, sep: str = ",") -> list[str]:
    """Split on ``sep`` outside single or double quotes."""
    parts, buf, quote = [], [], None
    for ch in text:
        if quote:
            buf.append(ch)
            if ch == quote:
                quote = None
        elif ch in "'\"":
            quote = ch
            buf.append(ch)
        elif ch == sep:
            parts.append("".join(buf))
            buf = []
        else:
            buf.append(ch)
    if quote:
        raise BadCondition(f"unterminated quote in {text!r}")
    parts.append("".join(buf))
    return parts


def unquote(text: str) -> str:
    t = text.strip()
    if len(t) >= 2 and t[0] == t[-1] and t[0] in "'\"`":
        return t[1:-1]
    return t


def parse_condition(text: str) -> Condition:
    m = _OP_RE.search(text)
    if m is None:
        raise BadCondition(f"no comparison operator in {text.strip()!r}")
    column = unquote(text[: m.start()])
    value = unquote(text[m.end() :])
    if not column:
        raise BadCondition(f"missing column in {text.strip()!r}")
    if not value:
        raise BadCondition(f"missing value in {text.strip()!r}")
    return Condition(column, _OP_ALIASES.get(m.group(0), m.group(0)), value)


def parse_conditions(text: str) -> list[Condition]:
    """Parse the FilterDB parameter grammar: comma-separated conditions."""
    if not text.strip():
        raise BadCondition("empty condition list")
    conditions = []
    for part in split_top_level(text):
        if not part.strip():
            raise BadCondition(f"empty condition in {text.strip()!r}")
        conditions.append(parse_condition(part))
    return conditions


def typed_literal(table: Table, cond: Condition) -> Any:
    kind = table.types[cond.column]
    if kind in (INTEGER, REAL):
        try:
            v = float(cond.value)
        except ValueError:
            raise TypeMismatch(f"{cond.column} is {kind}, got {cond.value!r}") from None
        if not math.isfinite(v):
            raise TypeMismatch(f"{cond.column} is {kind}, got {cond.value!r}")
        return v
    if kind == DATE:
        d = normalize_date(cond.value)
        if d is None:
            raise TypeMismatch(f"{cond.column} is a date column, got {cond.value!r}")
        return d
    return cond.value


Predicate = Callable[[int], bool]


def compile_conditions(table: Table, conditions: Sequence[Condition]) -> Predicate:
    """Row-index predicate for the conjunction of ``conditions``.

    Null cells never satisfy a comparison.
    """
    checks = []
    for cond in conditions:
        if cond.column not in table.types:
            raise UnknownColumn(cond.column)
        j = table.column_index(cond.column)
        kind = table.types[cond.column]
        checks.append((j, kind, OPS[cond.op], typed_literal(table, cond)))

    def pred(row: int) -> bool:
        cells = table.rows[row]
        for j, kind, op, lit in checks:
            v = convert(cells[j], kind)
            if v is None or not op(v, lit):
                return False
        return True

    return pred


def filter_rows(table: Table, conditions: Sequence[Condition], rows: Iterable[int] | None = None) -> list[int]:
    pred = compile_conditions(table, conditions)
    candidates = range(len(table.rows)) if rows is None else rows
    return [i for i in candidates if pred(i)]
