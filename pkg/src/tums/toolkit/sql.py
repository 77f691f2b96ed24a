"""A small SQL subset over registered tables.

::

    query     := SELECT items FROM name [WHERE cond (AND cond)*] [LIMIT int] [';']
    items     := '*' | item (',' item)*
    item      := COUNT '(' '*' ')' | AGG '(' column ')' | column
    AGG       := COUNT | AVG | SUM | MIN | MAX
    cond      := column op literal          op in = != <> < > <= >=
    literal   := 'string' | number

Keywords are case-insensitive. Identifiers containing spaces may be written
as "double quoted" or `backticked`. Aggregates ignore nulls.
"""

from __future__ import annotations

import re
from collections.abc import Mapping, Sequence
from dataclasses import dataclass
from fractions import Fraction
from typing import Any

from ..datastore import INTEGER, REAL, Table, convert
from .calculator import format_number
from .conditions import Condition, filter_rows
from .errors import SqlParseError, TypeMismatch, UnknownColumn, UnknownTable

KEYWORDS = {"SELECT", "FROM", "WHERE", "AND", "LIMIT"}
AGGREGATES = {"COUNT", "AVG", "SUM", "MIN", "MAX"}
MAX_ROWS_SHOWN = 30

_TOKEN_SPEC = [
    ("ws", r"\s+"),
    ("num", r"[0-9]+(?:\.[0-9]+)?|\.[0-9]+"),
    ("ident", r"[A-Za-z_][A-Za-z0-9_]*"),
    ("qident", r'"(?:[^"]|"")*"|`[^`]*`'),
    ("str", r"'(?:[^']|'')*'"),
    ("op", r"==|<=|>=|!=|<>|=|<|>"),
    ("punct", r"[(),*;\-]"),
]
_TOKEN_RE = re.compile("|".join(f"(?P<{name}>{pat})" for name, pat in _TOKEN_SPEC))


@dataclass(frozen=True)
class Token:
    kind: str
    text: str
    pos: int

    @property
    def upper(self) -> str:
        return self.text.upper()


def tokenize(query: str) -> list[Token]:
    tokens = []
    pos = 0
    while pos < len(query):
        m = _TOKEN_RE.match(query, pos)
        if m is None:
            if query[pos] in "'\"`":
                raise SqlParseError("unterminated quoted text", pos)
            raise SqlParseError(f"unexpected character {query[pos]!r}", pos)
        kind = m.lastgroup
        assert kind is not None
        if kind != "ws":
            tokens.append(Token(kind, m.group(0), pos))
        pos = m.end()
    tokens.append(Token("end", "", len(query)))
    return tokens


@dataclass(frozen=True)
class SelectItem:
    column: str | None  # None means '*'
    aggregate: str | None = None

    def label(self) -> str:
        col = "*" if self.column is None else self.column
        return f"{self.aggregate}({col})" if self.aggregate else col


@dataclass(frozen=True)
class SelectQuery:
    items: tuple[SelectItem, ...]
    table: str
    conditions: tuple[Condition, ...] = ()
    limit: int | None = None

    @property
    def is_aggregate(self) -> bool:
        return any(i.aggregate for i in self.items)


class _Parser:
    def __init__(self, query: str):
        self.tokens = tokenize(query)
        self.i = 0

    def peek(self) -> Token:
        return self.tokens[self.i]

    def take(self) -> Token:
        tok = self.tokens[self.i]
        if tok.kind != "end":
            self.i += 1
        return tok

    def error(self, message: str, tok: Token | None = None) -> SqlParseError:
        tok = tok or self.peek()
        found = "end of query" if tok.kind == "end" else repr(tok.text)
        return SqlParseError(f"{message}, found {found}", tok.pos)

    def keyword(self, word: str) -> None:
        tok = self.peek()
        if tok.kind != "ident" or tok.upper != word:
            raise self.error(f"expected {word}")
        self.take()

    def at_keyword(self, word: str) -> bool:
        tok = self.peek()
        return tok.kind == "ident" and tok.upper == word

    def punct(self, ch: str) -> None:
        tok = self.peek()
        if tok.kind != "punct" or tok.text != ch:
            raise self.error(f"expected {ch!r}")
        self.take()

    def identifier(self, what: str) -> str:
        tok = self.peek()
        if tok.kind == "ident" and tok.upper not in KEYWORDS:
            self.take()
            return tok.text
        if tok.kind == "qident":
            self.take()
            if tok.text[0] == '"':
                return tok.text[1:-1].replace('""', '"')
            return tok.text[1:-1]
        raise self.error(f"expected {what}")

    def parse(self) -> SelectQuery:
        self.keyword("SELECT")
        items = self.items()
        self.keyword("FROM")
        table = self.identifier("table name")
        conditions: list[Condition] = []
        if self.at_keyword("WHERE"):
            self.take()
            conditions.append(self.condition())
            while self.at_keyword("AND"):
                self.take()
                conditions.append(self.condition())
        limit = None
        if self.at_keyword("LIMIT"):
            self.take()
            tok = self.peek()
            if tok.kind != "num" or not tok.text.isdigit():
                raise self.error("expected a non-negative integer after LIMIT")
            self.take()
            limit = int(tok.text)
        if self.peek().kind == "punct" and self.peek().text == ";":
            self.take()
        if self.peek().kind != "end":
            raise self.error("unexpected trailing input")
        query = SelectQuery(tuple(items), table, tuple(conditions), limit)
        if query.is_aggregate and not all(i.aggregate for i in items):
            raise SqlParseError("cannot mix aggregates and plain columns without GROUP BY", 0)
        return query

    def items(self) -> list[SelectItem]:
        tok = self.peek()
        if tok.kind == "punct" and tok.text == "*":
            self.take()
            return [SelectItem(None)]
        items = [self.item()]
        while self.peek().kind == "punct" and self.peek().text == ",":
            self.take()
            items.append(self.item())
        return items

    def item(self) -> SelectItem:
        tok = self.peek()
        nxt = self.tokens[self.i + 1] if self.i + 1 < len(self.tokens) else tok
        if tok.kind == "ident" and tok.upper in AGGREGATES and nxt.text == "(":
            agg = tok.upper
            self.take()
            self.punct("(")
            inner = self.peek()
            if inner.kind == "punct" and inner.text == "*":
                if agg != "COUNT":
                    raise self.error(f"{agg}(*) is not supported", inner)
                self.take()
                column = None
            else:
                column = self.identifier("column name")
            self.punct(")")
            return SelectItem(column, agg)
        return SelectItem(self.identifier("column name"))

    def condition(self) -> Condition:
        column = self.identifier("column name")
        tok = self.peek()
        if tok.kind != "op":
            raise self.error("expected comparison operator")
        self.take()
        op = {"==": "=", "<>": "!="}.get(tok.text, tok.text)
        return Condition(column, op, self.literal())

    def literal(self) -> str:
        tok = self.peek()
        if tok.kind == "str":
            self.take()
            return tok.text[1:-1].replace("''", "'")
        sign = ""
        if tok.kind == "punct" and tok.text == "-":
            self.take()
            sign = "-"
            tok = self.peek()
        if tok.kind == "num":
            self.take()
            return sign + tok.text
        raise self.error("expected a literal")


def parse_sql(query: str) -> SelectQuery:
    return _Parser(query).parse()


@dataclass(frozen=True)
class SqlResult:
    columns: tuple[str, ...]
    rows: tuple[tuple[Any, ...], ...]
    aggregate: bool = False

    def render(self) -> str:
        if self.aggregate and len(self.rows) == 1 and len(self.columns) == 1:
            return _cell(self.rows[0][0])
        header = ", ".join(self.columns)
        if not self.rows:
            return f"{header}\n(0 rows)"
        shown = [", ".join(_cell(v) for v in row) for row in self.rows[:MAX_ROWS_SHOWN]]
        text = "\n".join([header, *shown])
        if len(self.rows) > MAX_ROWS_SHOWN:
            text += f"\n… ({len(self.rows)} rows in total)"
        return text


def _cell(value: Any) -> str:
    if value is None:
        return "NULL"
    if isinstance(value, (int, float, Fraction)) and not isinstance(value, bool):
        return format_number(value)
    return str(value)


def resolve_table(tables: Mapping[str, Table], name: str) -> Table:
    if name in tables:
        return tables[name]
    folded = {k.casefold(): v for k, v in tables.items()}
    if name.casefold() in folded:
        return folded[name.casefold()]
    raise UnknownTable(name)


def _aggregate(table: Table, item: SelectItem, rows: Sequence[int]) -> Any:
    if item.column is None:
        return len(rows)
    kind = table.types[item.column]
    values = [v for v in (table.value(r, item.column) for r in rows) if v is not None]
    if item.aggregate == "COUNT":
        return len(values)
    if item.aggregate in ("AVG", "SUM"):
        if kind not in (INTEGER, REAL):
            raise TypeMismatch(f"{item.aggregate} needs a numeric column, {item.column} is {kind}")
        if not values:
            return None
        total = sum((Fraction(v) for v in values), Fraction(0))
        return total if item.aggregate == "SUM" else total / len(values)
    if not values:
        return None
    return min(values) if item.aggregate == "MIN" else max(values)


def execute_query(query: SelectQuery, tables: Mapping[str, Table]) -> SqlResult:
    table = resolve_table(tables, query.table)
    for item in query.items:
        if item.column is not None and item.column not in table.types:
            raise UnknownColumn(item.column)
    rows = filter_rows(table, query.conditions)
    if query.is_aggregate:
        values = tuple(_aggregate(table, item, rows) for item in query.items)
        return SqlResult(tuple(i.label() for i in query.items), (values,), aggregate=True)
    if query.limit is not None:
        rows = rows[: query.limit]
    if query.items == (SelectItem(None),):
        columns = table.columns
    else:
        columns = tuple(i.column for i in query.items if i.column is not None)
    idx = [table.column_index(c) for c in columns]
    out = tuple(tuple(convert(table.rows[r][j], table.types[columns[k]]) for k, j in enumerate(idx)) for r in rows)
    return SqlResult(columns, out)


def run_sql(query: str, tables: Mapping[str, Table]) -> str:
    return execute_query(parse_sql(query), tables).render()

