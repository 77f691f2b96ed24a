"""Arithmetic for the Calculate tool.

Grammar (standard precedence, left associative)::

    expr    := term (('+' | '-') term)*
    term    := unary (('*' | '/') unary)*
    unary   := ('+' | '-')* primary
    primary := NUMBER | '(' expr ')'

Evaluation is exact over rationals; only the final result is rounded for
display.
"""

from __future__ import annotations

import re
from fractions import Fraction

from .errors import CalcParseError, DivisionByZero

MAX_NESTING = 200

_TOKEN_RE = re.compile(r"\s*(?:([0-9]+(?:\.[0-9]*)?|\.[0-9]+)|(.))", re.DOTALL)
_OPS = {"+": "+", "-": "-", "−": "-", "*": "*", "×": "*", "/": "/", "÷": "/", "(": "(", ")": ")"}


def _tokenize(expr: str) -> list[tuple[str, str, int]]:
    tokens = []
    pos = 0
    end = len(expr.rstrip())
    while pos < end:
        m = _TOKEN_RE.match(expr, pos, end)
        number, other = m.groups()
        start = m.start(1) if number is not None else m.start(2)
        if number is not None:
            tokens.append(("num", number, start))
        else:
            if other not in _OPS:
                raise CalcParseError(f"unexpected character {other!r}", start)
            tokens.append(("op", _OPS[other], start))
        pos = m.end()
    tokens.append(("end", "", len(expr)))
    return tokens


class _Parser:
    def __init__(self, expr: str):
        self.tokens = _tokenize(expr)
        self.i = 0
        self.depth = 0

    def peek(self) -> tuple[str, str, int]:
        return self.tokens[self.i]

    def take(self) -> tuple[str, str, int]:
        tok = self.tokens[self.i]
        self.i += 1
        return tok

    def parse(self) -> Fraction:
        if self.peek()[0] == "end":
            raise CalcParseError("empty expression", 0)
        value = self.expr()
        kind, text, pos = self.peek()
        if kind != "end":
            raise CalcParseError(f"unexpected {text!r}", pos)
        return value

    def expr(self) -> Fraction:
        value = self.term()
        while self.peek()[1] in ("+", "-") and self.peek()[0] == "op":
            op = self.take()[1]
            rhs = self.term()
            value = value + rhs if op == "+" else value - rhs
        return value

    def term(self) -> Fraction:
        value = self.unary()
        while self.peek()[1] in ("*", "/") and self.peek()[0] == "op":
            _, op, pos = self.take()
            rhs = self.unary()
            if op == "*":
                value = value * rhs
            else:
                if rhs == 0:
                    raise DivisionByZero(f"division by zero at offset {pos}")
                value = value / rhs
        return value

    def unary(self) -> Fraction:
        sign = 1
        while self.peek()[0] == "op" and self.peek()[1] in ("+", "-"):
            if self.take()[1] == "-":
                sign = -sign
        value = self.primary()
        return -value if sign < 0 else value

    def primary(self) -> Fraction:
        kind, text, pos = self.take()
        if kind == "num":
            return Fraction(text)
        if kind == "op" and text == "(":
            self.depth += 1
            if self.depth > MAX_NESTING:
                raise CalcParseError("parentheses nested too deeply", pos)
            value = self.expr()
            kind, text, close = self.take()
            if text != ")" or kind != "op":
                raise CalcParseError("expected ')'", close)
            self.depth -= 1
            return value
        if kind == "end":
            raise CalcParseError("unexpected end of expression", pos)
        raise CalcParseError(f"unexpected {text!r}", pos)


def evaluate(expr: str) -> Fraction:
    """Exact value of ``expr``; raises CalcParseError or DivisionByZero."""
    return _Parser(expr).parse()


def format_number(value: Fraction | float | int) -> str:
    """Integers without a decimal point; otherwise at most 6 decimals, zeros trimmed."""
    frac = value if isinstance(value, Fraction) else Fraction(value)
    rounded = round(frac, 6)
    if rounded.denominator == 1:
        return str(rounded.numerator)
    scaled = int(rounded * 10**6)
    sign = "-" if scaled < 0 else ""
    whole, frac_part = divmod(abs(scaled), 10**6)
    return f"{sign}{whole}.{frac_part:06d}".rstrip("0")


def calculate(expr: str) -> str:
    return format_number(evaluate(expr))
