"""Deterministic tool implementations and the per-episode executor."""

from .calculator import calculate, evaluate, format_number
from .conditions import Condition, filter_rows, parse_conditions
from .errors import ToolError
from .executor import CodeRunner, Executor, Session
from .sql import execute_query, parse_sql, run_sql

__all__ = [
    "CodeRunner",
    "Condition",
    "Executor",
    "Session",
    "ToolError",
    "calculate",
    "evaluate",
    "execute_query",
    "filter_rows",
    "format_number",
    "parse_conditions",
    "parse_sql",
    "run_sql",
]
