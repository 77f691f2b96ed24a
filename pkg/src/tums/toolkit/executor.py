"""Model-free execution of tool invocations against loaded stores.

Result strings are the wire format the decomposer sees; the templates below
are fixed and the few-shot exemplars in the prompt set quote them verbatim.
"""

from __future__ import annotations

import threading
from collections.abc import Callable
from dataclasses import dataclass, field
from typing import Protocol

from ..core import ToolInvocation, ToolName
from ..datastore import Graph, Stores, Table
from . import calculator, sql
from .conditions import filter_rows, parse_conditions, split_top_level, unquote
from .errors import (
    BadArguments,
    EmptyQuery,
    EmptySelection,
    NoGraphLoaded,
    NoTableLoaded,
    ToolError,
    ToolUnavailable,
    UnknownColumn,
    UnknownCorpus,
    UnknownDataset,
    UnknownNode,
)

MAX_RESULT_CHARS = 4000
MAX_VALUES = 30
PREVIEW_ROWS = 5
RETRIEVE_K = 3
DOC_SEPARATOR = "\n---\n"

LOAD_DB_MESSAGE = "We have successfully loaded the {name} database, including the following columns: {columns}."
LOAD_GRAPH_MESSAGE = "We have successfully loaded the {name} graph, including {nodes} nodes and {edges} edges."
FILTER_MESSAGE = "We have successfully filtered the data ({count} rows)."
NO_DOCUMENTS = "No relevant documents found."
NO_EDGE = "no edge"

# corpus backing each retrieval tool
RETRIEVAL_CORPORA = {ToolName.RETRIEVE_AGENDA: "agenda", ToolName.RETRIEVE_SCIREX: "scirex"}


class CodeRunner(Protocol):
    """Opt-in executor for CodeTool; no implementation ships with the package."""

    def run(self, language: str, source: str) -> str: ...


@dataclass
class Session:
    """Per-episode state: the loaded table, its current filter view, the loaded graph."""

    loaded_table: Table | None = None
    working_rows: list[int] = field(default_factory=list)
    loaded_graph: Graph | None = None


class Executor:
    def __init__(self, stores: Stores, code_runner: CodeRunner | None = None):
        self.stores = stores
        self.code_runner = code_runner
        self.session = Session()
        self.calls = 0
        self._lock = threading.Lock()
        self._routes: dict[ToolName, Callable[[str], str]] = {
            ToolName.LOAD_DB: self.tool_load_db,
            ToolName.FILTER_DB: self.tool_filter_db,
            ToolName.GET_VALUE: self.tool_get_value,
            ToolName.CALCULATE: self.tool_calculate,
            ToolName.SQL_INTERPRETER: self.tool_sql,
            ToolName.LOAD_GRAPH: self.tool_load_graph,
            ToolName.NEIGHBOUR_CHECK: self.tool_neighbour_check,
            ToolName.NODE_CHECK: self.tool_node_check,
            ToolName.EDGE_CHECK: self.tool_edge_check,
            ToolName.RETRIEVE_AGENDA: lambda q: self.tool_retrieve(RETRIEVAL_CORPORA[ToolName.RETRIEVE_AGENDA], q),
            ToolName.RETRIEVE_SCIREX: lambda q: self.tool_retrieve(RETRIEVAL_CORPORA[ToolName.RETRIEVE_SCIREX], q),
            ToolName.CODE_TOOL: self.tool_code,
        }

    def execute(self, inv: ToolInvocation) -> str:
        """Run one invocation; tool failures come back as ``Error: ...`` text."""
        if inv.tool is ToolName.FINISH:
            raise ValueError("Finish is handled by the decomposer, not the executor")
        with self._lock:
            self.calls += 1
        try:
            result = self._routes[inv.tool](inv.parameter)
        except ToolError as exc:
            result = exc.render()
        return _bound(result)

    def schema_text(self) -> str:
        """Column listing for the loaded table, or every registered table."""
        if self.session.loaded_table is not None:
            return self.session.loaded_table.schema_text()
        return "\n".join(t.schema_text() for _, t in sorted(self.stores.tables.items()))

    # --- tables ---

    def tool_load_db(self, name: str) -> str:
        name = unquote(name)
        table = self.stores.tables.get(name)
        if table is None:
            raise UnknownDataset(name)
        self.session.loaded_table = table
        self.session.working_rows = list(range(len(table.rows)))
        return LOAD_DB_MESSAGE.format(name=name, columns=", ".join(table.columns))

    def _table(self) -> Table:
        if self.session.loaded_table is None:
            raise NoTableLoaded("call LoadDB first")
        return self.session.loaded_table

    def tool_filter_db(self, conditions: str) -> str:
        table = self._table()
        conds = parse_conditions(conditions)
        rows = filter_rows(table, conds, self.session.working_rows)
        self.session.working_rows = rows
        lines = [FILTER_MESSAGE.format(count=len(rows))]
        if rows:
            lines.append(", ".join(table.columns))
            lines.extend(", ".join(table.rows[r]) for r in rows[:PREVIEW_ROWS])
            if len(rows) > PREVIEW_ROWS:
                lines.append("…")
        return "\n".join(lines)

    def tool_get_value(self, column: str) -> str:
        table = self._table()
        column = unquote(column)
        if column not in table.types:
            raise UnknownColumn(column)
        if not self.session.working_rows:
            raise EmptySelection("no rows in the current selection")
        j = table.column_index(column)
        values = [table.rows[r][j] for r in self.session.working_rows]
        if len(values) > MAX_VALUES:
            return f"{len(values)} values: " + ", ".join(values[:MAX_VALUES]) + ", …"
        return ", ".join(values)

    def tool_calculate(self, expr: str) -> str:
        return calculator.calculate(expr)

    def tool_sql(self, query: str) -> str:
        return sql.run_sql(query, self.stores.tables)

    # --- graphs ---

    def tool_load_graph(self, name: str) -> str:
        name = unquote(name)
        graph = self.stores.graphs.get(name)
        if graph is None:
            raise UnknownDataset(name)
        self.session.loaded_graph = graph
        return LOAD_GRAPH_MESSAGE.format(name=name, nodes=len(graph.nodes), edges=len(graph.edges))

    def _graph(self) -> Graph:
        if self.session.loaded_graph is None:
            raise NoGraphLoaded("call LoadGraph first")
        return self.session.loaded_graph

    def _node_args(self, args: str, count: int) -> list[str]:
        parts = [unquote(p) for p in split_top_level(args)]
        if len(parts) != count or not all(parts):
            raise BadArguments(f"expected {count} node id(s), got {args.strip()!r}")
        return parts

    def _node(self, graph: Graph, node: str) -> str:
        if node not in graph.nodes:
            raise UnknownNode(node)
        return node

    def tool_neighbour_check(self, args: str) -> str:
        graph = self._graph()
        (node,) = self._node_args(args, 1)
        return ", ".join(graph.adjacency[self._node(graph, node)])

    def tool_node_check(self, args: str) -> str:
        graph = self._graph()
        (node,) = self._node_args(args, 1)
        attrs = graph.nodes[self._node(graph, node)]
        return _render_attrs(attrs)

    def tool_edge_check(self, args: str) -> str:
        graph = self._graph()
        a, b = self._node_args(args, 2)
        attrs = graph.edge(self._node(graph, a), self._node(graph, b))
        return NO_EDGE if attrs is None else _render_attrs(attrs)

    # --- text ---

    def tool_retrieve(self, corpus_id: str, query: str) -> str:
        corpus = self.stores.corpora.get(corpus_id)
        if corpus is None:
            raise UnknownCorpus(corpus_id)
        if not query.strip():
            raise EmptyQuery("the query is empty")
        hits = corpus.search(query, RETRIEVE_K)
        if not hits:
            return NO_DOCUMENTS
        return DOC_SEPARATOR.join(corpus.text_of(doc_id) for doc_id, _ in hits)

    def tool_code(self, param: str) -> str:
        if self.code_runner is None:
            raise ToolUnavailable("no code runner is registered")
        language, source = "python", param
        head, sep, rest = param.partition("\n")
        if sep and head.strip() and " " not in head.strip():
            language, source = head.strip(), rest
        return self.code_runner.run(language, source)


def _render_attrs(attrs) -> str:
    return ", ".join(f"{k}={attrs[k]}" for k in sorted(attrs))


def _bound(text: str) -> str:
    if len(text) <= MAX_RESULT_CHARS:
        return text
    return text[:MAX_RESULT_CHARS] + "…(truncated)"
