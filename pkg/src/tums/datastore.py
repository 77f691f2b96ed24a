"""Loaders for the external knowledge the tools query.

On-disk layout under a data root::

    data/<store>/table.csv | graph.jsonl | corpus.jsonl
    questions/<dataset>-easy.jsonl, questions/<dataset>-hard.jsonl

Loaded stores are frozen; nothing mutates them after construction.
"""

from __future__ import annotations

import csv
import json
import math
import re
from collections import Counter
from collections.abc import Iterable, Mapping
from dataclasses import dataclass, field
from pathlib import Path
from types import MappingProxyType
from typing import Any

from .core import DatasetClass, Difficulty, Question, TumsError


class DataError(TumsError):
    pass


class MalformedCsv(DataError):
    def __init__(self, line: int, reason: str):
        super().__init__(f"line {line}: {reason}")
        self.line = line


class EmptyFile(DataError):
    pass


class DanglingEdge(DataError):
    pass


class DuplicateNode(DataError):
    pass


class DuplicateEdge(DataError):
    pass


class DuplicateDocId(DataError):
    pass


class MissingField(DataError):
    pass


# --- tables -----------------------------------------------------------------

INTEGER, REAL, DATE, TEXT = "integer", "real", "date", "text"

_INT_RE = re.compile(r"[+-]?\d+")
_DATE_RE = re.compile(r"\d{4}-\d{2}-\d{2}")
_LOOSE_DATE_RE = re.compile(r"(\d{4})[-/](\d{1,2})[-/](\d{1,2})")


def normalize_date(cell: str) -> str | None:
    """``YYYY/M/D`` and ``YYYY-M-D`` become ``YYYY-MM-DD``; anything else is None."""
    m = _LOOSE_DATE_RE.fullmatch(cell.strip())
    if not m:
        return None
    y, mo, d = m.groups()
    if not (1 <= int(mo) <= 12 and 1 <= int(d) <= 31):
        return None
    return f"{y}-{int(mo):02d}-{int(d):02d}"


def _is_real(cell: str) -> bool:
    try:
        return math.isfinite(float(cell))
    except ValueError:
        return False


def infer_type(cells: Iterable[str]) -> str:
    values = [c for c in cells if c != ""]
    if not values:
        return TEXT
    if all(_INT_RE.fullmatch(v) for v in values):
        return INTEGER
    if all(_is_real(v) for v in values):
        return REAL
    if all(_DATE_RE.fullmatch(v) for v in values):
        return DATE
    return TEXT


def convert(cell: str, kind: str) -> Any:
    """Typed value of a stored cell; empty cells are null (None)."""
    if cell == "":
        return None
    if kind == INTEGER:
        return int(cell)
    if kind == REAL:
        return float(cell)
    return cell


@dataclass(frozen=True)
class Table:
    name: str
    columns: tuple[str, ...]
    rows: tuple[tuple[str, ...], ...]
    types: Mapping[str, str]

    def __post_init__(self) -> None:
        if len(set(self.columns)) != len(self.columns):
            raise ValueError(f"duplicate column names in table {self.name!r}")
        width = len(self.columns)
        for i, row in enumerate(self.rows):
            if len(row) != width:
                raise ValueError(f"row {i} of table {self.name!r} has {len(row)} cells, expected {width}")

    @classmethod
    def build(cls, name: str, columns: Iterable[str], rows: Iterable[Iterable[str]]) -> Table:
        """Construct a table from string cells, normalizing dates and inferring types."""
        cols = tuple(columns)
        raw = [tuple(r) for r in rows]
        normalized = []
        for r in raw:
            normalized.append(tuple(normalize_date(c) or c for c in r))
        types = {}
        for j, col in enumerate(cols):
            types[col] = infer_type(r[j] for r in normalized)
        # only date-typed columns keep the normalized spelling
        final = [
            tuple(nr[j] if types[c] == DATE else rr[j] for j, c in enumerate(cols))
            for rr, nr in zip(raw, normalized)
        ]
        return cls(name, cols, tuple(final), MappingProxyType(types))

    def column_index(self, column: str) -> int:
        return self.columns.index(column)

    def value(self, row: int, column: str) -> Any:
        j = self.columns.index(column)
        return convert(self.rows[row][j], self.types[column])

    def schema_text(self) -> str:
        cols = ", ".join(f"{c} ({self.types[c]})" for c in self.columns)
        return f"Table {self.name}: {cols}"


def load_table(path: str | Path, name: str | None = None) -> Table:
    path = Path(path)
    name = name or path.parent.name or path.stem
    with path.open(encoding="utf-8", newline="") as f:
        reader = csv.reader(f, delimiter=",", quotechar='"', doublequote=True, strict=True)
        try:
            header = next(reader, None)
            if header is None:
                raise EmptyFile(f"{path} is empty")
            columns = [c.strip() for c in header]
            if len(set(columns)) != len(columns):
                raise MalformedCsv(1, "duplicate column names")
            rows = []
            for row in reader:
                if not row:
                    continue
                if len(row) != len(columns):
                    raise MalformedCsv(reader.line_num, f"expected {len(columns)} cells, found {len(row)}")
                rows.append(row)
        except csv.Error as exc:
            raise MalformedCsv(reader.line_num, str(exc)) from None
    return Table.build(name, columns, rows)


# --- graphs -----------------------------------------------------------------


def edge_key(a: str, b: str) -> tuple[str, str]:
    return (a, b) if a <= b else (b, a)


@dataclass(frozen=True)
class Graph:
    """Undirected attributed graph; edge keys are sorted id pairs."""

    name: str
    nodes: Mapping[str, Mapping[str, Any]]
    edges: Mapping[tuple[str, str], Mapping[str, Any]]
    adjacency: Mapping[str, tuple[str, ...]] = field(default_factory=dict)

    @classmethod
    def build(
        cls,
        name: str,
        nodes: Mapping[str, Mapping[str, Any]],
        edges: Mapping[tuple[str, str], Mapping[str, Any]],
    ) -> Graph:
        adj: dict[str, set[str]] = {n: set() for n in nodes}
        norm: dict[tuple[str, str], Mapping[str, Any]] = {}
        for (a, b), attrs in edges.items():
            for end in (a, b):
                if end not in nodes:
                    raise DanglingEdge(f"edge ({a}, {b}) references unknown node {end!r}")
            key = edge_key(a, b)
            if key in norm:
                raise DuplicateEdge(f"duplicate edge ({a}, {b})")
            norm[key] = MappingProxyType(dict(attrs))
            adj[a].add(b)
            adj[b].add(a)
        return cls(
            name,
            MappingProxyType({k: MappingProxyType(dict(v)) for k, v in nodes.items()}),
            MappingProxyType(norm),
            MappingProxyType({k: tuple(sorted(v)) for k, v in adj.items()}),
        )

    def edge(self, a: str, b: str) -> Mapping[str, Any] | None:
        return self.edges.get(edge_key(a, b))


def load_graph(path: str | Path, name: str | None = None) -> Graph:
    path = Path(path)
    nodes: dict[str, dict[str, Any]] = {}
    edges: dict[tuple[str, str], dict[str, Any]] = {}
    seen_edges: set[tuple[str, str]] = set()
    pending = []
    with path.open(encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from None
            kind = rec.get("type")
            if kind == "node":
                nid = str(rec["id"])
                if nid in nodes:
                    raise DuplicateNode(f"{path}:{lineno}: duplicate node {nid!r}")
                nodes[nid] = dict(rec.get("attrs") or {})
            elif kind == "edge":
                pending.append((lineno, str(rec["src"]), str(rec["dst"]), dict(rec.get("attrs") or {})))
            else:
                raise DataError(f"{path}:{lineno}: unknown record type {kind!r}")
    for lineno, a, b, attrs in pending:
        for end in (a, b):
            if end not in nodes:
                raise DanglingEdge(f"{path}:{lineno}: edge ({a}, {b}) references unknown node {end!r}")
        key = edge_key(a, b)
        if key in seen_edges:
            raise DuplicateEdge(f"{path}:{lineno}: duplicate edge ({a}, {b})")
        seen_edges.add(key)
        edges[key] = attrs
    return Graph.build(name or path.parent.name or path.stem, nodes, edges)


# --- corpora ----------------------------------------------------------------

_TOKEN_RE = re.compile(r"[a-z0-9]+")


def tokenize(text: str) -> list[str]:
    return _TOKEN_RE.findall(text.lower())


def idf(n_docs: int, df: int) -> float:
    """Smoothed inverse document frequency; strictly positive."""
    return math.log((1 + n_docs) / (1 + df)) + 1.0


@dataclass(frozen=True)
class Corpus:
    """Documents plus an inverted index of tf-idf weights.

    ``index[term]`` holds ``(doc position, weight)`` postings; ``norms`` are
    the Euclidean norms of each document's weight vector.
    """

    name: str
    documents: tuple[tuple[str, str], ...]
    index: Mapping[str, tuple[tuple[int, float], ...]]
    idf: Mapping[str, float]
    norms: tuple[float, ...]

    @classmethod
    def build(cls, name: str, documents: Iterable[tuple[str, str]]) -> Corpus:
        docs = tuple((str(i), t) for i, t in documents)
        ids = [d for d, _ in docs]
        if len(set(ids)) != len(ids):
            dup = next(d for d, c in Counter(ids).items() if c > 1)
            raise DuplicateDocId(f"duplicate document id {dup!r}")
        tfs = [Counter(tokenize(t)) for _, t in docs]
        df: Counter[str] = Counter()
        for tf in tfs:
            df.update(tf.keys())
        weights = {term: idf(len(docs), n) for term, n in df.items()}
        postings: dict[str, list[tuple[int, float]]] = {}
        norms = []
        for pos, tf in enumerate(tfs):
            sq = 0.0
            for term in sorted(tf):
                w = tf[term] * weights[term]
                postings.setdefault(term, []).append((pos, w))
                sq += w * w
            norms.append(math.sqrt(sq))
        return cls(
            name,
            docs,
            MappingProxyType({t: tuple(p) for t, p in sorted(postings.items())}),
            MappingProxyType(dict(sorted(weights.items()))),
            tuple(norms),
        )

    def search(self, query: str, k: int = 3) -> list[tuple[str, float]]:
        """Top-``k`` (doc_id, cosine) pairs with positive similarity.

        Ties are broken by ascending doc id.
        """
        q_tf = Counter(t for t in tokenize(query) if t in self.idf)
        if not q_tf:
            return []
        q_vec = {t: n * self.idf[t] for t, n in q_tf.items()}
        q_norm = math.sqrt(sum(w * w for w in q_vec.values()))
        dots: dict[int, float] = {}
        for term in sorted(q_vec):
            qw = q_vec[term]
            for pos, w in self.index[term]:
                dots[pos] = dots.get(pos, 0.0) + qw * w
        scored = [
            (self.documents[pos][0], dot / (q_norm * self.norms[pos]))
            for pos, dot in dots.items()
            if dot > 0
        ]
        scored.sort(key=lambda item: (-round(item[1], 12), item[0]))
        return scored[:k]

    def text_of(self, doc_id: str) -> str:
        for d, t in self.documents:
            if d == doc_id:
                return t
        raise KeyError(doc_id)


def load_corpus(path: str | Path, name: str | None = None) -> Corpus:
    path = Path(path)
    docs = []
    with path.open(encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                docs.append((str(rec["id"]), str(rec.get("text", ""))))
            except (json.JSONDecodeError, KeyError) as exc:
                raise DataError(f"{path}:{lineno}: bad corpus record ({exc})") from None
    return Corpus.build(name or path.parent.name or path.stem, docs)


# --- questions --------------------------------------------------------------

_QFILE_RE = re.compile(r"(?P<dataset>.+)-(?P<level>easy|hard)\.jsonl", re.IGNORECASE)


def load_questions(path: str | Path, require_answer: bool = True) -> list[Question]:
    """Questions in file order; difficulty and dataset come from the file name."""
    path = Path(path)
    m = _QFILE_RE.fullmatch(path.name)
    difficulty = Difficulty.EASY
    dataset = None
    if m:
        difficulty = Difficulty.HARD if m.group("level").lower() == "hard" else Difficulty.EASY
        try:
            dataset = DatasetClass.parse(m.group("dataset"))
        except TumsError:
            dataset = None
    out = []
    with path.open(encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            rec = json.loads(line)
            required = ("qid", "question", "answer") if require_answer else ("qid", "question")
            for key in required:
                if key not in rec:
                    raise MissingField(f"{path}:{lineno}: missing field {key!r}")
            answer = rec.get("answer")
            out.append(
                Question(
                    id=str(rec["qid"]),
                    text=str(rec["question"]),
                    difficulty=difficulty,
                    gold_answer=None if answer is None else str(answer),
                    dataset=dataset,
                )
            )
    return out


# --- store registry ---------------------------------------------------------

# store directory backing each dataset class; GSM8K needs no external data
DATASET_STORES: Mapping[DatasetClass, str | None] = MappingProxyType(
    {
        DatasetClass.FLIGHT: "flights",
        DatasetClass.COFFEE: "coffee",
        DatasetClass.YELP: "yelp",
        DatasetClass.AIRBNB: "airbnb",
        DatasetClass.DBLP: "dblp",
        DatasetClass.SCIREX: "scirex",
        DatasetClass.AGENDA: "agenda",
        DatasetClass.GSM8K: None,
    }
)


@dataclass(frozen=True)
class Stores:
    tables: Mapping[str, Table] = field(default_factory=dict)
    graphs: Mapping[str, Graph] = field(default_factory=dict)
    corpora: Mapping[str, Corpus] = field(default_factory=dict)

    def names(self) -> list[str]:
        return sorted({*self.tables, *self.graphs, *self.corpora})

    def has_store(self, name: str) -> bool:
        return name in self.tables or name in self.graphs or name in self.corpora


def load_data_dir(root: str | Path) -> Stores:
    """Load every store under ``root/data``."""
    base = Path(root) / "data"
    if not base.is_dir():
        raise DataError(f"missing data directory {base}")
    tables, graphs, corpora = {}, {}, {}
    for sub in sorted(p for p in base.iterdir() if p.is_dir()):
        if (sub / "table.csv").exists():
            tables[sub.name] = load_table(sub / "table.csv", sub.name)
        if (sub / "graph.jsonl").exists():
            graphs[sub.name] = load_graph(sub / "graph.jsonl", sub.name)
        if (sub / "corpus.jsonl").exists():
            corpora[sub.name] = load_corpus(sub / "corpus.jsonl", sub.name)
    return Stores(MappingProxyType(tables), MappingProxyType(graphs), MappingProxyType(corpora))


def question_files(root: str | Path) -> list[Path]:
    qdir = Path(root) / "questions"
    if not qdir.is_dir():
        return []
    return sorted(p for p in qdir.glob("*.jsonl") if _QFILE_RE.fullmatch(p.name))
