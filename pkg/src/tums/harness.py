"""Evaluation runs: pipeline variants, answer scoring, metrics and reports."""

from __future__ import annotations

import csv
import json
import math
import re
import sys
from collections.abc import Iterable, Mapping, Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from datetime import datetime, timezone
from decimal import ROUND_HALF_UP, Decimal
from enum import Enum
from importlib import resources
from pathlib import Path

from .core import (
    DEFAULT_MAX_STEPS,
    DatasetClass,
    Difficulty,
    HintFlavor,
    Question,
    Termination,
    Trajectory,
)
from .datastore import Stores
from .decomposer import error_result, run_episode
from .gateway import BackendError, BudgetLedger, Gateway, GenerationConfig
from .processor import HandlerRegistry, Processor
from .prompting import PromptCatalog
from .recognizer import UnparseableClass, recognize
from .toolkit import CodeRunner, Executor

DEFAULT_REL_TOL = 1e-4
NO_CHANGE = "-"
UNDEFINED_CHANGE = "—"


# --- variants ---------------------------------------------------------------


class VariantName(Enum):
    TUMS = "TUMS"
    TUMS_NIR = "TUMS_NIR"
    TUMS_OS = "TUMS_OS"
    TUMS_PRE = "TUMS_PRE"

    @classmethod
    def parse(cls, text: str) -> VariantName:
        key = text.strip().upper().replace("-", "_")
        try:
            return cls(key)
        except ValueError:
            names = ", ".join(v.value for v in cls)
            raise ValueError(f"unknown variant {text!r} (expected one of {names})") from None


class RegistryMode(Enum):
    MULTI = "Multi"
    DIRECT_ONLY = "DirectOnly"


@dataclass(frozen=True)
class VariantConfig:
    name: VariantName
    recognizer_enabled: bool = True
    registry_mode: RegistryMode = RegistryMode.MULTI
    hint_flavor: HintFlavor = HintFlavor.STANDARD

    def __post_init__(self) -> None:
        expected = _PRESET_FIELDS[self.name]
        if (self.recognizer_enabled, self.registry_mode, self.hint_flavor) != expected:
            raise ValueError(f"{self.name.value} requires settings {expected}")

    @classmethod
    def preset(cls, name: VariantName | str) -> VariantConfig:
        if isinstance(name, str):
            name = VariantName.parse(name)
        return cls(name, *_PRESET_FIELDS[name])

    def registry(self, base: HandlerRegistry | None = None) -> HandlerRegistry:
        if self.registry_mode is RegistryMode.DIRECT_ONLY:
            return HandlerRegistry.direct_only()
        return base or HandlerRegistry.default()

    def to_dict(self) -> dict[str, object]:
        return {
            "name": self.name.value,
            "recognizer_enabled": self.recognizer_enabled,
            "registry_mode": self.registry_mode.value,
            "hint_flavor": self.hint_flavor.value,
        }


_PRESET_FIELDS = {
    VariantName.TUMS: (True, RegistryMode.MULTI, HintFlavor.STANDARD),
    VariantName.TUMS_NIR: (False, RegistryMode.MULTI, HintFlavor.STANDARD),
    VariantName.TUMS_OS: (True, RegistryMode.DIRECT_ONLY, HintFlavor.STANDARD),
    VariantName.TUMS_PRE: (True, RegistryMode.MULTI, HintFlavor.PREFERENCE),
}


# --- scoring ----------------------------------------------------------------

_WS_RE = re.compile(r"\s+")
_THOUSANDS_RE = re.compile(r"(?<=\d),(?=\d{3}(?:\D|$))")


def normalize_answer(text: str) -> str:
    t = _WS_RE.sub(" ", text.strip().casefold())
    t = t.rstrip(".").rstrip()
    return _THOUSANDS_RE.sub("", t)


def _as_number(text: str) -> float | None:
    try:
        value = float(text)
    except ValueError:
        return None
    return value if math.isfinite(value) else None


def score_answer(predicted: str | None, gold: str, rel_tol: float = DEFAULT_REL_TOL) -> bool:
    """Normalized exact match, or numeric match within ``rel_tol``."""
    if predicted is None:
        return False
    p, g = normalize_answer(predicted), normalize_answer(gold)
    pn, gn = _as_number(p), _as_number(g)
    if pn is not None and gn is not None:
        return math.isclose(pn, gn, rel_tol=rel_tol, abs_tol=0.0) or pn == gn
    return p == g


# --- metrics ----------------------------------------------------------------


def round_half_up(value: float, places: int = 2) -> float:
    """Decimal rounding of the value as printed, so 5.625 becomes 5.63."""
    quantum = Decimal(1).scaleb(-places)
    return float(Decimal(repr(value)).quantize(quantum, rounding=ROUND_HALF_UP))


def average_correct_rate(rates: Iterable[float]) -> float:
    """Unweighted mean of per-dataset percentages."""
    values = list(rates)
    if not values:
        raise ValueError("no rates to average")
    return math.fsum(values) / len(values)


@dataclass(frozen=True)
class DatasetScore:
    n: int
    correct: int

    def __post_init__(self) -> None:
        if not 0 <= self.correct <= self.n:
            raise ValueError("correct must lie in [0, n]")

    @property
    def correct_rate(self) -> float:
        return 100.0 * self.correct / self.n if self.n else 0.0

    def to_dict(self) -> dict[str, object]:
        return {
            "n": self.n,
            "correct": self.correct,
            "correct_rate": self.correct_rate,
            "correct_rate_rounded": round_half_up(self.correct_rate),
        }


@dataclass(frozen=True)
class QuestionResult:
    question: Question
    predicted: str | None
    correct: bool
    termination: Termination
    recognized: DatasetClass | None
    responses: Mapping[str, int]

    def to_dict(self) -> dict[str, object]:
        q = self.question
        return {
            "id": q.id,
            "dataset": q.dataset.value if q.dataset else None,
            "difficulty": q.difficulty.value,
            "gold": q.gold_answer,
            "predicted": self.predicted,
            "correct": self.correct,
            "termination": self.termination.value,
            "recognized": self.recognized.value if self.recognized else None,
            "responses": dict(sorted(self.responses.items())),
        }


def _scores(results: Iterable[QuestionResult]) -> dict[DatasetClass, DatasetScore]:
    tally: dict[DatasetClass, list[int]] = {}
    for r in results:
        assert r.question.dataset is not None
        cell = tally.setdefault(r.question.dataset, [0, 0])
        cell[0] += 1
        cell[1] += r.correct
    return {d: DatasetScore(*tally[d]) for d in DatasetClass if d in tally}


@dataclass
class RunReport:
    variant: VariantConfig
    results: list[QuestionResult]
    ledger: BudgetLedger
    settings: dict[str, object] = field(default_factory=dict)

    @property
    def per_dataset(self) -> dict[DatasetClass, DatasetScore]:
        return _scores(self.results)

    def per_difficulty(self) -> dict[Difficulty, dict[DatasetClass, DatasetScore]]:
        out = {}
        for diff in Difficulty:
            subset = [r for r in self.results if r.question.difficulty is diff]
            if subset:
                out[diff] = _scores(subset)
        return out

    @property
    def average_correct_rate(self) -> float:
        per = self.per_dataset
        return average_correct_rate(s.correct_rate for s in per.values()) if per else 0.0

    @property
    def total_correct(self) -> int:
        return sum(r.correct for r in self.results)

    @property
    def total_cost(self) -> int:
        return self.ledger.total_responses

    @property
    def average_cost(self) -> float | None:
        """Responses per correct answer; None (undefined) with no correct answers."""
        return self.total_cost / self.total_correct if self.total_correct else None

    @property
    def aborted(self) -> list[str]:
        return [r.question.id for r in self.results if r.termination is Termination.ABORTED]

    def recognition_accuracy(self) -> float | None:
        judged = [r for r in self.results if r.recognized is not None and r.question.dataset is not None]
        if not judged:
            return None
        return 100.0 * sum(r.recognized is r.question.dataset for r in judged) / len(judged)

    def to_dict(self) -> dict[str, object]:
        def table(scores: Mapping[DatasetClass, DatasetScore]) -> dict[str, object]:
            rates = [s.correct_rate for s in scores.values()]
            avg = average_correct_rate(rates) if rates else 0.0
            return {
                "per_dataset": {d.value: s.to_dict() for d, s in scores.items()},
                "average_correct_rate": avg,
                "average_correct_rate_rounded": round_half_up(avg),
            }

        avg_cost = self.average_cost
        return {
            "variant": self.variant.to_dict(),
            "settings": self.settings,
            "n_questions": len(self.results),
            **table(self.per_dataset),
            "by_difficulty": {d.value: table(s) for d, s in self.per_difficulty().items()},
            "ledger": self.ledger.to_dict(),
            "total_cost": self.total_cost,
            "total_correct": self.total_correct,
            "average_cost": avg_cost,
            "average_cost_defined": avg_cost is not None,
            "aborted": self.aborted,
            "recognition_accuracy": self.recognition_accuracy(),
            "questions": [r.to_dict() for r in self.results],
        }


# --- running ----------------------------------------------------------------

# Cut a response where the model starts inventing the next prompt turn; the
# response parsers take the last match, so an invented turn would otherwise win.
STOP_SEQUENCES = {
    "recognizer": ("\nQuestion:",),
    "decomposer": ("\nResult",),
    "processor": ("\nQuestion:",),
}


def module_generation_configs(base: GenerationConfig | None = None) -> dict[str, GenerationConfig]:
    base = base or GenerationConfig()
    return {
        module: GenerationConfig(base.temperature, base.max_tokens, base.seed, stops)
        for module, stops in STOP_SEQUENCES.items()
    }



def run_question(
    q: Question,
    variant: VariantConfig,
    gateway: Gateway,
    stores: Stores,
    catalog: PromptCatalog,
    registry: HandlerRegistry,
    max_steps: int = DEFAULT_MAX_STEPS,
    code_runner: CodeRunner | None = None,
) -> Trajectory:
    """One episode on a forked gateway, so its ledger counts only this question."""
    g = gateway.fork()
    hint, recognized, notes = None, None, []
    if variant.recognizer_enabled:
        try:
            outcome = recognize(q, variant.hint_flavor, g, catalog)
        except UnparseableClass:
            notes.append("recognizer gave no dataset label after one retry; running without a hint")
        except BackendError as exc:
            notes.append(f"aborted during recognition: {error_result(exc)}")
            return Trajectory(q, (), Termination.ABORTED, max_steps=max_steps, notes=notes, responses=g.ledger.per_module)
        else:
            hint, recognized = outcome.hint, outcome.dataset
    processor = Processor(registry, g, catalog)
    executor = Executor(stores, code_runner)
    return run_episode(
        q, hint, processor, executor, catalog, g, max_steps=max_steps, recognized=recognized, notes=notes
    )


@dataclass(frozen=True)
class SuiteResult:
    report: RunReport
    trajectories: list[Trajectory]


def run_suite(
    questions: Sequence[Question],
    variant: VariantConfig,
    gateway: Gateway,
    stores: Stores,
    catalog: PromptCatalog,
    *,
    registry: HandlerRegistry | None = None,
    max_steps: int = DEFAULT_MAX_STEPS,
    workers: int = 1,
    rel_tol: float = DEFAULT_REL_TOL,
    code_runner: CodeRunner | None = None,
    out_dir: str | Path | None = None,
) -> SuiteResult:
    """Run every question under ``variant`` and score it.

    Questions run on up to ``workers`` threads; results keep input order.
    With ``out_dir`` the run is written out (see :func:`write_run`).
    """
    for q in questions:
        if q.dataset is None or q.gold_answer is None:
            raise ValueError(f"question {q.id!r} needs a dataset and a gold answer")
    ids = [q.id for q in questions]
    if len(set(ids)) != len(ids):
        raise ValueError("question ids must be unique within a suite")
    reg = variant.registry(registry)

    def one(q: Question) -> Trajectory:
        return run_question(q, variant, gateway, stores, catalog, reg, max_steps, code_runner)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            trajectories = list(pool.map(one, questions))
    else:
        trajectories = [one(q) for q in questions]

    ledger = BudgetLedger()
    results = []
    for q, t in zip(questions, trajectories):
        for module, n in t.responses.items():
            ledger.record(module, n)
        assert q.gold_answer is not None
        results.append(
            QuestionResult(
                q, t.final_answer, score_answer(t.final_answer, q.gold_answer, rel_tol),
                t.termination, t.recognized, t.responses,
            )
        )
    settings = {
        "max_steps": max_steps,
        "rel_tol": rel_tol,
        "prompt_version": catalog.version,
        "prompt_checksum": catalog.checksum,
        "registry": reg.to_dict(),
        "generation": _generation_settings(gateway),
    }
    suite = SuiteResult(RunReport(variant, results, ledger, settings), trajectories)
    if out_dir is not None:
        write_run(out_dir, suite)
    return suite


def _generation_settings(gateway: Gateway) -> dict[str, object]:
    def cfg(c) -> dict[str, object]:
        return {
            "temperature": c.temperature,
            "max_tokens": c.max_tokens,
            "seed": c.seed,
            "stop_sequences": list(c.stop_sequences),
        }

    return {
        "default": cfg(gateway.config),
        **{m: cfg(c) for m, c in sorted(gateway.module_configs.items())},
    }


# --- persistence ------------------------------------------------------------


def _dump(data: object) -> str:
    return json.dumps(data, indent=2, sort_keys=True, ensure_ascii=False) + "\n"


def trajectory_filename(qid: str) -> str:
    return re.sub(r"[^A-Za-z0-9._-]", "_", qid) + ".json"


def write_run(out_dir: str | Path, suite: SuiteResult, meta: Mapping[str, object] | None = None) -> Path:
    """Write report.json, report.md, costs.csv, meta.json and trajectories/.

    Everything except meta.json is a pure function of the run, so repeated
    scripted runs produce byte-identical files.
    """
    root = Path(out_dir)
    tdir = root / "trajectories"
    tdir.mkdir(parents=True, exist_ok=True)
    report = suite.report
    (root / "report.json").write_text(_dump(report.to_dict()), encoding="utf-8")
    (root / "report.md").write_text(render_markdown(report), encoding="utf-8")
    (root / "costs.csv").write_text(render_costs_csv(report), encoding="utf-8")
    for t in suite.trajectories:
        (tdir / trajectory_filename(t.question.id)).write_text(_dump(t.to_dict()), encoding="utf-8")
    info = {
        "created": datetime.now(timezone.utc).isoformat(timespec="seconds"),
        "python": sys.version.split()[0],
        **(meta or {}),
    }
    (root / "meta.json").write_text(_dump(info), encoding="utf-8")
    return root


def render_markdown(report: RunReport) -> str:
    """Correct-rate tables in the layout of the published result tables."""
    lines = [f"# {report.variant.name.value}", ""]
    for diff, scores in report.per_difficulty().items():
        names = [d.value for d in scores]
        rates = [s.correct_rate for s in scores.values()]
        lines.append(f"## {diff.value} questions")
        lines.append("")
        lines.append("| Method | " + " | ".join(names) + " | Average |")
        lines.append("|---" * (len(names) + 2) + "|")
        cells = [f"{round_half_up(r, 1):.1f}" for r in rates]
        avg = f"{round_half_up(average_correct_rate(rates)):.2f}"
        lines.append(f"| {report.variant.name.value} | " + " | ".join(cells) + f" | {avg} |")
        lines.append("")
    cost = report.average_cost
    lines.append(f"Total cost: {report.total_cost} responses")
    lines.append(f"Average cost: {'undefined (no correct answers)' if cost is None else f'{cost:.2f}'}")
    return "\n".join(lines) + "\n"


def render_costs_csv(report: RunReport) -> str:
    per = report.ledger.per_module
    cost = report.average_cost
    header = ["variant", "total_cost", "total_correct", "average_cost", *per]
    row = [
        report.variant.name.value,
        report.total_cost,
        report.total_correct,
        "" if cost is None else f"{cost:.6g}",
        *per.values(),
    ]
    return ",".join(header) + "\n" + ",".join(str(v) for v in row) + "\n"


# --- comparisons ------------------------------------------------------------


@dataclass(frozen=True)
class Delta:
    label: str
    a: float
    b: float

    @property
    def change(self) -> float | None:
        """Relative change of ``a`` over ``b`` in percent; None when b is 0."""
        if self.b == 0:
            return 0.0 if self.a == 0 else None
        return 100.0 * (self.a - self.b) / self.b

    def render(self) -> str:
        change = self.change
        if change is None:
            return UNDEFINED_CHANGE
        if change == 0:
            return NO_CHANGE
        arrow = "⇑" if change > 0 else "⇓"
        return f"{arrow}{round_half_up(abs(change), 1):.1f}%"


def compare_rates(a: Mapping[str, float], b: Mapping[str, float]) -> list[Delta]:
    """Deltas for the labels present in both, in the order of ``a``."""
    return [Delta(k, a[k], b[k]) for k in a if k in b]


def compare_runs(report_a: RunReport, report_b: RunReport) -> list[Delta]:
    def rates(r: RunReport) -> dict[str, float]:
        out = {d.value: s.correct_rate for d, s in r.per_dataset.items()}
        if out:
            out["Average"] = r.average_correct_rate
        return out

    return compare_rates(rates(report_a), rates(report_b))


def render_delta_table(deltas: Sequence[Delta]) -> str:
    return "\n".join(f"{d.label}\t{d.render()}" for d in deltas) + "\n"


@dataclass(frozen=True)
class ReferenceRow:
    difficulty: Difficulty
    model: str
    method: str
    dataset: str
    correct_rate: float
    source: str


def load_reference(path: str | Path | None = None) -> list[ReferenceRow]:
    """Published baseline and TUMS correct rates (the packaged CSV by default)."""
    if path is None:
        text = resources.files("tums").joinpath("reference_results.csv").read_text(encoding="utf-8")
    else:
        text = Path(path).read_text(encoding="utf-8")
    return [
        ReferenceRow(
            Difficulty(r["difficulty"]), r["model"], r["method"], r["dataset"],
            float(r["correct_rate"]), r["source"],
        )
        for r in csv.DictReader(text.splitlines())
    ]


def reference_rates(rows: Iterable[ReferenceRow], difficulty: Difficulty, model: str, method: str) -> dict[str, float]:
    return {
        r.dataset: r.correct_rate
        for r in rows
        if r.difficulty is difficulty and r.model == model and r.method == method
    }


def best_baseline(
    rows: Iterable[ReferenceRow], difficulty: Difficulty, model: str, exclude: str = "TUMS"
) -> dict[str, float]:
    """Per-dataset maximum over the other methods run with ``model``."""
    best: dict[str, float] = {}
    for r in rows:
        if r.difficulty is difficulty and r.model == model and r.method != exclude:
            best[r.dataset] = max(best.get(r.dataset, r.correct_rate), r.correct_rate)
    return best
