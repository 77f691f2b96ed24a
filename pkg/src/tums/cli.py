"""Command line entry point: ``tums run``, ``tums ask`` and ``tums validate``.

Every flag can also be set in a TOML config file (``--config``); flags win.
Exit codes: 0 success, 1 validation problems, 2 usage or configuration
error, 3 backend failure.
"""

from __future__ import annotations

import argparse
import logging
import os
import re
import sys
from dataclasses import dataclass, fields
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, TextIO

from . import __version__
from .core import DEFAULT_MAX_STEPS, DatasetClass, Difficulty, Question, Termination, Trajectory, TumsError
from .datastore import DATASET_STORES, Stores, load_data_dir, load_questions, question_files
from .gateway import BackendError, Gateway, HttpBackend, ScriptedBackend
from .harness import (
    VariantConfig,
    module_generation_configs,
    render_markdown,
    run_question,
    run_suite,
)
from .processor import HandlerRegistry
from .prompting import PromptCatalog, format_history

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

EXIT_OK = 0
EXIT_INVALID = 1
EXIT_USAGE = 2
EXIT_BACKEND = 3

DEFAULT_API_KEY_ENV = "TUMS_API_KEY"
_ENV_NAME_RE = re.compile(r"[A-Za-z_][A-Za-z0-9_]*")

log = logging.getLogger("tums")


class ConfigError(Exception):
    pass


@dataclass(frozen=True)
class CliConfig:
    data_dir: Path | None = None
    prompts_dir: Path | None = None
    variant: str = "TUMS"
    backend: str = "http"
    endpoint: str | None = None
    model: str | None = None
    api_key_env: str = DEFAULT_API_KEY_ENV
    script: Path | None = None
    handlers: Path | None = None
    max_steps: int = DEFAULT_MAX_STEPS
    workers: int = 1
    out: Path = Path("runs")

    def validate(self, needs_data: bool = True, needs_backend: bool = True) -> None:
        if needs_data:
            if self.data_dir is None:
                raise ConfigError("no data directory given (--data-dir)")
            if not self.data_dir.is_dir():
                raise ConfigError(f"data directory {self.data_dir} does not exist")
        if self.prompts_dir is not None and not self.prompts_dir.is_dir():
            raise ConfigError(f"prompt directory {self.prompts_dir} does not exist")
        if self.handlers is not None and not self.handlers.is_file():
            raise ConfigError(f"handlers file {self.handlers} does not exist")
        if self.max_steps < 1:
            raise ConfigError("max_steps must be at least 1")
        if self.workers < 1:
            raise ConfigError("workers must be at least 1")
        try:
            VariantConfig.preset(self.variant)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        if not _ENV_NAME_RE.fullmatch(self.api_key_env):
            # a value that is not an identifier is most likely a pasted key
            raise ConfigError(
                "api_key_env must name an environment variable; API keys are never accepted inline"
            )
        if not needs_backend:
            return
        if self.backend == "scripted":
            if self.script is None:
                raise ConfigError("the scripted backend needs --script")
            if not self.script.is_file():
                raise ConfigError(f"script file {self.script} does not exist")
        elif self.backend == "http":
            if not self.endpoint or not self.model:
                raise ConfigError("the http backend needs --endpoint and --model")
        else:
            raise ConfigError(f"unknown backend {self.backend!r} (expected http or scripted)")


_PATH_FIELDS = {"data_dir", "prompts_dir", "script", "handlers", "out"}
_INT_FIELDS = {"max_steps", "workers"}
_CONFIG_KEYS = {f.name for f in fields(CliConfig)}


def load_config_file(path: Path) -> dict[str, Any]:
    """Read a TOML config; relative paths resolve against the file's directory."""
    try:
        with path.open("rb") as fh:
            data = tomllib.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"malformed config {path}: {exc}") from None
    unknown = sorted(set(data) - _CONFIG_KEYS)
    if unknown:
        raise ConfigError(f"unknown config keys in {path}: {', '.join(unknown)}")
    out: dict[str, Any] = {}
    for key, value in data.items():
        if key in _PATH_FIELDS:
            p = Path(str(value)).expanduser()
            out[key] = p if p.is_absolute() else path.parent / p
        elif key in _INT_FIELDS:
            if not isinstance(value, int) or isinstance(value, bool):
                raise ConfigError(f"{key} must be an integer")
            out[key] = value
        else:
            out[key] = str(value)
    return out


def resolve_config(args: argparse.Namespace) -> CliConfig:
    values: dict[str, Any] = {}
    if args.config is not None:
        values.update(load_config_file(Path(args.config)))
    for key in _CONFIG_KEYS:
        flag = getattr(args, key, None)
        if flag is not None:
            values[key] = Path(flag) if key in _PATH_FIELDS else flag
    return CliConfig(**values)


# --- shared plumbing --------------------------------------------------------


def _color(enabled: bool, code: str, text: str) -> str:
    return f"\033[{code}m{text}\033[0m" if enabled else text


def _use_color(stream: TextIO) -> bool:
    return "NO_COLOR" not in os.environ and hasattr(stream, "isatty") and stream.isatty()


def build_gateway(cfg: CliConfig) -> Gateway:
    if cfg.backend == "scripted":
        assert cfg.script is not None
        backend: Any = ScriptedBackend.from_file(cfg.script)
    else:
        assert cfg.endpoint and cfg.model
        backend = HttpBackend(cfg.endpoint, cfg.api_key_env, cfg.model)
    return Gateway(backend, module_configs=module_generation_configs())


def load_registry(cfg: CliConfig) -> HandlerRegistry:
    if cfg.handlers is None:
        return HandlerRegistry.default()
    return HandlerRegistry.from_toml(cfg.handlers)


def _load_common(cfg: CliConfig) -> tuple[Stores, PromptCatalog, HandlerRegistry]:
    assert cfg.data_dir is not None
    return load_data_dir(cfg.data_dir), PromptCatalog.load(cfg.prompts_dir), load_registry(cfg)


def _workers(cfg: CliConfig) -> int:
    if cfg.backend == "scripted" and cfg.workers > 1:
        log.warning("the scripted backend replays responses in order; running with 1 worker")
        return 1
    return cfg.workers


def select_questions(
    data_dir: Path,
    datasets: list[str] | None,
    difficulties: list[str] | None,
    files: list[str] | None,
    limit: int | None,
) -> list[Question]:
    paths = [Path(f) for f in files] if files else question_files(data_dir)
    wanted_ds = {DatasetClass.parse(d) for d in datasets} if datasets else None
    wanted_diff = {Difficulty(d.capitalize()) for d in difficulties} if difficulties else None
    out = []
    for path in paths:
        for q in load_questions(path):
            if wanted_ds is not None and q.dataset not in wanted_ds:
                continue
            if wanted_diff is not None and q.difficulty not in wanted_diff:
                continue
            out.append(q)
    return out[:limit] if limit is not None else out


def render_trajectory(t: Trajectory) -> str:
    lines = [f"Question: {t.question.text}"]
    if t.recognized is not None:
        lines.append(f"Recognized: {t.recognized.value}")
    if t.hint is not None:
        lines.append(f"Hint: {t.hint.text}")
    history = format_history(t.steps)
    if history:
        lines.append(history)
    lines += [f"Note: {n}" for n in t.notes]
    if t.termination is Termination.FINISHED:
        lines.append(f"Answer: {t.final_answer}")
    elif t.termination is Termination.MAX_STEPS_EXCEEDED:
        lines.append("no answer (max steps)")
    else:
        lines.append("no answer (aborted)")
    return "\n".join(lines)


def _timestamped(out: Path) -> Path:
    stamp = datetime.now(timezone.utc).strftime("%Y%m%dT%H%M%SZ")
    run_dir = out / stamp
    n = 1
    while run_dir.exists():
        n += 1
        run_dir = out / f"{stamp}-{n}"
    return run_dir


# --- commands ---------------------------------------------------------------


def cmd_run(args: argparse.Namespace, cfg: CliConfig, stdout: TextIO) -> int:
    cfg.validate()
    assert cfg.data_dir is not None
    stores, catalog, registry = _load_common(cfg)
    questions = select_questions(cfg.data_dir, args.dataset, args.difficulty, args.questions, args.limit)
    if not questions:
        raise ConfigError("no questions selected")
    variant = VariantConfig.preset(cfg.variant)
    run_dir = Path(args.run_dir) if args.run_dir else _timestamped(cfg.out)
    suite = run_suite(
        questions,
        variant,
        build_gateway(cfg),
        stores,
        catalog,
        registry=registry,
        max_steps=cfg.max_steps,
        workers=_workers(cfg),
        out_dir=run_dir,
    )
    report = suite.report
    color = _use_color(stdout)
    for r in report.results:
        mark = _color(color, "32", "correct") if r.correct else _color(color, "31", "wrong")
        print(f"{r.question.id}\t{mark}\t{r.predicted}", file=stdout)
    print(render_markdown(report), file=stdout, end="")
    print(f"Run written to {run_dir}", file=stdout)
    if report.aborted:
        print(f"{len(report.aborted)} question(s) aborted by backend errors", file=sys.stderr)
        return EXIT_BACKEND
    return EXIT_OK


def cmd_ask(args: argparse.Namespace, cfg: CliConfig, stdout: TextIO) -> int:
    cfg.validate()
    stores, catalog, registry = _load_common(cfg)
    variant = VariantConfig.preset(cfg.variant)
    q = Question("ask", args.question)
    t = run_question(
        q, variant, build_gateway(cfg), stores, catalog, variant.registry(registry), cfg.max_steps
    )
    print(render_trajectory(t), file=stdout)
    return EXIT_BACKEND if t.termination is Termination.ABORTED else EXIT_OK


def cmd_validate(args: argparse.Namespace, cfg: CliConfig, stdout: TextIO) -> int:
    cfg.validate(needs_backend=False)
    stores, catalog, registry = _load_common(cfg)
    assert cfg.data_dir is not None
    problems = catalog.problems() + registry.problems(catalog)
    print(f"prompts: version {catalog.version}, checksum {catalog.checksum}", file=stdout)
    s = catalog.summary()
    print(f"prompts: {s['templates']} templates, {s['exemplar_sets']} exemplar sets, {s['hints']} hints", file=stdout)
    print(f"datasets: {len(DatasetClass)}", file=stdout)
    for d in DatasetClass:
        store = DATASET_STORES[d]
        if store is None:
            print(f"  {d.value}: no external store needed", file=stdout)
            continue
        if store in stores.tables:
            t = stores.tables[store]
            desc = f"table {store} ({len(t.rows)} rows, {len(t.columns)} columns)"
        elif store in stores.graphs:
            g = stores.graphs[store]
            desc = f"graph {store} ({len(g.nodes)} nodes, {len(g.edges)} edges)"
        elif store in stores.corpora:
            desc = f"corpus {store} ({len(stores.corpora[store].documents)} documents)"
        else:
            problems.append(f"missing store {store} for {d.value}")
            desc = "MISSING"
        print(f"  {d.value}: {desc}", file=stdout)
    n_questions = 0
    for path in question_files(cfg.data_dir):
        try:
            n_questions += len(load_questions(path))
        except (TumsError, ValueError) as exc:
            problems.append(f"{path.name}: {exc}")
    print(f"questions: {n_questions}", file=stdout)
    print("handlers: " + ", ".join(f"{t}={v['structure']}" for t, v in registry.to_dict().items()), file=stdout)
    if problems:
        for p in problems:
            print(f"problem: {p}", file=sys.stderr)
        return EXIT_INVALID
    print("ok", file=stdout)
    return EXIT_OK


# --- argument parsing -------------------------------------------------------


def _common_flags(p: argparse.ArgumentParser) -> None:
    # defaults are None so that config-file values survive unless overridden
    p.add_argument("--config", help="TOML file with any of the options below")
    p.add_argument("--data-dir", dest="data_dir", help="root holding data/ and questions/")
    p.add_argument("--prompts-dir", dest="prompts_dir", help="prompt directory (default: packaged prompts)")
    p.add_argument("--handlers", help="TOML handler-structure overrides")
    p.add_argument("--variant", help="TUMS, TUMS-NIR, TUMS-OS or TUMS-PRE (default TUMS)")
    p.add_argument("--backend", choices=["http", "scripted"], help="model backend (default http)")
    p.add_argument("--endpoint", help="chat-completions base URL")
    p.add_argument("--model", help="model name sent to the endpoint")
    p.add_argument("--api-key-env", dest="api_key_env", help=f"environment variable holding the API key (default {DEFAULT_API_KEY_ENV})")
    p.add_argument("--script", help="JSON or JSONL response script for the scripted backend")
    p.add_argument("--max-steps", dest="max_steps", type=int, help=f"step limit per question (default {DEFAULT_MAX_STEPS})")
    p.add_argument("--workers", type=int, help="questions run concurrently (default 1)")
    p.add_argument("--out", help="directory for run folders (default runs)")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tums", description="Tool-use agent with per-tool parameter handlers.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run a question suite and write a report")
    _common_flags(run)
    run.add_argument("--dataset", action="append", help="only this dataset class (repeatable)")
    run.add_argument("--difficulty", action="append", choices=["easy", "hard"], help="only this difficulty")
    run.add_argument("--questions", action="append", help="question JSONL file (repeatable; default all)")
    run.add_argument("--limit", type=int, help="run at most this many questions")
    run.add_argument("--run-dir", dest="run_dir", help="exact output folder instead of OUT/<timestamp>")
    run.set_defaults(func=cmd_run)

    ask = sub.add_parser("ask", help="answer one question and print the trajectory")
    _common_flags(ask)
    ask.add_argument("question", help="question text")
    ask.set_defaults(func=cmd_ask)

    val = sub.add_parser("validate", help="check data, prompts and handlers without model calls")
    _common_flags(val)
    val.set_defaults(func=cmd_validate)
    return parser


def main(argv: list[str] | None = None, stdout: TextIO | None = None) -> int:
    stdout = stdout or sys.stdout
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        cfg = resolve_config(args)
        return args.func(args, cfg, stdout)
    except (ConfigError, TumsError, ValueError, OSError) as exc:
        print(f"tums: error: {exc}", file=sys.stderr)
        return EXIT_BACKEND if isinstance(exc, BackendError) else EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
