"""Turn a (tool, subtask) pair into a concrete tool invocation.

Each tool is bound to one handler structure:

* direct: one prompt, one ``Tool[PARAMETER]`` answer;
* parallel: a categorize prompt splits the subtask, one prompt per category
  writes that category's fragment, and the fragments are merged locally (a
  single repair prompt runs only if the merged parameter fails its pre-check);
* serial: ordered stages, each seeing the earlier stages' outputs, the last
  one answering ``Tool[PARAMETER]``.
"""

from __future__ import annotations

import re
from collections.abc import Mapping, Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from types import MappingProxyType

from .core import (
    HandlerStructure,
    ParseError,
    ToolInvocation,
    ToolName,
    TumsError,
    parse_invocation,
)
from .gateway import Gateway
from .prompting import PromptCatalog
from .toolkit.conditions import parse_conditions, split_top_level
from .toolkit.errors import ToolError

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

DEFAULT_CATEGORIES = ("time", "space", "object")
DEFAULT_SQL_STAGES = ("skeleton", "mapping", "synthesis")
NONE_FRAGMENT = "none"

# label under which a serial stage's output is shown to later stages
STAGE_LABELS = {"skeleton": "Skeleton:", "mapping": "Mappings:"}


class ToolMismatch(ParseError):
    def __init__(self, expected: ToolName, got: ToolName):
        super().__init__(f"expected a {expected.value} call, got {got.value}")
        self.expected = expected
        self.got = got


class StageParseError(ParseError):
    pass


class EmptyConditions(TumsError):
    pass


class HandlerFailed(TumsError):
    """A handler stage failed; ``cause`` is the underlying error."""

    def __init__(self, tool: ToolName, stage: str, stage_index: int, cause: Exception):
        super().__init__(
            f"{tool.value} handler failed at stage {stage_index} ({stage}): "
            f"{type(cause).__name__}: {cause}"
        )
        self.tool = tool
        self.stage = stage
        self.stage_index = stage_index
        self.cause = cause


# --- registry ---------------------------------------------------------------


@dataclass(frozen=True)
class HandlerSpec:
    """Structure plus its stage list (categories for parallel, stages for serial)."""

    structure: HandlerStructure
    stages: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        object.__setattr__(self, "stages", tuple(self.stages))
        if self.structure is HandlerStructure.DIRECT:
            if self.stages:
                raise ValueError("a direct handler takes no stages")
            return
        if len(set(self.stages)) != len(self.stages):
            raise ValueError(f"duplicate stage names in {self.stages}")
        if self.structure is HandlerStructure.PARALLEL:
            if not self.stages:
                raise ValueError("a parallel handler needs at least one category")
            reserved = {"categorize", "merge", "direct"} & set(self.stages)
            if reserved:
                raise ValueError(f"category names {sorted(reserved)} are reserved")
        elif len(self.stages) < 2:
            raise ValueError("a serial handler needs at least two stages")

    def to_dict(self) -> dict[str, object]:
        out: dict[str, object] = {"structure": self.structure.value}
        if self.structure is HandlerStructure.PARALLEL:
            out["categories"] = list(self.stages)
        elif self.structure is HandlerStructure.SERIAL:
            out["stages"] = list(self.stages)
        return out


DIRECT = HandlerSpec(HandlerStructure.DIRECT)


class HandlerRegistry:
    """Total, immutable map from every tool to its handler spec."""

    def __init__(self, specs: Mapping[ToolName, HandlerSpec]):
        missing = [t.value for t in ToolName if t not in specs]
        if missing:
            raise ValueError(f"registry has no handler for {', '.join(missing)}")
        if specs[ToolName.FINISH].structure is not HandlerStructure.DIRECT:
            raise ValueError("Finish must use the direct structure")
        self._specs = MappingProxyType(dict(specs))

    @classmethod
    def default(cls) -> HandlerRegistry:
        specs = dict.fromkeys(ToolName, DIRECT)
        specs[ToolName.FILTER_DB] = HandlerSpec(HandlerStructure.PARALLEL, DEFAULT_CATEGORIES)
        specs[ToolName.SQL_INTERPRETER] = HandlerSpec(HandlerStructure.SERIAL, DEFAULT_SQL_STAGES)
        return cls(specs)

    @classmethod
    def direct_only(cls) -> HandlerRegistry:
        return cls(dict.fromkeys(ToolName, DIRECT))

    @classmethod
    def from_toml(cls, path: str | Path, base: HandlerRegistry | None = None) -> HandlerRegistry:
        """Override ``base`` (the default registry) with a handlers file::

            [tools.FilterDB]
            structure = "parallel"
            categories = ["time", "space", "object"]

            [tools.SQLInterpreter]
            structure = "direct"
        """
        with open(path, "rb") as fh:
            data = tomllib.load(fh)
        return (base or cls.default()).with_overrides(data.get("tools", {}))

    def with_overrides(self, table: Mapping[str, Mapping[str, object]]) -> HandlerRegistry:
        specs = dict(self._specs)
        for name, entry in table.items():
            tool = ToolName.parse(name)
            structure = HandlerStructure.parse(str(entry.get("structure", "")))
            key = "categories" if structure is HandlerStructure.PARALLEL else "stages"
            stages = entry.get(key, ())
            if structure is HandlerStructure.PARALLEL and not stages:
                stages = DEFAULT_CATEGORIES
            if not isinstance(stages, (list, tuple)) or not all(isinstance(s, str) for s in stages):
                raise ValueError(f"{name}.{key} must be a list of strings")
            specs[tool] = HandlerSpec(structure, tuple(stages))
        return HandlerRegistry(specs)

    def spec(self, tool: ToolName) -> HandlerSpec:
        return self._specs[tool]

    def structure_of(self, tool: ToolName) -> HandlerStructure:
        return self._specs[tool].structure

    @property
    def is_direct_only(self) -> bool:
        return all(s.structure is HandlerStructure.DIRECT for s in self._specs.values())

    def problems(self, catalog: PromptCatalog) -> list[str]:
        """Stage prompts the registry needs but the catalog lacks."""
        out = []
        for tool, spec in self._specs.items():
            if spec.structure is HandlerStructure.DIRECT:
                needed = [f"processor/direct.{tool.value}"]
            else:
                head = f"processor/{spec.structure.value}.{tool.value}."
                extra = ("categorize", *spec.stages, "merge") if spec.structure is HandlerStructure.PARALLEL else spec.stages
                needed = [head + s for s in extra]
            out += [f"missing handler prompt {n}" for n in needed if n not in catalog.templates]
        return out

    def to_dict(self) -> dict[str, object]:
        return {t.value: self._specs[t].to_dict() for t in ToolName}


# --- stage checks -----------------------------------------------------------

_CATEGORY_LINE = re.compile(r"^\s*([A-Za-z_][\w ]*?)\s*:\s*(.*?)\s*$")
_MAPPING_KEYS = ("table", "select")


def parse_categories(raw: str, categories: Sequence[str]) -> dict[str, str]:
    """``name: info`` lines for the given categories; absent ones become none."""
    found: dict[str, str] = {}
    wanted = {c.casefold(): c for c in categories}
    for line in raw.splitlines():
        m = _CATEGORY_LINE.match(line)
        if m and m.group(1).casefold() in wanted:
            # a later line for the same category overrides an earlier one
            found[wanted[m.group(1).casefold()]] = m.group(2) or NONE_FRAGMENT
    if not found:
        raise StageParseError(f"no '<category>: ...' lines for {', '.join(categories)}")
    return {c: found.get(c, NONE_FRAGMENT) for c in categories}


def is_none_fragment(text: str) -> bool:
    return text.strip().strip(".").casefold() in ("none", "")


def merge_fragments(fragments: Sequence[str]) -> str:
    """Join non-none fragments in order, dropping repeated conditions."""
    seen: dict[str, None] = {}
    for frag in fragments:
        if is_none_fragment(frag):
            continue
        try:
            parts = split_top_level(frag)
        except ToolError:
            parts = [frag]
        for part in parts:
            part = part.strip()
            if part:
                seen.setdefault(part, None)
    return ", ".join(seen)


def _precheck(tool: ToolName, parameter: str) -> bool:
    if not parameter.strip():
        return False
    if tool is ToolName.FILTER_DB:
        try:
            parse_conditions(parameter)
        except ToolError:
            return False
    return True


def _check_stage_text(tool: ToolName, stage: str, text: str) -> str:
    text = text.strip()
    if not text:
        raise StageParseError(f"empty {stage} output")
    if tool is ToolName.SQL_INTERPRETER:
        if stage == "skeleton" and "select" not in text.casefold():
            raise StageParseError("skeleton has no SELECT clause")
        if stage == "mapping":
            keys = {
                line.split(":", 1)[0].strip().casefold()
                for line in text.splitlines()
                if ":" in line
            }
            missing = [k for k in _MAPPING_KEYS if k not in keys]
            if missing:
                raise StageParseError(f"mapping lacks {', '.join(k + ':' for k in missing)} lines")
    return text


def _label(stage: str) -> str:
    return STAGE_LABELS.get(stage, f"{stage.capitalize()}:")


def _expect_tool(tool: ToolName, raw: str) -> ToolInvocation:
    inv = parse_invocation(raw)
    if inv.tool is not tool:
        raise ToolMismatch(tool, inv.tool)
    return ToolInvocation(tool, inv.parameter.strip())


# --- processor --------------------------------------------------------------


class Processor:
    """Runs handler structures through the gateway.

    ``concurrent_categories`` issues the per-category calls of a parallel
    handler at once; keep it off with an ordered (scripted) backend.
    """

    def __init__(
        self,
        registry: HandlerRegistry,
        gateway: Gateway,
        catalog: PromptCatalog,
        concurrent_categories: bool = False,
    ):
        self.registry = registry
        self.gateway = gateway
        self.catalog = catalog
        self.concurrent_categories = concurrent_categories

    def generate_invocation(self, tool: ToolName, subtask_text: str, schema: str = "") -> ToolInvocation:
        spec = self.registry.spec(tool)
        if spec.structure is HandlerStructure.DIRECT:
            return self.run_direct(tool, subtask_text, schema)
        if spec.structure is HandlerStructure.PARALLEL:
            return self.run_parallel(tool, subtask_text, spec.stages, schema)
        return self.run_serial(tool, subtask_text, spec.stages, schema)

    def _ask(self, structure: HandlerStructure, tool: ToolName, stage: str, subtask: str, **kw: str) -> str:
        prompt = self.catalog.render_handler_prompt(structure, tool, subtask, stage, **kw)
        tag = f"direct:{tool.value}" if stage == "direct" else f"{structure.value}:{tool.value}:{stage}"
        return self.gateway.complete(prompt, "processor", tag=tag)

    def run_direct(self, tool: ToolName, subtask_text: str, schema: str = "") -> ToolInvocation:
        raw = self._ask(HandlerStructure.DIRECT, tool, "direct", subtask_text, schema=schema)
        try:
            return _expect_tool(tool, raw)
        except ParseError as exc:
            raise HandlerFailed(tool, "direct", 1, exc) from exc

    def run_parallel(
        self,
        tool: ToolName,
        subtask_text: str,
        categories: Sequence[str] = DEFAULT_CATEGORIES,
        schema: str = "",
    ) -> ToolInvocation:
        if not categories:
            raise ValueError("categories must be non-empty")
        par = HandlerStructure.PARALLEL
        raw = self._ask(par, tool, "categorize", subtask_text, schema=schema)
        try:
            info = parse_categories(raw, categories)
        except ParseError as exc:
            raise HandlerFailed(tool, "categorize", 1, exc) from exc

        def per_category(cat: str) -> str:
            return self._ask(par, tool, cat, info[cat], schema=schema)

        if self.concurrent_categories:
            with ThreadPoolExecutor(max_workers=len(categories)) as pool:
                raws = list(pool.map(per_category, categories))
        else:
            raws = [per_category(c) for c in categories]
        fragments = []
        for i, (cat, text) in enumerate(zip(categories, raws), start=2):
            if is_none_fragment(text):
                fragments.append(NONE_FRAGMENT)
                continue
            try:
                fragments.append(_expect_tool(tool, text).parameter)
            except ParseError as exc:
                raise HandlerFailed(tool, cat, i, exc) from exc

        merge_index = len(categories) + 2
        merged = merge_fragments(fragments)
        if not merged:
            raise HandlerFailed(tool, "merge", merge_index, EmptyConditions("every category yielded none"))
        if _precheck(tool, merged):
            return ToolInvocation(tool, merged)
        raw = self._ask(par, tool, "merge", subtask_text, context=f"Information: {merged}", schema=schema)
        try:
            inv = _expect_tool(tool, raw)
            if not _precheck(tool, inv.parameter):
                raise StageParseError(f"repaired parameter {inv.parameter!r} is still invalid")
        except ParseError as exc:
            raise HandlerFailed(tool, "merge", merge_index, exc) from exc
        return inv

    def run_serial(
        self,
        tool: ToolName,
        subtask_text: str,
        stages: Sequence[str] = DEFAULT_SQL_STAGES,
        schema: str = "",
    ) -> ToolInvocation:
        if len(stages) < 2:
            raise ValueError("a serial handler needs at least two stages")
        context: list[str] = []
        for i, stage in enumerate(stages, start=1):
            raw = self._ask(
                HandlerStructure.SERIAL, tool, stage, subtask_text, context="\n".join(context), schema=schema
            )
            try:
                if i == len(stages):
                    return _expect_tool(tool, raw)
                text = _check_stage_text(tool, stage, raw)
            except ParseError as exc:
                raise HandlerFailed(tool, stage, i, exc) from exc
            sep = "\n" if "\n" in text else " "
            context.append(f"{_label(stage)}{sep}{text}")
        raise AssertionError("unreachable")


def generate_invocation(
    tool: ToolName,
    subtask_text: str,
    registry: HandlerRegistry,
    gateway: Gateway,
    catalog: PromptCatalog,
    schema: str = "",
) -> ToolInvocation:
    return Processor(registry, gateway, catalog).generate_invocation(tool, subtask_text, schema)

