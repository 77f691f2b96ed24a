"""Prompt templates, few-shot exemplars and dataset hints.

Everything is read from a prompt directory (the packaged ``prompts/`` by
default)::

    VERSION
    recognizer/recognize.txt          recognizer/recognize.examples.txt
    decomposer/decompose.txt          decomposer/decompose.examples.txt
    processor/direct.<Tool>.txt
    processor/parallel.<Tool>.<stage>.txt
    processor/serial.<Tool>.<stage>.txt
    hints/<dataset>.<flavor>.txt

A template ``X.txt`` may have a sibling ``X.examples.txt`` whose exemplars are
separated by lines containing only ``---``; they fill ``{examples}``.
"""

from __future__ import annotations

import hashlib
import re
from collections.abc import Mapping, Sequence
from dataclasses import dataclass
from pathlib import Path
from types import MappingProxyType

from .core import (
    DatasetClass,
    HandlerStructure,
    Hint,
    HintFlavor,
    Question,
    Step,
    ToolName,
    TumsError,
)

DEFAULT_PROMPTS_DIR = Path(__file__).parent / "prompts"
PLACEHOLDERS = frozenset(
    {"question", "hint", "examples", "history", "tool", "subtask", "index", "context", "schema"}
)
MAX_RESULT_CHARS = 2000
TRUNCATION_MARKER = "…(truncated)"
EXEMPLAR_SEPARATOR = "---"

_PLACEHOLDER_RE = re.compile(r"\{(" + "|".join(sorted(PLACEHOLDERS)) + r")\}")


class PromptError(TumsError):
    pass


class UnregisteredPair(PromptError):
    pass


class InvalidStage(PromptError):
    pass


@dataclass(frozen=True)
class PromptTemplate:
    name: str
    body: str

    @property
    def required_placeholders(self) -> frozenset[str]:
        return frozenset(_PLACEHOLDER_RE.findall(self.body))

    def render(self, **values: str) -> str:
        missing = self.required_placeholders - values.keys()
        if missing:
            raise PromptError(f"template {self.name} is missing values for {sorted(missing)}")
        # single pass, so bound values containing "{question}" stay literal
        return _PLACEHOLDER_RE.sub(lambda m: values[m.group(1)], self.body)


@dataclass(frozen=True)
class HintCatalog:
    standard: Mapping[DatasetClass, Hint]
    preference: Mapping[DatasetClass, Hint]

    def get(self, dataset: DatasetClass, flavor: HintFlavor = HintFlavor.STANDARD) -> Hint:
        """Hint of the requested flavor, falling back to the standard hint."""
        if flavor is HintFlavor.PREFERENCE and dataset in self.preference:
            return self.preference[dataset]
        return self.standard[dataset]

    def problems(self) -> list[str]:
        out = [f"missing standard hint for {d.value}" for d in DatasetClass if d not in self.standard]
        out += [
            f"missing preference hint for {d.value}"
            for d in DatasetClass
            if d.is_tabular and d not in self.preference
        ]
        return out


def truncate_result(text: str, limit: int = MAX_RESULT_CHARS) -> str:
    if len(text) <= limit:
        return text
    return text[:limit] + TRUNCATION_MARKER


def format_history(steps: Sequence[Step]) -> str:
    """``Subtask k: ...`` / ``Result k: ...`` lines in index order."""
    lines = []
    for step in steps:
        shown = step.directive.render() if step.directive is not None else step.raw.strip()
        lines.append(f"Subtask {step.index}: {shown}")
        lines.append(f"Result {step.index}: {truncate_result(step.result)}")
    return "\n".join(lines)


def _strip_hint_lines(text: str) -> str:
    return "\n".join(line for line in text.split("\n") if not line.startswith("Hint:"))


def handler_template_name(structure: HandlerStructure, tool: ToolName, stage: str) -> str:
    if structure is HandlerStructure.DIRECT:
        return f"processor/direct.{tool.value}"
    return f"processor/{structure.value}.{tool.value}.{stage}"


class PromptCatalog:
    """Immutable set of templates, exemplars and hints loaded from one directory."""

    def __init__(
        self,
        templates: Mapping[str, PromptTemplate],
        exemplars: Mapping[str, tuple[str, ...]],
        hints: HintCatalog,
        version: str,
        checksum: str,
    ):
        self.templates = MappingProxyType(dict(templates))
        self.exemplars = MappingProxyType(dict(exemplars))
        self.hints = hints
        self.version = version
        self.checksum = checksum

    @classmethod
    def load(cls, prompts_dir: str | Path | None = None) -> PromptCatalog:
        root = Path(prompts_dir) if prompts_dir is not None else DEFAULT_PROMPTS_DIR
        if not root.is_dir():
            raise PromptError(f"prompt directory {root} does not exist")
        files = sorted(p for p in root.rglob("*") if p.is_file() and (p.suffix == ".txt" or p.name == "VERSION"))
        digest = hashlib.sha256()
        templates: dict[str, PromptTemplate] = {}
        exemplars: dict[str, tuple[str, ...]] = {}
        standard: dict[DatasetClass, Hint] = {}
        preference: dict[DatasetClass, Hint] = {}
        for path in files:
            rel = path.relative_to(root).as_posix()
            data = path.read_bytes()
            digest.update(rel.encode() + b"\0" + data + b"\0")
            text = data.decode("utf-8").replace("\r\n", "\n")
            if rel == "VERSION":
                continue
            if rel.startswith("hints/"):
                stem = path.name[: -len(".txt")]
                dataset_name, _, flavor_name = stem.partition(".")
                dataset = DatasetClass.parse(dataset_name)
                flavor = HintFlavor(flavor_name)
                hint = Hint(dataset, text.strip(), flavor)
                (standard if flavor is HintFlavor.STANDARD else preference)[dataset] = hint
            elif rel.endswith(".examples.txt"):
                exemplars[rel[: -len(".examples.txt")]] = split_exemplars(text)
            else:
                name = rel[: -len(".txt")]
                templates[name] = PromptTemplate(name, text.rstrip("\n"))
        version_file = root / "VERSION"
        version = version_file.read_text(encoding="utf-8").strip() if version_file.exists() else "unversioned"
        return cls(templates, exemplars, HintCatalog(standard, preference), version, digest.hexdigest())

    def template(self, name: str) -> PromptTemplate:
        try:
            return self.templates[name]
        except KeyError:
            raise PromptError(f"no template named {name!r}") from None

    def examples_for(self, name: str) -> str:
        return "\n\n".join(self.exemplars.get(name, ()))

    def _render(self, name: str, **values: str) -> str:
        tpl = self.template(name)
        if "examples" in tpl.required_placeholders and "examples" not in values:
            values["examples"] = self.examples_for(name)
        return tpl.render(**values)

    # --- recognizer ---

    def render_recognizer_prompt(self, q: Question, exemplars: Sequence[str] | None = None) -> str:
        name = "recognizer/recognize"
        shots = self.exemplars.get(name, ()) if exemplars is None else tuple(exemplars)
        if not shots:
            raise PromptError("the recognizer prompt needs at least one exemplar")
        return self._render(name, question=q.text, examples="\n\n".join(shots))

    # --- decomposer ---

    def render_decomposer_prompt(
        self, q: Question, hint: Hint | None, history: Sequence[Step], next_index: int
    ) -> str:
        if next_index != len(history) + 1:
            raise ValueError(f"next_index {next_index} does not follow {len(history)} history steps")
        name = "decomposer/decompose"
        body = self.template(name)
        examples = self.examples_for(name)
        hist = format_history(history)
        values = {
            "question": q.text,
            "hint": f"\nHint: {hint.text}" if hint is not None else "",
            "history": f"\n{hist}" if hist else "",
            "index": str(next_index),
            "examples": examples,
        }
        if hint is None:
            # no hint anywhere: not in the format block and not in exemplars
            body = PromptTemplate(body.name, _strip_hint_lines(body.body))
            values["examples"] = _strip_hint_lines(examples)
        return body.render(**values)

    # --- processor ---

    def has_handler(self, structure: HandlerStructure, tool: ToolName) -> bool:
        if structure is HandlerStructure.DIRECT:
            return handler_template_name(structure, tool, "direct") in self.templates
        prefix = f"processor/{structure.value}.{tool.value}."
        return any(n.startswith(prefix) for n in self.templates)

    def render_handler_prompt(
        self,
        structure: HandlerStructure,
        tool: ToolName,
        subtask_text: str,
        stage: str = "direct",
        *,
        context: str = "",
        schema: str = "",
    ) -> str:
        if not self.has_handler(structure, tool):
            raise UnregisteredPair(f"no {structure.value} handler prompts for {tool.value}")
        if (structure is HandlerStructure.DIRECT) != (stage == "direct"):
            raise InvalidStage(f"stage {stage!r} is not valid for the {structure.value} structure")
        name = handler_template_name(structure, tool, stage)
        if name not in self.templates:
            raise InvalidStage(f"no {stage!r} stage prompt for {structure.value} {tool.value}")
        return self._render(
            name,
            subtask=subtask_text,
            tool=tool.value,
            context=f"{context}\n" if context else "",
            schema=schema or "(no table loaded)",
        )

    def problems(self) -> list[str]:
        """Gaps that make the catalog unusable; empty when complete."""
        out = self.hints.problems()
        for name in ("recognizer/recognize", "decomposer/decompose"):
            if name not in self.templates:
                out.append(f"missing template {name}")
            elif not self.exemplars.get(name):
                out.append(f"missing exemplars for {name}")
        for tool in ToolName:
            if not self.has_handler(HandlerStructure.DIRECT, tool):
                out.append(f"missing direct handler prompt for {tool.value}")
        for name, tpl in self.templates.items():
            if "examples" in tpl.required_placeholders and not self.exemplars.get(name):
                out.append(f"template {name} uses {{examples}} but has no exemplar file")
        return out

    def summary(self) -> dict[str, object]:
        return {
            "version": self.version,
            "checksum": self.checksum,
            "templates": len(self.templates),
            "exemplar_sets": len(self.exemplars),
            "hints": len(self.hints.standard) + len(self.hints.preference),
        }


def split_exemplars(text: str) -> tuple[str, ...]:
    blocks, buf = [], []
    for line in text.replace("\r\n", "\n").split("\n"):
        if line.strip() == EXEMPLAR_SEPARATOR:
            blocks.append("\n".join(buf).strip("\n"))
            buf = []
        else:
            buf.append(line)
    blocks.append("\n".join(buf).strip("\n"))
    return tuple(b for b in blocks if b.strip())

