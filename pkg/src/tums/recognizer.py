"""Intent recognition: map a question to a dataset class and its hint."""

from __future__ import annotations

import re
from dataclasses import dataclass

from .core import DatasetClass, Hint, HintFlavor, ParseError, Question, UnknownDatasetClass
from .gateway import Gateway
from .prompting import PromptCatalog

_LABEL_RE = re.compile(r"\[([^\[\]\n]+)\]")


class UnparseableClass(ParseError):
    def __init__(self, message: str, raw_response: str):
        super().__init__(message)
        self.raw_response = raw_response


@dataclass(frozen=True)
class RecognitionOutcome:
    dataset: DatasetClass
    hint: Hint
    raw_response: str
    attempts: int = 1

    def __post_init__(self) -> None:
        if self.hint.dataset is not self.dataset:
            raise ValueError("hint dataset must match the recognized dataset")


def parse_dataset_label(raw: str) -> DatasetClass:
    """Last bracketed token that names a dataset class.

    Bracketed tokens that are not dataset names (a stray ``[Tool]`` in the
    reasoning, say) are skipped rather than treated as a failed parse.
    """
    for m in reversed(list(_LABEL_RE.finditer(raw))):
        try:
            return DatasetClass.parse(m.group(1))
        except UnknownDatasetClass:
            continue
    raise UnparseableClass("no [DATASET] label in recognizer response", raw)


def recognize(
    q: Question,
    flavor: HintFlavor,
    gateway: Gateway,
    catalog: PromptCatalog,
) -> RecognitionOutcome:
    """Classify ``q``; one retry with the same prompt, then UnparseableClass."""
    prompt = catalog.render_recognizer_prompt(q)
    last: UnparseableClass | None = None
    for attempt in (1, 2):
        raw = gateway.complete(prompt, "recognizer", tag="recognize")
        try:
            dataset = parse_dataset_label(raw)
        except UnparseableClass as exc:
            last = exc
            continue
        return RecognitionOutcome(dataset, catalog.hints.get(dataset, flavor), raw, attempt)
    assert last is not None
    raise last
