from __future__ import annotations

import pytest
from hypothesis import given
from hypothesis import strategies as st

from tums.core import DatasetClass, HintFlavor, Question
from tums.gateway import ScriptExhausted
from tums.recognizer import RecognitionOutcome, UnparseableClass, parse_dataset_label, recognize

Q = Question("q", "How many flights left BOS on 2022-01-01?")


@pytest.mark.parametrize(
    "raw, expected",
    [
        ("Keywords: flight. [Flight]", DatasetClass.FLIGHT),
        ("[flight]", DatasetClass.FLIGHT),
        ("It is [Coffee], no wait: [Yelp]", DatasetClass.YELP),
        ("Use [SQLInterpreter] on it. [Airbnb]", DatasetClass.AIRBNB),
        ("[DBLP] then [LoadDB]", DatasetClass.DBLP),
        ("[ SciREX ]", DatasetClass.SCIREX),
        ("[gsm8k]", DatasetClass.GSM8K),
    ],
)
def test_parse_label(raw, expected):
    assert parse_dataset_label(raw) is expected


@pytest.mark.parametrize("raw", ["", "Flight", "[Trains]", "[LoadDB]"])
def test_parse_label_failures(raw):
    with pytest.raises(UnparseableClass) as info:
        parse_dataset_label(raw)
    assert info.value.raw_response == raw


@given(st.text(max_size=200))
def test_parse_label_total(raw):
    try:
        assert isinstance(parse_dataset_label(raw), DatasetClass)
    except UnparseableClass:
        pass


def test_recognize_one_response(scripted, catalog):
    gw = scripted("Keywords: flight. [Flight]")
    out = recognize(Q, HintFlavor.STANDARD, gw, catalog)
    assert out.dataset is DatasetClass.FLIGHT and out.attempts == 1
    assert out.hint == catalog.hints.get(DatasetClass.FLIGHT)
    assert gw.ledger.per_module == {"recognizer": 1, "decomposer": 0, "processor": 0}
    assert gw.calls[0].tag == "recognize"


def test_recognize_preference_flavor(scripted, catalog):
    out = recognize(Q, HintFlavor.PREFERENCE, scripted("[Flight]"), catalog)
    assert out.hint.flavor is HintFlavor.PREFERENCE


def test_recognize_retries_once(scripted, catalog):
    gw = scripted("not sure", "[Coffee]")
    out = recognize(Q, HintFlavor.STANDARD, gw, catalog)
    assert out.dataset is DatasetClass.COFFEE and out.attempts == 2
    assert gw.calls[0].prompt == gw.calls[1].prompt


def test_recognize_gives_up_after_retry(scripted, catalog):
    gw = scripted("hmm", "still unsure", "[Flight]")
    with pytest.raises(UnparseableClass):
        recognize(Q, HintFlavor.STANDARD, gw, catalog)
    assert gw.ledger.total_responses == 2


def test_backend_errors_propagate(catalog):
    from tums.gateway import Gateway, ScriptedBackend

    gw = Gateway(ScriptedBackend(["[Flight]"]))
    gw.complete("x", "recognizer")
    with pytest.raises(ScriptExhausted):
        recognize(Q, HintFlavor.STANDARD, gw, catalog)


def test_outcome_checks_hint(catalog):
    with pytest.raises(ValueError):
        RecognitionOutcome(DatasetClass.YELP, catalog.hints.get(DatasetClass.FLIGHT), "[Yelp]")
