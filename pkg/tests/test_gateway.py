from __future__ import annotations

import json
import threading

import pytest

from tums.gateway import (
    BackendRejected,
    BackendUnreachable,
    BudgetLedger,
    Gateway,
    GenerationConfig,
    HttpBackend,
    MissingApiKey,
    ScriptedBackend,
    ScriptEntry,
    ScriptExhausted,
    ScriptMismatch,
)


def test_generation_defaults_match_experiment_settings():
    cfg = GenerationConfig()
    assert (cfg.temperature, cfg.max_tokens, cfg.seed) == (0.0, 256, 0)
    with pytest.raises(ValueError):
        GenerationConfig(max_tokens=0)


def test_ledger_counts_per_module():
    ledger = BudgetLedger()
    ledger.record("recognizer")
    ledger.record("processor", 3)
    other = BudgetLedger()
    other.record("decomposer", 2)
    ledger.merge(other)
    assert ledger.per_module == {"recognizer": 1, "decomposer": 2, "processor": 3}
    assert ledger.total_responses == 6
    with pytest.raises(ValueError):
        ledger.record("executor")


def test_ledger_is_thread_safe():
    ledger = BudgetLedger()

    def work():
        for _ in range(1000):
            ledger.record("processor")

    threads = [threading.Thread(target=work) for _ in range(8)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert ledger.total_responses == 8000


def test_scripted_backend_replays_in_order():
    g = Gateway(ScriptedBackend(["a", ("needle", "b"), ScriptEntry("c")]))
    assert g.complete("p1", "decomposer") == "a"
    assert g.complete("hay needle hay", "processor", tag="direct:LoadDB") == "b"
    assert g.complete("p3", "recognizer") == "c"
    assert g.ledger.per_module == {"recognizer": 1, "decomposer": 1, "processor": 1}
    assert [c.tag for c in g.calls] == ["", "direct:LoadDB", ""]
    with pytest.raises(ScriptExhausted):
        g.complete("p4", "decomposer")
    assert g.ledger.total_responses == 3


def test_scripted_backend_checks_expectations():
    g = Gateway(ScriptedBackend([("needle", "x")]))
    with pytest.raises(ScriptMismatch):
        g.complete("haystack", "decomposer")
    assert g.ledger.total_responses == 0


def test_script_file_formats(tmp_path):
    js = tmp_path / "s.json"
    js.write_text(json.dumps([{"response": "a"}, {"response": "b", "expect": "p"}]))
    jl = tmp_path / "s.jsonl"
    jl.write_text('{"response": "a"}\n\n{"response": "b", "expect": "p"}\n')
    for path in (js, jl):
        b = ScriptedBackend.from_file(path)
        assert b.entries == (ScriptEntry("a"), ScriptEntry("b", "p"))
    with pytest.raises(ValueError):
        ScriptedBackend([])


def test_gateway_rejects_unknown_caller_and_empty_prompt():
    g = Gateway(ScriptedBackend(["a"]))
    with pytest.raises(ValueError):
        g.complete("p", "executor")
    with pytest.raises(ValueError):
        g.complete("", "decomposer")


def test_fork_has_fresh_ledger():
    g = Gateway(ScriptedBackend(["a", "b"]))
    g.complete("p", "decomposer")
    f = g.fork()
    f.complete("p", "processor")
    assert f.ledger.per_module["processor"] == 1
    assert g.ledger.per_module["processor"] == 0


# --- HTTP backend against a local stub server ---


def _ok(text):
    return 200, {"choices": [{"message": {"role": "assistant", "content": text}}]}


def _backend(url, sleeps):
    return HttpBackend(url, "TUMS_TEST_KEY", "test-model", sleep=sleeps.append)


def test_http_retries_then_succeeds(stub_server, monkeypatch):
    monkeypatch.setenv("TUMS_TEST_KEY", "secret-value")
    url, stub = stub_server([(500, "oops"), (500, "oops"), _ok("LoadDB[flights]")])
    sleeps = []
    cfg = GenerationConfig(stop_sequences=("\nResult",))
    assert _backend(url, sleeps).generate("hello", cfg) == "LoadDB[flights]"
    assert sleeps == [1.0, 2.0]
    assert len(stub.requests) == 3
    req = stub.requests[-1]
    assert req["path"] == "/v1/chat/completions"
    assert req["headers"]["Authorization"] == "Bearer secret-value"
    assert req["body"] == {
        "model": "test-model",
        "messages": [{"role": "user", "content": "hello"}],
        "temperature": 0.0,
        "max_tokens": 256,
        "seed": 0,
        "stop": ["\nResult"],
    }


def test_http_gives_up_after_three_attempts(stub_server, monkeypatch):
    monkeypatch.setenv("TUMS_TEST_KEY", "k")
    url, stub = stub_server([(503, "busy")] * 3)
    with pytest.raises(BackendUnreachable):
        _backend(url, []).generate("hello", GenerationConfig())
    assert len(stub.requests) == 3


def test_http_client_errors_are_not_retried(stub_server, monkeypatch):
    monkeypatch.setenv("TUMS_TEST_KEY", "k")
    url, stub = stub_server([(400, {"error": "bad request"})])
    with pytest.raises(BackendRejected) as info:
        _backend(url, []).generate("hello", GenerationConfig())
    assert info.value.status == 400
    assert len(stub.requests) == 1


def test_http_malformed_body(stub_server, monkeypatch):
    monkeypatch.setenv("TUMS_TEST_KEY", "k")
    url, _ = stub_server([(200, "not json")])
    with pytest.raises(BackendRejected):
        _backend(url, []).generate("hello", GenerationConfig())


def test_http_null_content_is_empty(stub_server, monkeypatch):
    monkeypatch.setenv("TUMS_TEST_KEY", "k")
    url, _ = stub_server([(200, {"choices": [{"message": {"content": None}}]})])
    assert _backend(url, []).generate("hello", GenerationConfig()) == ""


def test_http_missing_key(monkeypatch):
    monkeypatch.delenv("TUMS_TEST_KEY", raising=False)
    with pytest.raises(MissingApiKey):
        _backend("http://127.0.0.1:9", []).generate("hello", GenerationConfig())


def test_http_connection_refused_is_unreachable(monkeypatch):
    monkeypatch.setenv("TUMS_TEST_KEY", "k")
    sleeps = []
    with pytest.raises(BackendUnreachable):
        _backend("http://127.0.0.1:9", sleeps).generate("hello", GenerationConfig())
    assert sleeps == [1.0, 2.0]


def test_gateway_counts_only_successful_responses(stub_server, monkeypatch):
    monkeypatch.setenv("TUMS_TEST_KEY", "k")
    url, _ = stub_server([(500, "x"), _ok("hi")])
    g = Gateway(_backend(url, []))
    assert g.complete("p", "decomposer") == "hi"
    assert g.ledger.total_responses == 1
