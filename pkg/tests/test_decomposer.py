from __future__ import annotations

import pytest

from tums.core import DatasetClass, Question, Termination, ToolName
from tums.decomposer import error_result, run_episode
from tums.gateway import Gateway, ScriptedBackend
from tums.processor import HandlerRegistry, Processor
from tums.toolkit import Executor
from tums.toolkit.errors import UnknownColumn

Q = Question("g", "Tom buys 3 packs of 12 pencils and gives away 7. How many are left?", gold_answer="29")


def _episode(catalog, stores, responses, *, max_steps=10, hint=None, registry=None):
    gw = Gateway(ScriptedBackend(responses))
    ex = Executor(stores)
    proc = Processor(registry or HandlerRegistry.default(), gw, catalog)
    traj = run_episode(Q, hint, proc, ex, catalog, max_steps=max_steps)
    return traj, gw, ex


def test_three_step_episode(catalog, stores):
    hint = catalog.hints.get(DatasetClass.GSM8K)
    traj, gw, ex = _episode(
        catalog,
        stores,
        [
            "Count them. [Calculate]<3 packs of 12>",
            "Calculate[3*12]",
            "Subtract. [Calculate]<36 minus 7>",
            "Calculate[36-7]",
            "Done. [Finish]<29>",
            "Finish[29]",
        ],
        hint=hint,
    )
    assert traj.termination is Termination.FINISHED
    assert traj.final_answer == "29"
    assert [s.result for s in traj.steps] == ["36", "29", "29"]
    assert traj.responses == {"recognizer": 0, "decomposer": 3, "processor": 3}
    assert ex.calls == 2  # Finish is not executed
    # history grows monotonically: each decomposer prompt extends the previous one's history
    prompts = [c.prompt for c in gw.calls if c.caller == "decomposer"]
    assert "Result 1: 36\nSubtask 2:" in prompts[1]
    assert "Result 1: 36\nSubtask 2: Subtract. [Calculate]<36 minus 7>\nResult 2: 29\nSubtask 3:" in prompts[2]
    assert f"Hint: {hint.text}" in prompts[0]


def test_max_steps_bound(catalog, stores):
    responses = []
    for _ in range(3):
        responses += ["Again. [Calculate]<1+1>", "Calculate[1+1]"]
    traj, gw, ex = _episode(catalog, stores, responses, max_steps=3)
    assert traj.termination is Termination.MAX_STEPS_EXCEEDED
    assert traj.final_answer is None
    assert len(traj.steps) == 3
    assert gw.ledger.per_module["decomposer"] == 3


def test_malformed_directive_becomes_error_step(catalog, stores):
    traj, gw, _ = _episode(
        catalog, stores, ["I think the answer is 29.", "Sorry. [Finish]<29>", "Finish[29]"]
    )
    first = traj.steps[0]
    assert first.directive is None and first.invocation is None
    assert first.result.startswith("Error: ")
    assert first.raw == "I think the answer is 29."
    assert traj.final_answer == "29"
    assert "Subtask 1: I think the answer is 29.\nResult 1: Error: " in gw.calls[1].prompt


def test_unknown_tool_directive_is_an_error(catalog, stores):
    traj, _, _ = _episode(catalog, stores, ["[Teleport]<go>", "[Finish]<x>", "Finish[x]"])
    assert traj.steps[0].result.startswith("Error: ")
    assert traj.final_answer == "x"


def test_tool_error_is_fed_back(catalog, stores):
    traj, gw, _ = _episode(
        catalog,
        stores,
        [
            "[LoadDB]<load flights>",
            "LoadDB[flights]",
            "[GetValue]<read Delay>",
            "GetValue[Delay]",
            "No such column. [Finish]<unknown>",
            "Finish[unknown]",
        ],
    )
    assert traj.steps[1].result == "Error: UnknownColumn: Delay"
    assert "Result 2: Error: UnknownColumn: Delay" in gw.calls[-2].prompt
    # the loaded table's schema reaches the processor prompt
    assert "Table flights:" in gw.calls[3].prompt


def test_handler_failure_becomes_error_step(catalog, stores):
    traj, _, _ = _episode(
        catalog, stores, ["[Calculate]<sum>", "I would add them", "[Finish]<3>", "Finish[3]"]
    )
    assert traj.steps[0].invocation is None
    assert traj.steps[0].result.startswith("Error: HandlerFailed: Calculate handler failed at stage 1 (direct)")


def test_finish_handler_failure_falls_back_to_subtask(catalog, stores):
    traj, _, ex = _episode(catalog, stores, ["[Finish]< 29 >", "the answer"])
    assert traj.termination is Termination.FINISHED
    assert traj.final_answer == "29"
    assert ex.calls == 0
    assert any("Finish handler failed" in n for n in traj.notes)


def test_backend_failure_aborts(catalog, stores):
    traj, _, _ = _episode(catalog, stores, ["[Calculate]<1+1>", "Calculate[1+1]"])
    assert traj.termination is Termination.ABORTED
    assert len(traj.steps) == 1
    assert traj.notes and traj.notes[-1].startswith("aborted at step 2: Error: ScriptExhausted")

    traj, _, _ = _episode(catalog, stores, ["[Calculate]<1+1>"])
    assert traj.termination is Termination.ABORTED
    assert traj.steps[0].invocation is None


def test_max_steps_must_be_positive(catalog, stores):
    with pytest.raises(ValueError):
        _episode(catalog, stores, ["x"], max_steps=0)


def test_error_result_formats():
    assert error_result(UnknownColumn("Delay")) == "Error: UnknownColumn: Delay"
    assert error_result(KeyError("x")) == "Error: KeyError: 'x'"


def test_direct_only_finish(catalog, stores):
    traj, gw, _ = _episode(catalog, stores, ["[Finish]<7>", "Finish[7]"], registry=HandlerRegistry.direct_only())
    assert traj.final_answer == "7"
    assert [c.tag for c in gw.calls] == ["decompose:1", "direct:Finish"]
    assert traj.steps[0].invocation.tool is ToolName.FINISH
