"""The episode loop: decompose, generate the call, execute, repeat."""

from __future__ import annotations

from collections.abc import Sequence

from .core import (
    DEFAULT_MAX_STEPS,
    DatasetClass,
    Hint,
    ParseError,
    Question,
    Step,
    Termination,
    ToolInvocation,
    ToolName,
    Trajectory,
    parse_directive,
)
from .gateway import BackendError, Gateway
from .processor import HandlerFailed, Processor
from .prompting import PromptCatalog, format_history
from .toolkit import Executor
from .toolkit.errors import ToolError

__all__ = ["error_result", "format_history", "run_episode"]


def error_result(exc: Exception) -> str:
    """Result text for a failure the decomposer should see and react to."""
    if isinstance(exc, ToolError):
        return exc.render()
    return f"Error: {type(exc).__name__}: {exc}"


def run_episode(
    q: Question,
    hint: Hint | None,
    processor: Processor,
    executor: Executor,
    catalog: PromptCatalog,
    gateway: Gateway | None = None,
    *,
    max_steps: int = DEFAULT_MAX_STEPS,
    recognized: DatasetClass | None = None,
    notes: Sequence[str] = (),
) -> Trajectory:
    """Run one question to Finish, the step limit, or a backend failure.

    Tool and parse failures become ``Error: ...`` results; only backend
    errors stop the loop early (termination Aborted). ``gateway`` defaults to
    the processor's, and its ledger supplies ``Trajectory.responses``.
    """
    if max_steps < 1:
        raise ValueError("max_steps must be >= 1")
    gateway = gateway or processor.gateway
    steps: list[Step] = []
    notes = list(notes)
    termination = Termination.MAX_STEPS_EXCEEDED
    final_answer: str | None = None

    for i in range(1, max_steps + 1):
        prompt = catalog.render_decomposer_prompt(q, hint, steps, i)
        try:
            raw = gateway.complete(prompt, "decomposer", tag=f"decompose:{i}")
        except BackendError as exc:
            notes.append(f"aborted at step {i}: {error_result(exc)}")
            termination = Termination.ABORTED
            break
        try:
            directive = parse_directive(raw)
        except ParseError as exc:
            steps.append(Step(i, None, None, error_result(exc), raw))
            continue

        try:
            inv = processor.generate_invocation(directive.tool, directive.subtask_text, executor.schema_text())
        except HandlerFailed as exc:
            if directive.tool is not ToolName.FINISH:
                steps.append(Step(i, directive, None, error_result(exc), raw))
                continue
            # the directive already carries the answer
            notes.append(f"step {i}: Finish handler failed, answer taken from the subtask text")
            inv = ToolInvocation(ToolName.FINISH, directive.subtask_text.strip())
        except BackendError as exc:
            steps.append(Step(i, directive, None, error_result(exc), raw))
            notes.append(f"aborted at step {i}: {error_result(exc)}")
            termination = Termination.ABORTED
            break

        if inv.tool is ToolName.FINISH:
            steps.append(Step(i, directive, inv, inv.parameter, raw))
            final_answer = inv.parameter
            termination = Termination.FINISHED
            break
        steps.append(Step(i, directive, inv, executor.execute(inv), raw))

    return Trajectory(
        question=q,
        steps=tuple(steps),
        termination=termination,
        hint=hint,
        final_answer=final_answer,
        max_steps=max_steps,
        recognized=recognized,
        notes=tuple(notes),
        responses=gateway.ledger.per_module,
    )
