"""Sequential step runner behind every output-producing CLI command.

Each command is a `Workflow` of steps sharing one `RunState`. The runner stops
at the first failing step, writes an error summary for it, and always leaves
`run.json`, `steps.json` and `context.json` behind in the run directory.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Any

from gnn_seg.artifacts import write_error_summary
from gnn_seg.contracts import RunState, Step, StepResult, StepStatus, Workflow
from gnn_seg.exceptions import GnnSegError
from gnn_seg.logger import JsonlLogger
from gnn_seg.run_context import RunContext, duration_ms, iso_utc_from_ms, now_ms

EXIT_UNEXPECTED = 1
# payload keys a pipeline error detail may not shadow
_RESERVED_KEYS = frozenset(
    {
        "error_type",
        "error_message",
        "error_artifact_path",
        "message",
        "run_id",
        "workflow",
        "step",
        "step_idx",
        "status",
        "ts",
    }
)


@dataclass(frozen=True)
class WorkflowResult:
    ok: bool
    run_id: str
    failed_step: str | None = None
    error: str | None = None
    exit_code: int = 0
    exception: BaseException | None = None
    started_at: str | None = None
    finished_at: str | None = None


def _write_json(path: Path, payload: dict[str, Any] | list[dict[str, Any]]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp_path = path.with_suffix(path.suffix + ".tmp")
    with tmp_path.open("w", encoding="utf-8") as f:
        json.dump(payload, f, indent=2, sort_keys=True, default=str)
        f.write("\n")
    tmp_path.replace(path)


def _error_details(exc: BaseException | None) -> dict[str, Any]:
    if isinstance(exc, GnnSegError):
        details = exc.to_dict()
        return {k: v for k, v in details.items() if k not in _RESERVED_KEYS}
    return {}


def _exit_code(exc: BaseException | None) -> int:
    return exc.exit_code if isinstance(exc, GnnSegError) else EXIT_UNEXPECTED


def _record_failure(
    *,
    ctx: RunContext,
    log: JsonlLogger,
    workflow: Workflow,
    step: Step,
    step_idx: int,
    error_type: str,
    error_message: str,
    exc: BaseException | None,
) -> None:
    details = _error_details(exc)
    payload: dict[str, Any] = {
        "run_id": ctx.run_id,
        "workflow": workflow.name,
        "step": step.name,
        "status": StepStatus.FAILED.value,
        "error_type": error_type,
        "error_message": error_message,
        "ts": iso_utc_from_ms(now_ms()),
        **details,
    }
    path = write_error_summary(ctx, step=step.name, payload=payload)
    log.error(
        "step_failed",
        run_id=ctx.run_id,
        workflow=workflow.name,
        step=step.name,
        step_idx=step_idx,
        error_type=error_type,
        error_message=error_message,
        error_artifact_path=path.relative_to(ctx.run_dir).as_posix(),
        **details,
    )


def run_workflow(
    *,
    workflow: Workflow,
    ctx: RunContext,
    log: JsonlLogger,
    state: RunState | None = None,
) -> WorkflowResult:
    run_state = state or RunState()
    run_start = now_ms()
    log.info("run_start", run_id=ctx.run_id, workflow=workflow.name, steps=len(workflow.steps))

    failed_step: str | None = None
    error: str | None = None
    exception: BaseException | None = None
    step_summaries: list[dict[str, Any]] = []

    for idx, step in enumerate(workflow.steps, start=1):
        step_start = now_ms()
        log.info(
            "step_start",
            run_id=ctx.run_id,
            step=step.name,
            step_idx=idx,
            start_ms=step_start,
            status=StepStatus.RUNNING,
        )

        step_exc: BaseException | None = None
        try:
            result = step.run(ctx, run_state, log)
            if not isinstance(result, StepResult):
                raise TypeError(f"step {step.name!r} must return StepResult")
        except Exception as e:  # noqa: BLE001 (every failure ends the run cleanly)
            step_exc = e
            result = StepResult(ok=False, error=str(e) or type(e).__name__)

        if result.outputs is not None:
            run_state.step_outputs[step.name] = result.outputs

        if not result.ok:
            failed_step = step.name
            error = result.error or "step returned ok=false"
            exception = step_exc
            _record_failure(
                ctx=ctx,
                log=log,
                workflow=workflow,
                step=step,
                step_idx=idx,
                error_type=type(step_exc).__name__ if step_exc else "StepFailed",
                error_message=error,
                exc=step_exc,
            )

        step_end = now_ms()
        step_status = StepStatus.OK if result.ok else StepStatus.FAILED
        log.info(
            "step_end",
            run_id=ctx.run_id,
            step=step.name,
            step_idx=idx,
            ok=result.ok,
            status=step_status,
            duration_ms=duration_ms(step_start, step_end),
            end_ms=step_end,
        )
        summary: dict[str, Any] = {
            "step_name": step.name,
            "started_at": iso_utc_from_ms(step_start),
            "finished_at": iso_utc_from_ms(step_end),
            "status": step_status.value,
            "duration_ms": duration_ms(step_start, step_end),
            "error_summary": result.error,
        }
        if result.outputs is not None:
            summary["metrics"] = result.outputs
        step_summaries.append(summary)

        run_state.persist(ctx.context_path)

        if not result.ok:
            break

    ok = failed_step is None
    run_end = now_ms()
    log.info(
        "run_end",
        run_id=ctx.run_id,
        ok=ok,
        duration_ms=duration_ms(run_start, run_end),
        end_ms=run_end,
    )
    run_summary: dict[str, Any] = {
        "run_id": ctx.run_id,
        "workflow": workflow.name,
        "started_at": iso_utc_from_ms(run_start),
        "finished_at": iso_utc_from_ms(run_end),
        "status": StepStatus.OK.value if ok else StepStatus.FAILED.value,
        "duration_ms": duration_ms(run_start, run_end),
        "error_summary": error,
        "exit_code": 0 if ok else _exit_code(exception),
    }
    _write_json(ctx.summary_path, run_summary)
    _write_json(ctx.steps_path, step_summaries)

    return WorkflowResult(
        ok=ok,
        run_id=ctx.run_id,
        failed_step=failed_step,
        error=error,
        exit_code=run_summary["exit_code"],
        exception=exception,
        started_at=run_summary["started_at"],
        finished_at=run_summary["finished_at"],
    )


def run_steps_result(
    *, runs_dir: Path, steps: list[Step], name: str = "adhoc", log_level: str = "DEBUG"
) -> tuple[RunContext, WorkflowResult]:
    ctx = RunContext.create(runs_dir, command=name)
    log = JsonlLogger(path=ctx.logs_path, component="engine", min_level=log_level)
    result = run_workflow(workflow=Workflow(name=name, steps=steps), ctx=ctx, log=log)
    return ctx, result
