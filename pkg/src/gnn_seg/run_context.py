from __future__ import annotations

import time
from dataclasses import dataclass
from pathlib import Path
from uuid import uuid4


def new_run_id(ms: int | None = None) -> str:
    """Sortable run id: UTC stamp plus a random suffix."""
    stamp = time.strftime("%Y%m%dT%H%M%SZ", time.gmtime((ms if ms is not None else now_ms()) / 1000))
    return f"{stamp}-{uuid4().hex[:8]}"


@dataclass(frozen=True)
class RunContext:
    """Bookkeeping directory of one CLI invocation.

    Layout under `run_dir`::

        logs.jsonl           structured events
        context.json         JSON part of the step state
        run.json             run summary
        steps.json           per-step summaries
        artifacts/index.json registered outputs with digests
        errors/<command>__<step>.json
    """

    run_id: str
    command: str
    run_dir: Path

    @property
    def logs_path(self) -> Path:
        return self.run_dir / "logs.jsonl"

    @property
    def context_path(self) -> Path:
        return self.run_dir / "context.json"

    @property
    def summary_path(self) -> Path:
        return self.run_dir / "run.json"

    @property
    def steps_path(self) -> Path:
        return self.run_dir / "steps.json"

    @property
    def artifacts_dir(self) -> Path:
        return self.run_dir / "artifacts"

    @property
    def artifacts_index_path(self) -> Path:
        return self.artifacts_dir / "index.json"

    @property
    def errors_dir(self) -> Path:
        return self.run_dir / "errors"

    def error_path(self, step: str) -> Path:
        return self.errors_dir / f"{self.command}__{step}.json"

    @staticmethod
    def create(runs_dir: Path, command: str = "adhoc") -> RunContext:
        run_id = new_run_id()
        ctx = RunContext(run_id=run_id, command=command, run_dir=runs_dir / run_id)
        ctx.artifacts_dir.mkdir(parents=True, exist_ok=True)
        return ctx


def now_ms() -> int:
    return int(time.time() * 1000)


def duration_ms(start_ms: int, end_ms: int) -> int:
    return max(0, end_ms - start_ms)


def iso_utc_from_ms(ms: int) -> str:
    return time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime(ms / 1000))
