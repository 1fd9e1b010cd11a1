from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

from gnn_seg.run_context import RunContext, iso_utc_from_ms, now_ms


@dataclass(frozen=True)
class ArtifactRecord:
    name: str
    type: str
    path: str  # relative to run_dir when inside it, else absolute (posix)
    sha256: str
    size_bytes: int
    created_at: str  # ISO UTC
    metadata: dict[str, Any] = field(default_factory=dict)

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)


def atomic_write_bytes(path: Path, data: bytes) -> None:
    """Write via a sibling temp file so readers never see a partial image or checkpoint."""
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(f".{path.name}.{os.getpid()}.tmp")
    try:
        with tmp.open("wb") as f:
            f.write(data)
        tmp.replace(path)
    finally:
        tmp.unlink(missing_ok=True)


def atomic_write_text(path: Path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def atomic_write_json(path: Path, payload: Any) -> None:
    atomic_write_text(path, json.dumps(payload, indent=2, sort_keys=True, default=str) + "\n")


def sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with path.open("rb") as f:
        for block in iter(lambda: f.read(1 << 16), b""):
            h.update(block)
    return h.hexdigest()


def load_artifact_index(ctx: RunContext) -> list[ArtifactRecord]:
    if not ctx.artifacts_index_path.exists():
        return []
    data = json.loads(ctx.artifacts_index_path.read_text(encoding="utf-8"))
    if not isinstance(data, list):
        raise ValueError("artifact index must be a JSON list")
    return [ArtifactRecord(**entry) for entry in data]


def _display_path(ctx: RunContext, path: Path) -> str:
    try:
        return path.resolve().relative_to(ctx.run_dir.resolve()).as_posix()
    except ValueError:
        return path.resolve().as_posix()


def register_artifact(
    ctx: RunContext,
    *,
    name: str,
    path: Path,
    type: str,
    metadata: dict[str, Any] | None = None,
) -> ArtifactRecord:
    """Digest `path` and append it to the run's artifact index."""
    rec = ArtifactRecord(
        name=name,
        type=type,
        path=_display_path(ctx, path),
        sha256=sha256_file(path),
        size_bytes=path.stat().st_size,
        created_at=iso_utc_from_ms(now_ms()),
        metadata=metadata or {},
    )
    index = load_artifact_index(ctx)
    index.append(rec)
    atomic_write_json(ctx.artifacts_index_path, [r.to_dict() for r in index])
    return rec


def write_error_summary(ctx: RunContext, *, step: str, payload: dict[str, Any]) -> Path:
    path = ctx.error_path(step)
    atomic_write_json(path, payload)
    return path
