from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

LEVELS = ("DEBUG", "INFO", "WARNING", "ERROR")


def _iso_utc(ts: float | None = None) -> str:
    t = time.gmtime(ts if ts is not None else time.time())
    return time.strftime("%Y-%m-%dT%H:%M:%SZ", t)


@dataclass
class JsonlLogger:
    path: Path
    component: str
    min_level: str = "DEBUG"
    bound: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        self.path.parent.mkdir(parents=True, exist_ok=True)
        level = self.min_level.upper()
        self.min_level = level if level in LEVELS else "DEBUG"

    def enabled(self, level: str) -> bool:
        lvl = level.upper()
        if lvl not in LEVELS:
            return True
        return LEVELS.index(lvl) >= LEVELS.index(self.min_level)

    def log(self, level: str, event: str, **fields: Any) -> None:
        if not self.enabled(level):
            return
        record: dict[str, Any] = {
            "ts": _iso_utc(),
            "level": level.upper(),
            "component": self.component,
            "event": event,
            **self.bound,
            **fields,
        }
        # One JSON object per line (JSONL)
        line = json.dumps(record, ensure_ascii=False, default=str)
        with self.path.open("a", encoding="utf-8") as f:
            f.write(line + "\n")

    def child(self, component: str, **bound: Any) -> JsonlLogger:
        """Same file and level under another component; `bound` fields go on every record."""
        return JsonlLogger(
            self.path, component=component, min_level=self.min_level, bound={**self.bound, **bound}
        )

    def info(self, event: str, **fields: Any) -> None:
        self.log("INFO", event, **fields)

    def warning(self, event: str, **fields: Any) -> None:
        self.log("WARNING", event, **fields)

    def error(self, event: str, **fields: Any) -> None:
        self.log("ERROR", event, **fields)

    def debug(self, event: str, **fields: Any) -> None:
        self.log("DEBUG", event, **fields)
