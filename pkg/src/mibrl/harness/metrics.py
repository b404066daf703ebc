"""JSON-lines metrics log. One record per line, versioned by ``schema``."""

from __future__ import annotations

import json
import math
from pathlib import Path
from typing import Any, Iterator

SCHEMA_VERSION = 1
WALL_CLOCK_KEYS = ("wall_clock",)


def _clean(value: Any) -> Any:
    if isinstance(value, float) and not math.isfinite(value):
        return None
    return value


class MetricsLogger:
    """Append-only writer; ``record`` flushes every line."""

    def __init__(self, path: str | Path | None):
        self.path = Path(path) if path else None
        self.records: list[dict[str, Any]] = []
        self._last_step = -1
        if self.path:
            self.path.parent.mkdir(parents=True, exist_ok=True)

    def record(self, kind: str, step: int, **fields) -> dict[str, Any]:
        if step < self._last_step:
            raise ValueError(f"metrics step went backwards: {step} < {self._last_step}")
        self._last_step = step
        rec = {"schema": SCHEMA_VERSION, "kind": kind, "step": int(step)}
        rec.update({k: _clean(v) for k, v in fields.items()})
        self.records.append(rec)
        if self.path:
            with open(self.path, "a") as fh:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
        return rec


def read_metrics(path: str | Path) -> list[dict[str, Any]]:
    return list(iter_metrics(path))


def iter_metrics(path: str | Path) -> Iterator[dict[str, Any]]:
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if line:
                rec = json.loads(line)
                if rec.get("schema") != SCHEMA_VERSION:
                    raise ValueError(f"unsupported metrics schema {rec.get('schema')}")
                yield rec


def strip_wall_clock(records: list[dict[str, Any]]) -> list[dict[str, Any]]:
    return [{k: v for k, v in r.items() if k not in WALL_CLOCK_KEYS} for r in records]
