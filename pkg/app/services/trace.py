"""
Run traces: JSON-lines records (header, per-tick samples and events, finish,
footer). Scenario metrics are derived from the records alone, so a replay of
the file reproduces them exactly.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Iterable, Mapping, Optional, Sequence

import numpy as np
from pydantic import ValidationError

from app.core.errors import FormatError
from app.core.file_utils import write_text_atomic
from app.services.formats import FORMAT_VERSION, TraceRecord


logger = logging.getLogger(__name__)


HEADER_TOPIC = "header"
FOOTER_TOPIC = "footer"


def jsonable(value: Any) -> Any:
    """Plain JSON value: numpy scalars unwrapped, tuples as lists, non-finite floats as None."""
    if isinstance(value, Mapping):
        return {str(k): jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [jsonable(v) for v in value]
    if isinstance(value, np.ndarray):
        return jsonable(value.tolist())
    if isinstance(value, (bool, np.bool_)):
        return bool(value)
    if isinstance(value, (int, np.integer)):
        return int(value)
    if isinstance(value, (float, np.floating)):
        f = float(value)
        return f if math.isfinite(f) else None
    return value


class TraceWriter:
    """Collects records in memory with a running digest of every line."""

    def __init__(self, header: Mapping[str, Any]) -> None:
        self.records: list[TraceRecord] = []
        self._lines: list[str] = []
        self._digest = hashlib.sha256()
        self.closed = False
        self.append(0, 0.0, HEADER_TOPIC, {"format_version": FORMAT_VERSION, **header})

    def append(self, tick: int, time: float, topic: str, payload: Mapping[str, Any]) -> TraceRecord:
        if self.closed:
            raise RuntimeError("Trace already closed")
        if self.records and tick < self.records[-1].tick:
            raise ValueError(f"Trace ticks must not decrease ({tick} after {self.records[-1].tick})")
        rec = TraceRecord(tick=tick, time=time, topic=topic, payload=jsonable(payload))
        line = rec.to_line()
        self.records.append(rec)
        self._lines.append(line)
        self._digest.update(line.encode("utf-8"))
        return rec

    @property
    def digest(self) -> str:
        return self._digest.hexdigest()

    def close(self, metrics: Mapping[str, Any]) -> str:
        """Append the footer (digest of every prior line plus the metrics) and return the digest."""
        last = self.records[-1]
        digest = self.digest
        footer = TraceRecord(
            tick=last.tick, time=last.time, topic=FOOTER_TOPIC, payload=jsonable({"hash": digest, "metrics": metrics})
        )
        self._lines.append(footer.to_line())
        self.closed = True
        return digest

    def text(self) -> str:
        return "".join(self._lines)

    def write(self, path: str | Path) -> Path:
        path = write_text_atomic(path, self.text())
        logger.info("Trace written to %s (%d records)", path, len(self._lines))
        return path


def _count(events: Sequence[TraceRecord], kind: str, *, ego_only: bool = False) -> int:
    n = 0
    for rec in events:
        if rec.payload.get("kind") != kind:
            continue
        data = rec.payload.get("data") or {}
        if ego_only and data.get("agent") != 0:
            continue
        n += 1
    return n


def _minimum(values: Iterable[Optional[float]]) -> Optional[float]:
    present = [v for v in values if v is not None]
    return min(present) if present else None


def metrics_from_trace(records: Sequence[TraceRecord]) -> dict[str, Any]:
    """Scenario metrics from the sample, event and finish records of one run."""
    samples = [r.payload for r in records if r.topic == "sample"]
    events = [r for r in records if r.topic == "event"]
    finish = next((r.payload for r in reversed(records) if r.topic == "finish"), {})

    collisions = 0
    for rec in events:
        if rec.payload.get("kind") == "collision":
            data = rec.payload.get("data") or {}
            if 0 in (data.get("a"), data.get("b")):
                collisions += 1

    first_detection: dict[str, float] = {}
    for rec in events:
        if rec.payload.get("kind") == "first_detection":
            agent = str((rec.payload.get("data") or {}).get("agent"))
            first_detection.setdefault(agent, rec.time)

    return {
        "completed": bool(finish.get("completed", False)),
        "finish_time": finish.get("finish_time"),
        "ticks": int(finish.get("ticks", max((r.tick for r in records), default=0))),
        "max_cross_track_error": max((s["cte"] for s in samples if s.get("cte") is not None), default=0.0),
        "min_clearance": _minimum(s.get("clearance") for s in samples),
        "collision_count": collisions,
        "emergency_brake_count": _count(events, "emergency_brake"),
        "pause_event_count": _count(events, "pause"),
        "localization_loss_count": _count(events, "localization_lost"),
        "priority_violation_count": _count(events, "priority_violation") + _count(events, "npc_priority_violation"),
        "zone_co_occupancy_count": _count(events, "zone_co_occupancy"),
        "stop_line_stop_count": _count(events, "stop_line_stop", ego_only=True),
        "stop_line_violation_count": _count(events, "stop_line_violation", ego_only=True),
        "min_pedestrian_distance": _minimum(s.get("pedestrian_distance") for s in samples),
        "final_gap": finish.get("final_gap"),
        "ego_final_speed": float(finish.get("ego_final_speed", 0.0)),
        "first_detection": first_detection,
        "partial": bool(finish.get("partial", False)),
        "aborted": finish.get("aborted"),
    }


@dataclass(frozen=True, slots=True)
class LoadedTrace:
    header: TraceRecord
    records: tuple[TraceRecord, ...]  # header included, footer excluded
    footer: Optional[TraceRecord]
    digest: str  # recomputed over the lines before the footer


def read_trace(path: str | Path) -> LoadedTrace:
    raw = Path(path).read_text(encoding="utf-8")
    lines = raw.splitlines(keepends=True)
    if not lines:
        raise FormatError(f"Empty trace: {path}")
    digest = hashlib.sha256()
    records: list[TraceRecord] = []
    footer: Optional[TraceRecord] = None
    for n, line in enumerate(lines, start=1):
        try:
            rec = TraceRecord.model_validate(json.loads(line))
        except (json.JSONDecodeError, ValidationError) as e:
            raise FormatError(f"Invalid trace record at line {n}: {e}") from e
        if rec.topic == FOOTER_TOPIC:
            if n != len(lines):
                raise FormatError(f"Footer before the end of the trace at line {n}")
            footer = rec
            break
        if records and rec.tick < records[-1].tick:
            raise FormatError(f"Trace ticks decrease at line {n}")
        digest.update(line.encode("utf-8"))
        records.append(rec)
    if not records or records[0].topic != HEADER_TOPIC:
        raise FormatError("Trace does not start with a header record")
    header = records[0]
    if header.payload.get("format_version") != FORMAT_VERSION:
        raise FormatError(f"Unsupported trace format_version {header.payload.get('format_version')!r}")
    return LoadedTrace(header=header, records=tuple(records), footer=footer, digest=digest.hexdigest())


@dataclass(frozen=True, slots=True)
class ReplayReport:
    metrics: dict[str, Any]
    recorded_metrics: Optional[dict[str, Any]]
    digest: str
    recorded_digest: Optional[str]

    @property
    def hash_ok(self) -> bool:
        return self.recorded_digest is not None and self.digest == self.recorded_digest

    @property
    def metrics_ok(self) -> bool:
        return self.recorded_metrics is not None and self.metrics == self.recorded_metrics

    @property
    def ok(self) -> bool:
        return self.hash_ok and self.metrics_ok


def replay(path: str | Path) -> ReplayReport:
    """Re-derive metrics from a trace file and check them and the digest against its footer."""
    loaded = read_trace(path)
    metrics = metrics_from_trace(loaded.records)
    recorded = loaded.footer.payload if loaded.footer is not None else {}
    report = ReplayReport(
        metrics=metrics,
        recorded_metrics=recorded.get("metrics"),
        digest=loaded.digest,
        recorded_digest=recorded.get("hash"),
    )
    if not report.ok:
        logger.warning("Replay of %s does not match: hash_ok=%s metrics_ok=%s", path, report.hash_ok, report.metrics_ok)
    return report
