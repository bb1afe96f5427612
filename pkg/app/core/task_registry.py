from __future__ import annotations

from dataclasses import dataclass, field, replace
from datetime import datetime, timezone
from threading import Lock
from typing import TYPE_CHECKING, Any, Literal, Optional
from uuid import uuid4

if TYPE_CHECKING:
    from pipeline.speed_analyzer import SpeedTracker

TaskStatus = Literal["queued", "running", "completed", "failed"]


@dataclass(slots=True)
class MapRecord:
    id: str
    name: str
    network_file: str
    segments: int
    date_ingested: str
    issues: list[str] = field(default_factory=list)


@dataclass(slots=True)
class TaskRecord:
    """One batch of seeded runs of a single scenario."""

    task_id: str
    scenario: str
    seeds: tuple[int, ...]
    dt: float
    status: TaskStatus = "queued"
    finished_runs: int = 0
    completed_runs: int = 0  # reached the route end
    collisions: int = 0
    emergency_brakes: int = 0
    errors: list[str] = field(default_factory=list)
    total_time_seconds: Optional[float] = None

    @property
    def total_runs(self) -> int:
        return len(self.seeds)

    @property
    def progress(self) -> str:
        return f"{self.finished_runs}/{self.total_runs} runs"

    @property
    def error(self) -> Optional[str]:
        return "; ".join(self.errors[:5]) if self.errors else None


class InMemoryRegistry:
    def __init__(self) -> None:
        self._lock = Lock()
        self._maps: dict[str, MapRecord] = {}
        self._tasks: dict[str, TaskRecord] = {}
        self._outcomes: dict[str, dict[int, dict[str, Any]]] = {}  # task_id -> seed -> outcome
        self._trackers: dict[str, "SpeedTracker"] = {}

    # -- maps ----------------------------------------------------------------

    def add_map(self, *, name: str, network_file: str, segments: int, issues: list[str]) -> MapRecord:
        rec = MapRecord(
            id=uuid4().hex,
            name=name,
            network_file=network_file,
            segments=segments,
            date_ingested=datetime.now(timezone.utc).isoformat(),
            issues=list(issues),
        )
        with self._lock:
            self._maps[rec.id] = rec
        return replace(rec, issues=list(rec.issues))

    def get_map(self, *, map_id: str) -> Optional[MapRecord]:
        with self._lock:
            rec = self._maps.get(map_id)
            return None if rec is None else replace(rec, issues=list(rec.issues))

    def list_maps(self) -> list[MapRecord]:
        """Newest first."""
        with self._lock:
            maps = [replace(r, issues=list(r.issues)) for r in self._maps.values()]
        return sorted(maps, key=lambda r: r.date_ingested, reverse=True)

    # -- scenario tasks ------------------------------------------------------

    def create_task(
        self, *, scenario: str, seeds: list[int], dt: float, tracker: Optional["SpeedTracker"] = None
    ) -> TaskRecord:
        if len(set(seeds)) != len(seeds):
            raise ValueError("seeds must be unique within a task")
        rec = TaskRecord(task_id=uuid4().hex, scenario=scenario, seeds=tuple(seeds), dt=dt)
        with self._lock:
            self._tasks[rec.task_id] = rec
            self._outcomes[rec.task_id] = {}
            if tracker is not None:
                self._trackers[rec.task_id] = tracker
        return self._copy(rec)

    def get_task(self, *, task_id: str) -> Optional[TaskRecord]:
        with self._lock:
            rec = self._tasks.get(task_id)
            return None if rec is None else self._copy(rec)

    def start_task(self, *, task_id: str) -> None:
        with self._lock:
            rec = self._require(task_id, "queued")
            rec.status = "running"

    def record_run(
        self, *, task_id: str, seed: int, outcome: Optional[dict[str, Any]] = None, error: Optional[str] = None
    ) -> None:
        """Store the outcome (or the error) of one seeded run."""
        if (outcome is None) == (error is None):
            raise ValueError("record_run takes exactly one of outcome or error")
        with self._lock:
            rec = self._require(task_id, "running")
            if seed not in rec.seeds:
                raise ValueError(f"seed {seed} is not part of task {task_id}")
            runs = self._outcomes[task_id]
            if seed in runs:
                raise ValueError(f"seed {seed} already recorded for task {task_id}")
            rec.finished_runs += 1
            if error is not None:
                rec.errors.append(f"seed {seed}: {error}")
                return
            runs[seed] = dict(outcome)
            rec.completed_runs += int(bool(outcome.get("completed")))
            rec.collisions += int(outcome.get("collision_count", 0))
            rec.emergency_brakes += int(outcome.get("emergency_brake_count", 0))

    def finish_task(self, *, task_id: str, total_time_seconds: float) -> TaskRecord:
        with self._lock:
            rec = self._require(task_id, "running")
            rec.status = "failed" if rec.errors else "completed"
            rec.total_time_seconds = total_time_seconds
            return self._copy(rec)

    def get_outcomes(self, *, task_id: str) -> list[dict[str, Any]]:
        """Outcomes in seed order; seeds that errored are absent."""
        with self._lock:
            runs = self._outcomes.get(task_id, {})
            return [dict(runs[s]) for s in sorted(runs)]

    def get_speed_tracker(self, *, task_id: str) -> Optional["SpeedTracker"]:
        with self._lock:
            return self._trackers.get(task_id)

    def _require(self, task_id: str, status: TaskStatus) -> TaskRecord:
        rec = self._tasks.get(task_id)
        if rec is None:
            raise KeyError(task_id)
        if rec.status != status:
            raise ValueError(f"task {task_id} is {rec.status}, expected {status}")
        return rec

    @staticmethod
    def _copy(rec: TaskRecord) -> TaskRecord:
        return replace(rec, errors=list(rec.errors))
