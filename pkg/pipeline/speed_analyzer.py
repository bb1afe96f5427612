"""
Wall-clock profiling of the simulation loop.

The harness times each stage of every tick (sensors, autonomy, sim,
arbitration). From those rows this module derives per-stage latency
percentiles, the real-time factor of each run and the ticks that would not
have fit into one `dt` of wall time.

    python -m pipeline.speed_analyzer pipeline/output/timing.csv [--dt 0.02]
"""

import argparse
import csv
import logging
import time
from collections import defaultdict
from contextlib import contextmanager
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Iterator, Optional

import numpy as np

logger = logging.getLogger(__name__)

CSV_HEADER = ["run", "tick", "stage", "duration_seconds"]


@dataclass(frozen=True, slots=True)
class TimingRecord:
    run: str
    tick: int
    stage: str
    duration_seconds: float


class SpeedTracker:
    """Collects (run, tick, stage, seconds) rows; one timer may be open at a time."""

    def __init__(self) -> None:
        self._records: list[TimingRecord] = []
        self._open: Optional[tuple[str, int, str, float]] = None

    def start(self, run: str, tick: int, stage: str) -> None:
        if self._open is not None:
            r, t, s, _ = self._open
            logger.warning(f"SpeedTracker: {r} t{t} {s} still open, dropping it for {stage}")
        self._open = (run, tick, stage, time.perf_counter())

    def stop(self) -> float:
        """Close the open timer and return its elapsed seconds (0.0 if none was open)."""
        if self._open is None:
            logger.warning("SpeedTracker: stop() with no open timer")
            return 0.0
        run, tick, stage, t0 = self._open
        self._open = None
        elapsed = time.perf_counter() - t0
        self.record(run, tick, stage, elapsed)
        return elapsed

    @contextmanager
    def stage(self, run: str, tick: int, stage: str) -> Iterator[None]:
        self.start(run, tick, stage)
        try:
            yield
        finally:
            self.stop()

    def record(self, run: str, tick: int, stage: str, duration: float) -> None:
        self._records.append(TimingRecord(run, tick, stage, round(duration, 6)))

    @property
    def records(self) -> list[TimingRecord]:
        return list(self._records)

    # -- analysis ------------------------------------------------------------

    def _by_stage(self) -> dict[str, np.ndarray]:
        groups: dict[str, list[float]] = defaultdict(list)
        for r in self._records:
            groups[r.stage].append(r.duration_seconds)
        return {k: np.asarray(v) for k, v in sorted(groups.items())}

    def _tick_totals(self) -> dict[tuple[str, int], float]:
        totals: dict[tuple[str, int], float] = defaultdict(float)
        for r in self._records:
            totals[(r.run, r.tick)] += r.duration_seconds
        return totals

    def real_time_factor(self, dt: float) -> dict[str, float]:
        """Simulated seconds per wall-clock second, per run (> 1 is faster than real time)."""
        wall: dict[str, float] = defaultdict(float)
        ticks: dict[str, int] = defaultdict(int)
        for (run, _), seconds in self._tick_totals().items():
            wall[run] += seconds
            ticks[run] += 1
        return {run: (ticks[run] * dt / wall[run] if wall[run] > 0 else float("inf")) for run in sorted(wall)}

    def over_budget(self, dt: float) -> list[tuple[str, int, float]]:
        """Ticks whose stages together took longer than one step of simulated time."""
        return sorted((run, tick, s) for (run, tick), s in self._tick_totals().items() if s > dt)

    def summary_dict(self, dt: Optional[float] = None) -> dict[str, Any]:
        if not self._records:
            return {"total_seconds": 0.0, "ticks": 0, "stages": {}}
        stages = {}
        for name, d in self._by_stage().items():
            p50, p95 = np.percentile(d, [50, 95])
            stages[name] = {
                "count": int(d.size),
                "total_seconds": round(float(d.sum()), 6),
                "avg_seconds": round(float(d.mean()), 6),
                "p50_seconds": round(float(p50), 6),
                "p95_seconds": round(float(p95), 6),
                "max_seconds": round(float(d.max()), 6),
            }
        out: dict[str, Any] = {
            "total_seconds": round(sum(s["total_seconds"] for s in stages.values()), 6),
            "ticks": len(self._tick_totals()),
            "stages": stages,
        }
        if dt is not None:
            out["real_time_factor"] = {k: round(v, 3) for k, v in self.real_time_factor(dt).items()}
            out["ticks_over_budget"] = len(self.over_budget(dt))
        return out

    def summary(self, dt: Optional[float] = None) -> str:
        if not self._records:
            return "No timing data recorded."
        s = self.summary_dict(dt)
        lines = [
            f"{'Stage':<14} {'Count':>8} {'Avg (ms)':>9} {'p95 (ms)':>9} {'Max (ms)':>9} {'Total (s)':>10}",
            "-" * 64,
        ]
        for name, st in s["stages"].items():
            lines.append(
                f"{name:<14} {st['count']:>8} {1e3 * st['avg_seconds']:>9.3f} {1e3 * st['p95_seconds']:>9.3f} "
                f"{1e3 * st['max_seconds']:>9.3f} {st['total_seconds']:>10.4f}"
            )
        lines.append("-" * 64)
        lines.append(f"{'TOTAL':<14} {s['ticks']:>8} ticks {s['total_seconds']:>36.4f}")
        for run, rtf in s.get("real_time_factor", {}).items():
            lines.append(f"{run}: {rtf:.1f}x real time")
        if "ticks_over_budget" in s:
            lines.append(f"ticks over the {dt} s budget: {s['ticks_over_budget']}")
        return "\n".join(lines)

    # -- persistence -----------------------------------------------------------

    def save(self, path: str | Path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="", encoding="utf-8") as f:
            writer = csv.writer(f)
            writer.writerow(CSV_HEADER)
            for r in self._records:
                writer.writerow([r.run, r.tick, r.stage, r.duration_seconds])
        logger.info(f"Timing report saved to {path} ({len(self._records)} rows)")

    @classmethod
    def load(cls, path: str | Path) -> "SpeedTracker":
        tracker = cls()
        with open(path, newline="", encoding="utf-8") as f:
            reader = csv.DictReader(f)
            if reader.fieldnames != CSV_HEADER:
                raise ValueError(f"{path}: expected columns {CSV_HEADER}, got {reader.fieldnames}")
            for row in reader:
                tracker.record(row["run"], int(row["tick"]), row["stage"], float(row["duration_seconds"]))
        return tracker


def main() -> None:
    parser = argparse.ArgumentParser(description="Summarise a simulation loop timing CSV")
    parser.add_argument("timing_csv", type=Path)
    parser.add_argument("--dt", type=float, default=0.02)
    args = parser.parse_args()

    logging.basicConfig(level=logging.INFO, format='%(asctime)s - %(levelname)s - %(message)s')
    tracker = SpeedTracker.load(args.timing_csv)
    print(tracker.summary(args.dt))
    worst = sorted(tracker.over_budget(args.dt), key=lambda t: t[2], reverse=True)[:5]
    for run, tick, seconds in worst:
        logging.info(f"slow tick: {run} t{tick} {1e3 * seconds:.2f} ms")


if __name__ == "__main__":
    main()
