"""
Acceptance matrix over seeds: runs every scenario case in a process pool,
checks its pass rule and writes one CSV row per run.

    python -m pipeline.scenario_suite [--seeds N] [--output pipeline/output/suite.csv]
"""

import argparse
import csv
import logging
import statistics
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Optional

from app.services.formats import ScenarioOutcome, ScenarioSpec
from app.services.scenario_harness import measure_stopping_distance, run_scenario
from app.services.scenario_maps import (
    builtin_scenario,
    circle_traffic,
    density_scenario,
    occlusion_scenario,
)
from app.services.sim_engine import WeatherState

# Configuration
OUTPUT_CSV = Path("./pipeline/output/scenario_suite.csv")
DEFAULT_SEEDS = 50
DENSITY_SEEDS = 20
DENSITY_LEVELS = (0, 5, 10, 20)
DENSITY_TOLERANCE = 0.02
OCCLUSION_MIN_LEAD = 1.0  # s
BRAKING_SPEED = 8.0  # m/s
BRAKING_TOLERANCE = 0.05

logging.basicConfig(level=logging.INFO, format='%(asctime)s - %(levelname)s - %(message)s')


@dataclass(frozen=True)
class Case:
    name: str
    build: Callable[[int], ScenarioSpec]
    check: Callable[[ScenarioOutcome], bool]


def _erratic_circle(seed: int) -> ScenarioSpec:
    return builtin_scenario("traffic_circle", seed, name=f"traffic_circle-erratic-{seed}",
                            npc_spawns=circle_traffic(3, erratic=1))


CASES: dict[str, Case] = {
    "traffic_circle": Case(
        "traffic_circle",
        lambda seed: builtin_scenario("traffic_circle", seed),
        lambda o: o.priority_violation_count == 0 and o.stop_line_stop_count >= 1 and o.collision_count == 0,
    ),
    "traffic_circle_erratic": Case(
        "traffic_circle_erratic",
        _erratic_circle,
        lambda o: o.collision_count == 0 and o.zone_co_occupancy_count == 0,
    ),
    "stopped_obstacle": Case(
        "stopped_obstacle",
        lambda seed: builtin_scenario("stopped_obstacle", seed),
        lambda o: o.emergency_brake_count >= 1 and o.collision_count == 0 and (o.final_gap or 0.0) > 0.0,
    ),
    "pedestrian_crossing": Case(
        "pedestrian_crossing",
        lambda seed: builtin_scenario("pedestrian_crossing", seed),
        lambda o: o.collision_count == 0 and (o.min_pedestrian_distance is None or o.min_pedestrian_distance > 1.0),
    ),
}


def run_case(job: tuple[str, int]) -> dict[str, Any]:
    name, seed = job
    case = CASES[name]
    outcome = run_scenario(case.build(seed))
    return _row(name, outcome, case.check(outcome))


def run_density(job: tuple[int, int]) -> dict[str, Any]:
    count, seed = job
    outcome = run_scenario(density_scenario(count, seed))
    return _row(f"density_{count}", outcome, outcome.collision_count == 0)


def _row(case: str, o: ScenarioOutcome, passed: bool) -> dict[str, Any]:
    return {
        "case": case,
        "scenario": o.scenario,
        "seed": o.seed,
        "passed": passed,
        "completed": o.completed,
        "finish_time": o.finish_time,
        "collisions": o.collision_count,
        "emergency_brakes": o.emergency_brake_count,
        "priority_violations": o.priority_violation_count,
        "co_occupancy": o.zone_co_occupancy_count,
        "stop_line_stops": o.stop_line_stop_count,
        "min_clearance": o.min_clearance,
        "min_pedestrian_distance": o.min_pedestrian_distance,
        "final_gap": o.final_gap,
        "trace_hash": o.trace_hash,
    }


def density_monotone(rows: list[dict[str, Any]]) -> tuple[bool, dict[int, float]]:
    """Mean finish time per density level, non-decreasing within the tolerance."""
    means: dict[int, float] = {}
    for count in DENSITY_LEVELS:
        times = [r["finish_time"] for r in rows if r["case"] == f"density_{count}" and r["finish_time"] is not None]
        means[count] = statistics.fmean(times) if times else float("inf")
    ordered = [means[c] for c in DENSITY_LEVELS]
    ok = all(b >= a * (1.0 - DENSITY_TOLERANCE) for a, b in zip(ordered, ordered[1:]))
    return ok, means


def occlusion_lead(seed: int = 0) -> Optional[float]:
    """Seconds by which the broadcast detects the hidden vehicle before the lidar does."""
    smart = run_scenario(occlusion_scenario(True, seed)).first_detection.get("1")
    lidar = run_scenario(occlusion_scenario(False, seed)).first_detection.get("1")
    if smart is None:
        return None
    return (lidar if lidar is not None else float("inf")) - smart


def braking_ratio() -> float:
    clear = measure_stopping_distance(WeatherState.clear(), BRAKING_SPEED)
    wet = measure_stopping_distance(WeatherState("rain", friction_factor=0.5), BRAKING_SPEED)
    return wet / clear


def main() -> None:
    parser = argparse.ArgumentParser(description="Run the scenario acceptance matrix")
    parser.add_argument("--seeds", type=int, default=DEFAULT_SEEDS)
    parser.add_argument("--density-seeds", type=int, default=DENSITY_SEEDS)
    parser.add_argument("--output", type=Path, default=OUTPUT_CSV)
    args = parser.parse_args()

    start = time.perf_counter()
    jobs = [(name, seed) for name in CASES for seed in range(args.seeds)]
    density_jobs = [(count, seed) for count in DENSITY_LEVELS for seed in range(args.density_seeds)]

    # Parallel processing
    with ProcessPoolExecutor() as executor:
        rows = list(executor.map(run_case, jobs))
        rows += list(executor.map(run_density, density_jobs))

    args.output.parent.mkdir(parents=True, exist_ok=True)
    with open(args.output, "w", newline="", encoding="utf-8") as f:
        writer = csv.DictWriter(f, fieldnames=list(rows[0].keys()))
        writer.writeheader()
        writer.writerows(rows)
    logging.info(f"Suite report saved to {args.output} ({len(rows)} runs)")

    for name in CASES:
        case_rows = [r for r in rows if r["case"] == name]
        failed = [r["seed"] for r in case_rows if not r["passed"]]
        logging.info(f"{name}: {len(case_rows) - len(failed)}/{len(case_rows)} passed" + (f", failed seeds {failed}" if failed else ""))

    ok, means = density_monotone(rows)
    logging.info(f"density monotone={ok} means={ {k: round(v, 2) for k, v in means.items()} }")

    lead = occlusion_lead()
    logging.info(f"occlusion lead={lead} s (needs >= {OCCLUSION_MIN_LEAD})")

    ratio = braking_ratio()
    logging.info(f"stopping distance ratio at friction 0.5: {ratio:.3f} (needs 2 +/- {BRAKING_TOLERANCE:.0%})")
    logging.info(f"Suite finished in {time.perf_counter() - start:.1f} s")


if __name__ == "__main__":
    main()
