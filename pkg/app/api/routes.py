from __future__ import annotations

import logging
import time
from functools import partial
from pathlib import Path
from typing import Any, Optional

import anyio
from fastapi import APIRouter, BackgroundTasks, File, HTTPException, Request, UploadFile
from pydantic import BaseModel, Field, model_validator

from app.core.config import Settings
from app.core.errors import TestbedError
from app.core.file_utils import sanitize_filename
from app.core.task_registry import InMemoryRegistry
from app.services.formats import ScenarioKind, ScenarioSpec, network_to_json
from app.services.map_ingest import ingest_osm
from app.services.scenario_harness import run_scenario
from app.services.scenario_maps import builtin_scenario
from pipeline.speed_analyzer import SpeedTracker


logger = logging.getLogger(__name__)

router = APIRouter(prefix="/api/v1")

OSM_EXTENSIONS = {".osm", ".xml"}


def _get_settings(request: Request) -> Settings:
    return request.app.state.settings


def _get_registry(request: Request) -> InMemoryRegistry:
    return request.app.state.registry


class IngestResponse(BaseModel):
    map_id: str
    name: str
    segments: int
    issues: list[str]


class MapInfo(BaseModel):
    id: str
    name: str
    segments: int
    date_ingested: str
    issues: list[str]


class ListMapsResponse(BaseModel):
    maps: list[MapInfo]


class RunRequest(BaseModel):
    scenario: Optional[dict[str, Any]] = None  # full scenario document
    builtin: Optional[ScenarioKind] = None
    seeds: list[int] = Field(default_factory=lambda: [0], min_length=1, max_length=200)
    map_id: Optional[str] = None  # run on a map ingested through /maps/ingest

    @model_validator(mode="after")
    def _one_source(self) -> RunRequest:
        if (self.scenario is None) == (self.builtin is None):
            raise ValueError("Give exactly one of scenario or builtin")
        return self


class RunResponse(BaseModel):
    task_id: str
    runs: int
    message: str


class StatusResponse(BaseModel):
    status: str
    progress: str
    error: Optional[str] = None
    timing: Optional[dict[str, float]] = None  # {"total_seconds": 12.5, "avg_per_run": 2.5}
    completed_runs: int = 0
    collisions: int = 0
    emergency_brakes: int = 0


class OutcomeResponse(BaseModel):
    task_id: str
    outcomes: list[dict[str, Any]]


class MetricsResponse(BaseModel):
    task_id: str
    total_time_seconds: Optional[float] = None
    summary: dict[str, Any]  # per-stage loop timing


@router.post("/maps/ingest", tags=["Maps"], response_model=IngestResponse)
async def ingest_map(request: Request, file: UploadFile = File(...)) -> IngestResponse:
    settings = _get_settings(request)
    registry = _get_registry(request)

    safe_name = sanitize_filename(file.filename or "map.osm")
    if Path(safe_name).suffix.lower() not in OSM_EXTENSIONS:
        raise HTTPException(status_code=400, detail="Expected an .osm or .xml file")

    contents = await file.read()
    try:
        net, issues = await anyio.to_thread.run_sync(ingest_osm, contents)
    except TestbedError as e:
        raise HTTPException(status_code=422, detail=str(e))

    maps_dir = settings.output_dir / "maps"
    maps_dir.mkdir(parents=True, exist_ok=True)
    (settings.data_dir / "maps").mkdir(parents=True, exist_ok=True)
    (settings.data_dir / "maps" / safe_name).write_bytes(contents)
    network_file = maps_dir / f"{Path(safe_name).stem}.json"
    network_file.write_text(network_to_json(net), encoding="utf-8")

    rec = registry.add_map(
        name=safe_name,
        network_file=str(network_file),
        segments=len(net.segments),
        issues=[f"{i.kind}: {i.message}" for i in issues],
    )
    return IngestResponse(map_id=rec.id, name=rec.name, segments=rec.segments, issues=rec.issues)


@router.get("/maps", tags=["Maps"], response_model=ListMapsResponse)
async def list_maps(request: Request) -> ListMapsResponse:
    registry = _get_registry(request)
    maps = [
        MapInfo(id=r.id, name=r.name, segments=r.segments, date_ingested=r.date_ingested, issues=r.issues)
        for r in registry.list_maps()
    ]
    return ListMapsResponse(maps=maps)


def _specs_for(payload: RunRequest, registry: InMemoryRegistry) -> tuple[ScenarioSpec, list[ScenarioSpec]]:
    if payload.builtin is not None:
        base = builtin_scenario(payload.builtin)
    else:
        base = ScenarioSpec.model_validate(payload.scenario)
    if payload.map_id is not None:
        rec = registry.get_map(map_id=payload.map_id)
        if rec is None:
            raise HTTPException(status_code=404, detail="Unknown map_id")
        base = base.model_copy(update={"map": rec.network_file})
    return base, [base.model_copy(update={"seed": s, "name": f"{base.name}-seed{s}"}) for s in payload.seeds]


async def _run_scenarios_job(
    *,
    task_id: str,
    specs: list[ScenarioSpec],
    settings: Settings,
    registry: InMemoryRegistry,
) -> None:
    tracker = registry.get_speed_tracker(task_id=task_id)
    registry.start_task(task_id=task_id)

    job_start = time.perf_counter()
    for spec in specs:
        out_dir = settings.output_dir / "runs" / task_id / sanitize_filename(spec.name)
        try:
            outcome = await anyio.to_thread.run_sync(
                partial(run_scenario, spec, settings=settings, out_dir=out_dir, tracker=tracker)
            )
        except Exception as e:
            logger.exception(f"Task {task_id}: {spec.name} failed")
            registry.record_run(task_id=task_id, seed=spec.seed, error=str(e))
            continue
        registry.record_run(task_id=task_id, seed=spec.seed, outcome=outcome.model_dump(mode="json"))

    rec = registry.finish_task(task_id=task_id, total_time_seconds=time.perf_counter() - job_start)
    logger.info(
        f"Task {task_id} {rec.status}: {rec.completed_runs}/{rec.total_runs} reached the route end, "
        f"{rec.collisions} collisions, {rec.total_time_seconds:.1f} s"
    )


@router.post("/scenarios/run", tags=["Scenarios"], response_model=RunResponse)
async def run_scenarios(request: Request, background_tasks: BackgroundTasks, payload: RunRequest) -> RunResponse:
    settings = _get_settings(request)
    registry = _get_registry(request)

    try:
        base, specs = _specs_for(payload, registry)
        rec = registry.create_task(
            scenario=base.name,
            seeds=[s.seed for s in specs],
            dt=base.dt,
            tracker=SpeedTracker(),
        )
    except (TestbedError, ValueError) as e:
        raise HTTPException(status_code=422, detail=str(e))

    settings.output_dir.mkdir(parents=True, exist_ok=True)
    background_tasks.add_task(
        _run_scenarios_job, task_id=rec.task_id, specs=specs, settings=settings, registry=registry
    )
    return RunResponse(task_id=rec.task_id, runs=rec.total_runs, message="Scenario runs started")


def _task_or_404(registry: InMemoryRegistry, task_id: str):
    rec = registry.get_task(task_id=task_id)
    if rec is None:
        raise HTTPException(status_code=404, detail="Unknown task_id (server restart clears in-memory status)")
    return rec


@router.get("/scenarios/status/{task_id}", tags=["Scenarios"], response_model=StatusResponse)
async def scenario_status(request: Request, task_id: str) -> StatusResponse:
    rec = _task_or_404(_get_registry(request), task_id)
    timing = None
    if rec.total_time_seconds is not None:
        timing = {
            "total_seconds": rec.total_time_seconds,
            "avg_per_run": rec.total_time_seconds / rec.total_runs if rec.total_runs > 0 else 0,
        }
    return StatusResponse(
        status=rec.status,
        progress=rec.progress,
        error=rec.error,
        timing=timing,
        completed_runs=rec.completed_runs,
        collisions=rec.collisions,
        emergency_brakes=rec.emergency_brakes,
    )


@router.get("/scenarios/outcome/{task_id}", tags=["Scenarios"], response_model=OutcomeResponse)
async def scenario_outcome(request: Request, task_id: str) -> OutcomeResponse:
    registry = _get_registry(request)
    _task_or_404(registry, task_id)
    return OutcomeResponse(task_id=task_id, outcomes=registry.get_outcomes(task_id=task_id))


@router.get("/scenarios/metrics/{task_id}", tags=["Scenarios"], response_model=MetricsResponse)
async def scenario_metrics(request: Request, task_id: str) -> MetricsResponse:
    """Per-stage loop timing of a scenario task."""
    registry = _get_registry(request)
    rec = _task_or_404(registry, task_id)
    tracker = registry.get_speed_tracker(task_id=task_id)
    if tracker is None:
        raise HTTPException(status_code=404, detail="No timing data available for this task")
    return MetricsResponse(
        task_id=task_id, total_time_seconds=rec.total_time_seconds, summary=tracker.summary_dict(rec.dt)
    )
