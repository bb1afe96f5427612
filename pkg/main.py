from __future__ import annotations

import logging
from contextlib import asynccontextmanager
from pathlib import Path

from fastapi import FastAPI

from app.api.routes import router as api_router
from app.core.config import Settings, load_settings
from app.core.errors import TestbedError
from app.core.task_registry import InMemoryRegistry
from app.services.formats import network_from_json
from app.services.map_ingest import validate_network

logger = logging.getLogger(__name__)


def restore_maps(registry: InMemoryRegistry, maps_dir: Path) -> int:
    """Re-register networks ingested by an earlier server process."""
    restored = 0
    for network_file in sorted(maps_dir.glob("*.json")):
        try:
            net = network_from_json(network_file.read_bytes())
        except (TestbedError, ValueError, OSError) as e:
            logger.warning(f"Skipping stored map {network_file.name}: {e}")
            continue
        registry.add_map(
            name=f"{network_file.stem}.osm",
            network_file=str(network_file),
            segments=len(net.segments),
            issues=[f"{i.kind}: {i.message}" for i in validate_network(net)],
        )
        restored += 1
    return restored


@asynccontextmanager
async def lifespan(app: FastAPI):
    settings: Settings = load_settings()
    logging.basicConfig(level=settings.log_level, format='%(asctime)s - %(levelname)s - %(message)s')
    settings.data_dir.mkdir(parents=True, exist_ok=True)
    (settings.output_dir / "maps").mkdir(parents=True, exist_ok=True)

    registry = InMemoryRegistry()
    n = restore_maps(registry, settings.output_dir / "maps")
    logger.info(f"Testbed API ready: {n} stored map(s), output in {settings.output_dir}")

    app.state.settings = settings
    app.state.registry = registry
    yield
    logger.info("Testbed API shutting down; in-memory task status is discarded")


app = FastAPI(title="Autonomous Shuttle Simulation Testbed", version="0.1.0", lifespan=lifespan)
app.include_router(api_router)
