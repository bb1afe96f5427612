from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path
from typing import Final

from dotenv import load_dotenv


PROJECT_ROOT: Final[Path] = Path(__file__).resolve().parents[2]


@dataclass(frozen=True, slots=True)
class Settings:
    data_dir: Path
    output_dir: Path

    # Simulation
    dt: float = 0.02
    lane_width: float = 3.5
    lidar_period_ticks: int = 5

    # Localization
    ndt_cell_size: float = 2.0

    # Bridge
    bridge_host: str = "127.0.0.1"
    bridge_port: int = 47000

    log_level: str = "INFO"


def _float_env(name: str, default: float) -> float:
    raw = os.getenv(name)
    if raw is None or raw == "":
        return default
    try:
        value = float(raw)
    except ValueError:
        raise RuntimeError(f"Invalid numeric env var: {name}={raw!r}")
    if value <= 0:
        raise RuntimeError(f"Env var must be positive: {name}={raw!r}")
    return value


def _int_env(name: str, default: int) -> int:
    raw = os.getenv(name)
    if raw is None or raw == "":
        return default
    try:
        value = int(raw)
    except ValueError:
        raise RuntimeError(f"Invalid integer env var: {name}={raw!r}")
    if value <= 0:
        raise RuntimeError(f"Env var must be positive: {name}={raw!r}")
    return value


def load_settings() -> Settings:
    load_dotenv(dotenv_path=PROJECT_ROOT / ".env", override=False)

    data_dir = Path(os.getenv("TESTBED_DATA_DIR") or PROJECT_ROOT / "pipeline" / "data")
    output_dir = Path(os.getenv("TESTBED_OUTPUT_DIR") or PROJECT_ROOT / "pipeline" / "output")

    dt = _float_env("TESTBED_DT", 0.02)
    lane_width = _float_env("TESTBED_LANE_WIDTH", 3.5)
    lidar_period_ticks = _int_env("TESTBED_LIDAR_PERIOD_TICKS", 5)
    ndt_cell_size = _float_env("TESTBED_NDT_CELL_SIZE", 2.0)

    bridge_host = os.getenv("TESTBED_BRIDGE_HOST") or "127.0.0.1"
    bridge_port = _int_env("TESTBED_BRIDGE_PORT", 47000)

    log_level = (os.getenv("TESTBED_LOG_LEVEL") or "INFO").upper()

    return Settings(
        data_dir=data_dir,
        output_dir=output_dir,
        dt=dt,
        lane_width=lane_width,
        lidar_period_ticks=lidar_period_ticks,
        ndt_cell_size=ndt_cell_size,
        bridge_host=bridge_host,
        bridge_port=bridge_port,
        log_level=log_level,
    )
