"""Shared test helpers."""

from __future__ import annotations

import os

FULL_SUITE = os.getenv("TESTBED_FULL_SUITE") == "1"


def seeds(full: int, reduced: int) -> range:
    """Seed range for multi-seed suites; the full count only with TESTBED_FULL_SUITE=1."""
    return range(full if FULL_SUITE else reduced)
