from __future__ import annotations

import os
import re
from pathlib import Path


_FILENAME_SAFE_RE = re.compile(r"[^A-Za-z0-9._-]+")


def sanitize_filename(filename: str, *, default: str = "upload") -> str:
    """
    Prevent path traversal and keep filenames filesystem-friendly.
    Also used for per-run output directories named after scenarios.
    """
    name = Path(filename).name
    name = _FILENAME_SAFE_RE.sub("_", name).strip("._")
    if not name:
        return default
    return name[:200]


def write_text_atomic(path: str | Path, text: str) -> Path:
    """Write through a sibling temp file so readers never see a half-written document."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(f".{path.name}.tmp")
    with open(tmp, "w", encoding="utf-8", newline="") as f:
        f.write(text)
    os.replace(tmp, path)
    return path
