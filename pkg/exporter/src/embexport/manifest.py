"""Reader for the dataset manifest CSV consumed and produced by the
metric-learning toolchain: header ``id,path,label,patient_id``, one row
per sample, paths relative to an image root. The exporter only needs ids
and paths but validates the full shape so malformed files fail loudly.
"""

from __future__ import annotations

import csv
from pathlib import Path

HEADER = ["id", "path", "label", "patient_id"]


class ManifestError(ValueError):
    pass


def read_manifest(path: str | Path) -> tuple[list[str], list[str]]:
    """Return (ids, paths) in file order; duplicate ids abort."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ManifestError(f"cannot read manifest {path}: {exc}") from exc
    rows = list(csv.reader(text.splitlines()))
    if not rows or rows[0] != HEADER:
        got = rows[0] if rows else []
        raise ManifestError(f"{path}: expected header {HEADER}, got {got}")
    ids: list[str] = []
    paths: list[str] = []
    seen: set[str] = set()
    for n, row in enumerate(rows[1:], start=2):
        if len(row) != 4:
            raise ManifestError(f"{path}: line {n}: expected 4 fields, got {len(row)}")
        sid, rel = row[0], row[1]
        if not sid or not rel:
            raise ManifestError(f"{path}: line {n}: empty id or path")
        if sid in seen:
            raise ManifestError(f"{path}: duplicate sample id {sid!r}")
        seen.add(sid)
        ids.append(sid)
        paths.append(rel)
    return ids, paths
