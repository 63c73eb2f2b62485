"""Plain-text artifacts: KVFLOW1 field snapshots, CSV tables, key-value reports.

Every file is written to a temporary sibling first and moved into place,
so readers never observe a half-written artifact.
"""

from __future__ import annotations

import logging
import math
import os
from pathlib import Path
from typing import Iterable, Mapping, Sequence
from uuid import uuid4

import numpy as np

from services.manifold import KIND_DIMENSIONS, FieldShapeError, ManifoldData

logger = logging.getLogger(__name__)

SNAPSHOT_MAGIC = "KVFLOW1"


class SnapshotFormatError(ValueError):
    pass


def atomic_write_text(path: Path, text: str) -> Path:
    path = Path(path)
    tmp = path.with_name(f".{path.name}.{uuid4().hex}.tmp")
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp.write_text(text, encoding="utf-8")
        os.replace(tmp, path)
    except OSError as exc:
        tmp.unlink(missing_ok=True)
        raise OSError(f"Failed to write {path}: {exc}") from exc
    return path


def format_number(value: float | int | str | bool) -> str:
    if isinstance(value, bool):
        return str(value).lower()
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        value = float(value)
        if math.isnan(value):
            return "nan"
        # repr is the shortest string that round-trips
        return repr(value)
    return str(value)


def write_snapshot(path: Path, x: np.ndarray, manifold: ManifoldData) -> Path:
    """Header ``KVFLOW1 <kind> <m> <n1> ... <nm>`` then one line of components per node."""
    if x.shape != (manifold.dim, manifold.n_nodes):
        raise FieldShapeError(f"Snapshot field has shape {x.shape}, expected {(manifold.dim, manifold.n_nodes)}")
    header = " ".join([SNAPSHOT_MAGIC, manifold.kind, str(manifold.dim), *(str(n) for n in manifold.grid.shape)])
    lines = [header]
    lines.extend(" ".join(repr(float(v)) for v in x[:, node]) for node in range(manifold.n_nodes))
    return atomic_write_text(path, "\n".join(lines) + "\n")


def read_snapshot(path: Path, manifold: ManifoldData | None = None) -> tuple[str, tuple[int, ...], np.ndarray]:
    """Returns (kind, resolution, field); checks the grid against ``manifold`` when given."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"Snapshot not found: {path}")
    lines = path.read_text(encoding="utf-8").splitlines()
    if not lines:
        raise SnapshotFormatError(f"{path}: empty snapshot")

    head = lines[0].split()
    if len(head) < 3 or head[0] != SNAPSHOT_MAGIC:
        raise SnapshotFormatError(f"{path}:1: expected '{SNAPSHOT_MAGIC} <kind> <m> <n1> ...', got {lines[0]!r}")
    kind = head[1]
    if kind not in KIND_DIMENSIONS:
        raise SnapshotFormatError(f"{path}:1: unknown manifold kind {kind!r}")
    try:
        m = int(head[2])
        resolution = tuple(int(n) for n in head[3:])
    except ValueError as exc:
        raise SnapshotFormatError(f"{path}:1: malformed header: {exc}") from exc
    if m != KIND_DIMENSIONS[kind] or len(resolution) != m:
        raise SnapshotFormatError(f"{path}:1: dimension {m} / resolution {resolution} do not fit {kind}")

    n_nodes = int(np.prod(resolution))
    body = [ln for ln in lines[1:] if ln.strip()]
    if len(body) != n_nodes:
        raise SnapshotFormatError(f"{path}: expected {n_nodes} node lines, found {len(body)}")
    field = np.empty((m, n_nodes))
    for node, line in enumerate(body):
        parts = line.split()
        if len(parts) != m:
            raise SnapshotFormatError(f"{path}:{node + 2}: expected {m} components, got {len(parts)}")
        try:
            field[:, node] = [float(p) for p in parts]
        except ValueError as exc:
            raise SnapshotFormatError(f"{path}:{node + 2}: {exc}") from exc

    if manifold is not None and (kind != manifold.kind or resolution != tuple(manifold.grid.shape)):
        raise FieldShapeError(
            f"{path}: snapshot is {kind} {resolution}, manifold is {manifold.kind} {tuple(manifold.grid.shape)}"
        )
    return kind, resolution, field


def write_csv(path: Path, header: Sequence[str], rows: Iterable[Sequence[float | int | str]]) -> Path:
    lines = [",".join(header)]
    lines.extend(",".join(format_number(v) for v in row) for row in rows)
    return atomic_write_text(path, "\n".join(lines) + "\n")


def read_csv(path: Path) -> tuple[list[str], np.ndarray]:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"CSV not found: {path}")
    lines = [ln for ln in path.read_text(encoding="utf-8").splitlines() if ln.strip()]
    if not lines:
        raise SnapshotFormatError(f"{path}: empty CSV")
    header = lines[0].split(",")
    rows = []
    for lineno, line in enumerate(lines[1:], start=2):
        parts = line.split(",")
        if len(parts) != len(header):
            raise SnapshotFormatError(f"{path}:{lineno}: expected {len(header)} columns, got {len(parts)}")
        try:
            rows.append([float(p) for p in parts])
        except ValueError as exc:
            raise SnapshotFormatError(f"{path}:{lineno}: {exc}") from exc
    return header, np.array(rows).reshape(len(rows), len(header))


def write_key_values(path: Path, values: Mapping[str, float | int | str | bool]) -> Path:
    text = "\n".join(f"{key}: {format_number(val)}" for key, val in values.items())
    return atomic_write_text(path, text + "\n")
