"""On-disk formats: KRF1 field snapshots, JSON sidecars, trajectory CSV.

KRF1 layout, all little-endian:

    bytes 0..3    magic "KRF1"
    int32         n_dims
    int32         kappa (base dimensions)
    int32 * n     points per axis
    float64 * N   values, C row-major order

Every field file gets a JSON sidecar at <path>.json carrying the grid shape,
the originating config hash and free-form metadata. Sidecars are written with
sorted keys and no timestamps so identical inputs produce identical bytes.

Trajectory CSV uses a fixed column order and %.16e formatting (17 significant
digits, enough to round-trip a float64) so reruns with the same config and
seed are byte-identical.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from .errors import ConfigError
from .grid import ScalarField, TorusGrid

__all__ = [
    "MAGIC",
    "CSV_COLUMNS",
    "write_field",
    "read_field",
    "write_trajectory_csv",
    "read_trajectory_csv",
    "config_hash",
    "artifact_dir",
    "write_sidecar",
    "read_sidecar",
]

MAGIC = b"KRF1"

CSV_COLUMNS = (
    "t",
    "sup_phi",
    "inf_phi",
    "I_t",
    "excess_IplusIprime",
    "dist_static",
    "max_residual",
    "dt",
)


def config_hash(text: str) -> str:
    """Content hash used to address run artifacts (first 16 hex digits)."""
    return hashlib.sha256(text.encode("utf-8")).hexdigest()[:16]


def artifact_dir(out_root: str | Path, digest: str) -> Path:
    path = Path(out_root) / digest
    path.mkdir(parents=True, exist_ok=True)
    return path


def write_sidecar(path: str | Path, meta: dict) -> Path:
    side = Path(str(path) + ".json")
    side.write_text(json.dumps(meta, sort_keys=True, indent=2) + "\n")
    return side


def read_sidecar(path: str | Path) -> dict:
    side = Path(str(path) + ".json")
    if not side.exists():
        return {}
    return json.loads(side.read_text())


def write_field(path: str | Path, field: ScalarField, meta: dict | None = None) -> Path:
    """Write a scalar field in KRF1 format plus its JSON sidecar."""
    path = Path(path)
    grid = field.grid
    header = MAGIC + struct.pack("<ii", grid.n_dims, grid.base_dims)
    header += struct.pack(f"<{grid.n_dims}i", *grid.points)
    payload = np.ascontiguousarray(field.values, dtype="<f8").tobytes()
    path.write_bytes(header + payload)
    sidecar = {
        "format": "KRF1",
        "n_dims": grid.n_dims,
        "kappa": grid.base_dims,
        "points": list(grid.points),
    }
    if meta:
        sidecar.update(meta)
    write_sidecar(path, sidecar)
    return path


def read_field(path: str | Path) -> tuple[ScalarField, dict]:
    """Read a KRF1 scalar field; returns the field and its sidecar dict."""
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < 12 or raw[:4] != MAGIC:
        raise ConfigError(f"{path}: not a KRF1 field file")
    n_dims, kappa = struct.unpack_from("<ii", raw, 4)
    if n_dims < 1 or n_dims > 16:
        raise ConfigError(f"{path}: implausible dimension count {n_dims}")
    offset = 12
    if len(raw) < offset + 4 * n_dims:
        raise ConfigError(f"{path}: truncated header")
    points = struct.unpack_from(f"<{n_dims}i", raw, offset)
    offset += 4 * n_dims
    count = int(np.prod(points))
    expected = offset + 8 * count
    if len(raw) != expected:
        raise ConfigError(
            f"{path}: payload size {len(raw) - offset} bytes, expected {8 * count}"
        )
    values = np.frombuffer(raw, dtype="<f8", count=count, offset=offset)
    grid = TorusGrid(n_dims=n_dims, points=tuple(points), base_dims=kappa)
    field = ScalarField(grid, values.reshape(grid.shape).copy())
    return field, read_sidecar(path)


def write_trajectory_csv(path: str | Path, rows) -> Path:
    """Write diagnostic rows with the fixed column schema.

    rows: iterable of dicts keyed by CSV_COLUMNS entries; missing keys are
    written as nan so the column layout never shifts.
    """
    path = Path(path)
    lines = [",".join(CSV_COLUMNS)]
    for row in rows:
        lines.append(
            ",".join("%.16e" % float(row.get(col, float("nan"))) for col in CSV_COLUMNS)
        )
    path.write_text("\n".join(lines) + "\n", newline="")
    return path


def read_trajectory_csv(path: str | Path) -> dict[str, np.ndarray]:
    path = Path(path)
    with path.open() as fh:
        header = fh.readline().strip().split(",")
        data = np.loadtxt(fh, delimiter=",", ndmin=2)
    if data.size == 0:
        return {name: np.empty(0) for name in header}
    return {name: data[:, i] for i, name in enumerate(header)}
