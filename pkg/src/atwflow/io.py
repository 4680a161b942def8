"""Persistence: binary field and mask dumps, series tables, trajectories, reports and manifests.

Field dumps are little-endian: the magic ``b"ATWF"``, a u32 format version,
a u32 dimension, one u32 per axis for the shape, the f64 spacing, one f64
per axis for the origin, then the row-major payload. Fields carry f64
values; masks carry one byte per cell with value 0 or 1. The payload length
tells the two apart.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
import struct
from pathlib import Path
from typing import Iterable

import numpy as np

from .grid import GridSpec, ScalarField, SetMask

MAGIC = b"ATWF"
FORMAT_VERSION = 1
SERIES_COLUMNS = ("k", "t", "volume", "perimeter_tv", "perimeter_euclid", "min_H", "max_H",
                  "dissipation", "energy", "solver_iters", "gap")
MANIFEST_NAME = "manifest.json"


class FieldFormatError(ValueError):
    """A file is not a valid field or mask dump."""


# field dumps ---------------------------------------------------------------

def _header(grid: GridSpec) -> bytes:
    dim = grid.dim
    return (MAGIC + struct.pack("<II", FORMAT_VERSION, dim)
            + struct.pack(f"<{dim}I", *grid.shape)
            + struct.pack("<d", grid.spacing)
            + struct.pack(f"<{dim}d", *grid.origin))


def encode_field(obj: ScalarField | SetMask) -> bytes:
    """Serialized bytes of a field or a mask."""
    if isinstance(obj, ScalarField):
        payload = np.ascontiguousarray(obj.values, dtype="<f8").tobytes()
    elif isinstance(obj, SetMask):
        payload = np.ascontiguousarray(obj.inside, dtype=np.uint8).tobytes()
    else:
        raise TypeError(f"cannot dump {type(obj).__name__}")
    return _header(obj.grid) + payload


def decode_field(data: bytes) -> ScalarField | SetMask:
    """Inverse of :func:`encode_field`.

    Raises
    ------
    FieldFormatError
        Bad magic, unknown version, truncated data or invalid mask bytes.
    """
    if data[:4] != MAGIC:
        raise FieldFormatError(f"bad magic {data[:4]!r}, expected {MAGIC!r}")
    pos = 4
    try:
        version, dim = struct.unpack_from("<II", data, pos)
        pos += 8
        if version != FORMAT_VERSION:
            raise FieldFormatError(f"unsupported format version {version}")
        if dim not in (2, 3):
            raise FieldFormatError(f"unsupported dimension {dim}")
        shape = struct.unpack_from(f"<{dim}I", data, pos)
        pos += 4 * dim
        (spacing,) = struct.unpack_from("<d", data, pos)
        pos += 8
        origin = struct.unpack_from(f"<{dim}d", data, pos)
        pos += 8 * dim
    except struct.error as exc:
        raise FieldFormatError(f"truncated header: {exc}") from None
    try:
        grid = GridSpec(tuple(shape), spacing, tuple(origin))
    except ValueError as exc:
        raise FieldFormatError(f"invalid grid in header: {exc}") from None
    payload = data[pos:]
    if len(payload) == 8 * grid.size:
        values = np.frombuffer(payload, dtype="<f8").reshape(grid.shape)
        try:
            return ScalarField(grid, values.astype(np.float64))
        except ValueError as exc:
            raise FieldFormatError(str(exc)) from None
    if len(payload) == grid.size:
        raw = np.frombuffer(payload, dtype=np.uint8).reshape(grid.shape)
        if raw.max(initial=0) > 1:
            raise FieldFormatError("mask payload has bytes other than 0 and 1")
        return SetMask(grid, raw.astype(bool))
    raise FieldFormatError(
        f"payload of {len(payload)} bytes fits neither a field ({8 * grid.size}) nor a mask ({grid.size})")


def dump_field(path, obj: ScalarField | SetMask) -> Path:
    path = Path(path)
    path.write_bytes(encode_field(obj))
    return path


def load_field(path) -> ScalarField | SetMask:
    return decode_field(Path(path).read_bytes())


# JSON ----------------------------------------------------------------------

def jsonable(obj):
    """Plain JSON types; non-finite floats become ``None`` and arrays become lists."""
    if isinstance(obj, dict):
        return {str(k): jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return jsonable(obj.tolist())
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        return float(obj) if math.isfinite(obj) else None
    if obj is None or isinstance(obj, str):
        return obj
    if hasattr(obj, "to_dict"):
        return jsonable(obj.to_dict())
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def dumps_json(obj) -> str:
    return json.dumps(jsonable(obj), indent=2, sort_keys=True, allow_nan=False) + "\n"


def write_json(path, obj) -> Path:
    path = Path(path)
    path.write_text(dumps_json(obj))
    return path


def write_reports(path, reports: Iterable) -> Path:
    """JSON list of check reports, one object per report with its fields verbatim."""
    return write_json(path, [r.to_dict() for r in reports])


# series --------------------------------------------------------------------

def _cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    v = float(v)
    return repr(v) if math.isfinite(v) else ""


def series_rows(traj, ledger) -> list[dict]:
    """One row per set ``E_k``; solver columns are blank for ``k = 0``."""
    rows = []
    for k, E in enumerate(traj.steps):
        st = traj.stats[k - 1] if k > 0 else None
        rows.append({
            "k": k,
            "t": k * traj.h,
            "volume": E.volume,
            "perimeter_tv": ledger.perimeter_tv[k],
            "perimeter_euclid": ledger.perimeter_euclid[k],
            "min_H": ledger.min_H[k],
            "max_H": ledger.max_H[k],
            "dissipation": ledger.dissipation[k],
            "energy": ledger.energy[k],
            "solver_iters": st.iterations if st is not None else None,
            "gap": st.gap if st is not None else None,
        })
    return rows


def write_series(path, traj, ledger) -> Path:
    """CSV with header ``k,t,volume,perimeter_tv,perimeter_euclid,min_H,max_H,dissipation,energy,solver_iters,gap``.

    Floats are written with ``repr`` so they round-trip exactly; missing or
    non-finite values are blank.
    """
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SERIES_COLUMNS)
        for row in series_rows(traj, ledger):
            w.writerow([_cell(row[c]) for c in SERIES_COLUMNS])
    return path


def read_series(path) -> list[dict]:
    """Rows of a series file; blank cells become NaN."""
    with Path(path).open(newline="") as fh:
        r = csv.DictReader(fh)
        if tuple(r.fieldnames or ()) != SERIES_COLUMNS:
            raise ValueError(f"unexpected series header {r.fieldnames}")
        out = []
        for row in r:
            out.append({c: (int(v) if c in ("k", "solver_iters") and v else float(v) if v else math.nan)
                        for c, v in row.items()})
    return out


# trajectories ----------------------------------------------------------------

def _stats_dict(st) -> dict:
    return {"iterations": st.iterations, "energy": st.energy, "gap": st.gap, "converged": st.converged,
            "active_cells": st.active_cells, "band_expanded": st.band_expanded}


def save_trajectory(directory, traj) -> list[Path]:
    """Write ``E_k`` as ``steps/E_00000.atwf`` plus ``trajectory.json``; returns the files written.

    Wall time is left out so that equal runs give equal bytes.
    """
    directory = Path(directory)
    (directory / "steps").mkdir(parents=True, exist_ok=True)
    files = []
    names = []
    for k, E in enumerate(traj.steps):
        name = f"steps/E_{k:05d}.atwf"
        files.append(dump_field(directory / name, E))
        names.append(name)
    meta = {"h": traj.h, "tv_mode": traj.tv_mode, "distance": traj.distance, "extinct": traj.extinct,
            "truncated": traj.truncated, "stalled": traj.stalled, "failure": traj.failure,
            "steps": names, "stats": [_stats_dict(s) for s in traj.stats]}
    files.append(write_json(directory / "trajectory.json", meta))
    return files


def load_trajectory(directory):
    """Inverse of :func:`save_trajectory`."""
    from .scheme import Trajectory
    from .tv import SolveStats

    directory = Path(directory)
    try:
        meta = json.loads((directory / "trajectory.json").read_text())
    except FileNotFoundError:
        raise FileNotFoundError(f"{directory} holds no trajectory.json") from None
    steps = []
    for name in meta["steps"]:
        E = load_field(directory / name)
        if not isinstance(E, SetMask):
            raise FieldFormatError(f"{name} is not a mask dump")
        steps.append(E)
    stats = [SolveStats(s["iterations"], s["energy"], math.nan if s["gap"] is None else s["gap"],
                        s["converged"], (), s["active_cells"], s["band_expanded"]) for s in meta["stats"]]
    return Trajectory(meta["h"], steps, stats, meta["tv_mode"], meta["distance"], meta["extinct"],
                      meta["truncated"], meta["stalled"], meta["failure"])


# manifest --------------------------------------------------------------------

def sha256_file(path) -> str:
    h = hashlib.sha256()
    with Path(path).open("rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(directory, config: dict, extra: dict | None = None) -> Path:
    """Hash every file under ``directory`` (except the manifest) and echo the config."""
    directory = Path(directory)
    files = {p.relative_to(directory).as_posix(): sha256_file(p)
             for p in sorted(directory.rglob("*")) if p.is_file() and p.name != MANIFEST_NAME}
    body = {"format_version": FORMAT_VERSION, "config": config, "files": files}
    if extra:
        body.update(extra)
    return write_json(directory / MANIFEST_NAME, body)


def read_manifest(directory) -> dict:
    return json.loads((Path(directory) / MANIFEST_NAME).read_text())


def verify_manifest(directory) -> list[str]:
    """Problems found: missing, altered or unlisted files. Empty when intact."""
    directory = Path(directory)
    listed = read_manifest(directory)["files"]
    problems = []
    for name, digest in sorted(listed.items()):
        p = directory / name
        if not p.is_file():
            problems.append(f"missing {name}")
        elif sha256_file(p) != digest:
            problems.append(f"hash mismatch {name}")
    for p in sorted(directory.rglob("*")):
        rel = p.relative_to(directory).as_posix()
        if p.is_file() and p.name != MANIFEST_NAME and rel not in listed:
            problems.append(f"unlisted {rel}")
    return problems
