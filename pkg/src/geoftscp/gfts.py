"""GFTS directory format: ``manifest.json`` plus a long-format ``values.csv``.

``values.csv`` has header ``loc_id,coord1,coord2,k,j,value`` with one row
per observation in ``(loc_id, k, j)`` lexicographic order.  ``loc_id`` is
the 0-based location index; ``k`` and ``j`` are 1-based year and grid
indices.  Floats are written with 17 significant digits, which makes a
write/read round trip exact.
"""

from __future__ import annotations

import csv
import json
import os
import tempfile
from pathlib import Path

import numpy as np
import pandas as pd

from .core import FunctionalDataset, GeoFTSError, SpatialDomain, validate_dataset

HEADER = ["loc_id", "coord1", "coord2", "k", "j", "value"]
CHUNK_ROWS = 200_000


class MissingRows(GeoFTSError):
    pass


class OrderViolation(GeoFTSError):
    pass


class MalformedFile(GeoFTSError):
    pass


def fmt(x: float) -> str:
    return format(float(x), ".17g")


def atomic_write_text(path, text: str) -> None:
    """Write through a temporary file in the same directory, then rename."""
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="") as f:
            f.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_gfts(ds: FunctionalDataset, path) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    n, N, m = ds.values.shape
    fd, tmp = tempfile.mkstemp(dir=path, prefix=".values.csv.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="") as f:
            f.write(",".join(HEADER) + "\n")
            kk = np.repeat(np.arange(1, N + 1), m)
            jj = np.tile(np.arange(1, m + 1), N)
            for i in range(n):
                c1, c2 = fmt(ds.domain.coords[i, 0]), fmt(ds.domain.coords[i, 1])
                vals = ds.values[i].ravel()
                prefix = f"{i},{c1},{c2},"
                f.write("".join(f"{prefix}{k},{j},{v!r}\n" for k, j, v in zip(kk.tolist(), jj.tolist(), vals.tolist())))
        os.replace(tmp, path / "values.csv")
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    manifest = {"domain_kind": ds.domain.kind, "n": n, "N": N, "m": m,
                "u_grid": [float(u) for u in ds.u_grid], "value_file": "values.csv"}
    atomic_write_text(path / "manifest.json", json.dumps(manifest, indent=2) + "\n")


def _read_manifest(path: Path) -> dict:
    try:
        man = json.loads((path / "manifest.json").read_text())
    except FileNotFoundError as e:
        raise MalformedFile(f"{path / 'manifest.json'} not found") from e
    except json.JSONDecodeError as e:
        raise MalformedFile(f"manifest.json line {e.lineno}: {e.msg}") from e
    for key in ("domain_kind", "n", "N", "m", "u_grid", "value_file"):
        if key not in man:
            raise MalformedFile(f"manifest.json is missing {key!r}")
    if len(man["u_grid"]) != man["m"]:
        raise MalformedFile("manifest u_grid length differs from m")
    return man


def _locate_bad_line(file: Path, start_line: int, ncols: int) -> int:
    with open(file, newline="") as f:
        for lineno, row in enumerate(csv.reader(f), start=1):
            if lineno < start_line:
                continue
            if len(row) != ncols:
                return lineno
            try:
                [float(x) for x in row]
            except ValueError:
                return lineno
    return start_line


def read_gfts(path) -> FunctionalDataset:
    """Stream ``values.csv`` in chunks straight into a preallocated array.

    Raises :class:`MissingRows` when the row count differs from ``n N m``,
    :class:`OrderViolation` when rows are out of ``(loc_id, k, j)`` order and
    :class:`MalformedFile` (with a line number) for unparsable rows.
    """
    path = Path(path)
    man = _read_manifest(path)
    n, N, m = int(man["n"]), int(man["N"]), int(man["m"])
    file = path / man["value_file"]
    total = n * N * m
    values = np.empty(total)
    coords = np.empty((n, 2))
    with open(file) as f:
        head = f.readline().strip()
    if head.split(",") != HEADER:
        raise MalformedFile(f"{file.name} line 1: expected header {','.join(HEADER)}")
    pos = 0
    try:
        reader = pd.read_csv(file, chunksize=CHUNK_ROWS, float_precision="round_trip",
                             dtype={"loc_id": np.int64, "k": np.int64, "j": np.int64,
                                    "coord1": np.float64, "coord2": np.float64, "value": np.float64})
        for chunk in reader:
            rows = len(chunk)
            if chunk.isna().to_numpy().any():
                bad = int(np.flatnonzero(chunk.isna().to_numpy().any(axis=1))[0])
                raise MalformedFile(f"{file.name} line {pos + bad + 2}: missing field")
            if pos + rows > total:
                raise MissingRows(f"{file.name} has more than the expected {total} rows")
            idx = np.arange(pos, pos + rows)
            ei, rem = np.divmod(idx, N * m)
            ek, ej = np.divmod(rem, m)
            got = chunk[["loc_id", "k", "j"]].to_numpy()
            ok = (got[:, 0] == ei) & (got[:, 1] == ek + 1) & (got[:, 2] == ej + 1)
            if not ok.all():
                bad = int(np.flatnonzero(~ok)[0])
                raise OrderViolation(
                    f"{file.name} line {pos + bad + 2}: expected (loc_id, k, j) = "
                    f"({ei[bad]}, {ek[bad] + 1}, {ej[bad] + 1}), got {tuple(int(x) for x in got[bad])}")
            values[pos: pos + rows] = chunk["value"].to_numpy()
            c = chunk[["coord1", "coord2"]].to_numpy()
            first = (rem == 0)
            coords[ei[first]] = c[first]
            if not np.array_equal(c, coords[ei]):
                bad = int(np.flatnonzero(np.any(c != coords[ei], axis=1))[0])
                raise MalformedFile(f"{file.name} line {pos + bad + 2}: coordinates differ within a location")
            pos += rows
    except (ValueError, pd.errors.ParserError) as e:
        if isinstance(e, GeoFTSError):
            raise
        line = _locate_bad_line(file, pos + 2, len(HEADER))
        raise MalformedFile(f"{file.name} line {line}: cannot parse row") from e
    if pos != total:
        raise MissingRows(f"{file.name} has {pos} rows, expected n*N*m = {total}")
    domain = SpatialDomain(man["domain_kind"], coords)
    values.setflags(write=False)  # hand the buffer over without a copy
    ds = FunctionalDataset(domain, values.reshape(n, N, m), np.asarray(man["u_grid"], dtype=float))
    return validate_dataset(ds)
