"""Portable n-dimensional array container with JSON sidecars.

Every array artifact the pipeline emits uses one fixed byte layout so the
files can be parsed without Python: an ``.arr`` file is

    magic line   b"RSFR-ARR\\n"
    header line  UTF-8 JSON + b"\\n", e.g. {"dtype": "<f8", "shape": [96, 96]}
    payload      raw little-endian bytes, C order (row-major)

Metadata that is not part of the array itself (b-value, direction, seed,
config hash, units) travels in a sidecar ``<name>.json`` next to the array.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

MAGIC = b"RSFR-ARR\n"

# dtypes are pinned to explicit little-endian codes so files are portable
_ALLOWED_DTYPES = {"<f8", "<f4", "<i8", "<i4", "<u1", "<c16", "<c8"}


def save_array(path: str | Path, arr: np.ndarray, sidecar: dict | None = None) -> Path:
    """Write ``arr`` to ``path`` in the container format.

    If ``sidecar`` is given it is written as JSON next to the array file.
    Returns the array path.
    """
    path = Path(path)
    arr = np.ascontiguousarray(arr)
    code = arr.dtype.str
    if code[0] in ("|", "="):
        code = "<" + code[1:]  # single-byte and native codes normalize to LE
    elif code[0] == ">":
        arr = arr.astype(arr.dtype.newbyteorder("<"))
        code = arr.dtype.str
    if code not in _ALLOWED_DTYPES:
        arr = arr.astype(np.float64)
        code = "<f8"
    header = json.dumps({"dtype": code, "shape": list(arr.shape)}, sort_keys=True)
    payload = arr.astype(np.dtype(code), copy=False).tobytes(order="C")
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(header.encode("utf-8") + b"\n")
        fh.write(payload)
    if sidecar is not None:
        save_sidecar(path, sidecar)
    return path


def load_array(path: str | Path) -> np.ndarray:
    """Read an array written by :func:`save_array`."""
    path = Path(path)
    with open(path, "rb") as fh:
        magic = fh.read(len(MAGIC))
        if magic != MAGIC:
            raise ValueError(f"{path} is not an RSFR array container")
        header = json.loads(fh.readline().decode("utf-8"))
        dtype = np.dtype(header["dtype"])
        shape = tuple(header["shape"])
        data = fh.read()
    n_expected = int(np.prod(shape)) * dtype.itemsize
    if len(data) != n_expected:
        raise ValueError(
            f"{path}: payload is {len(data)} bytes, header promises {n_expected}"
        )
    return np.frombuffer(data, dtype=dtype).reshape(shape).copy()


def sidecar_path(path: str | Path) -> Path:
    path = Path(path)
    return path.with_suffix(path.suffix + ".json")


def save_sidecar(path: str | Path, meta: dict) -> Path:
    out = sidecar_path(path)
    out.write_text(json.dumps(meta, sort_keys=True, indent=1, default=_jsonify))
    return out


def load_sidecar(path: str | Path) -> dict:
    return json.loads(sidecar_path(path).read_text())


def _jsonify(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    raise TypeError(f"cannot serialize {type(obj)!r}")
