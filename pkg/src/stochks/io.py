"""Binary blob format shared by kernel tables and density/particle snapshots.

A blob is one line of UTF-8 JSON (the header, terminated by a newline)
followed by little-endian float64 data, row-major.
"""

import json
from pathlib import Path

import numpy as np


def write_blob(path, header, arrays):
    path = Path(path)
    payload = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(payload + b"\n")
        for arr in arrays:
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return path


def read_blob(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    cut = raw.index(b"\n")
    header = json.loads(raw[:cut].decode("utf-8"))
    data = np.frombuffer(raw[cut + 1:], dtype="<f8").astype(float)
    return header, data


def write_snapshot(path, positions, t, epsilon, box, extra=None):
    """Particle snapshot: header {t, N, d, epsilon, box} + positions."""
    positions = np.asarray(positions, dtype=float)
    header = {"kind": "particles", "t": float(t), "N": int(positions.shape[0]),
              "d": int(positions.shape[1]), "epsilon": epsilon, "box": float(box)}
    header.update(extra or {})
    return write_blob(path, header, [positions])


def write_density_snapshot(path, values, t, epsilon, box):
    values = np.asarray(values, dtype=float)
    header = {"kind": "density", "t": float(t), "n": int(values.shape[0]),
              "d": int(values.ndim), "epsilon": epsilon, "box": float(box)}
    return write_blob(path, header, [values])


def read_snapshot(path):
    header, data = read_blob(path)
    if header["kind"] == "particles":
        return header, data.reshape(header["N"], header["d"])
    return header, data.reshape((header["n"],) * header["d"])
