"""File output helpers: CSV time series, JSONL operator trajectories, JSON
reports, and the raw binary trajectory dump.

All writers are deterministic for fixed inputs (repr-based float formatting,
sorted JSON keys), so reruns of a seeded experiment produce byte-identical
data files.
"""

from __future__ import annotations

import csv
import json
import struct
from pathlib import Path

import numpy as np


def _to_jsonable(obj):
    if isinstance(obj, dict):
        return {k: _to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_to_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        if np.iscomplexobj(obj):
            return {"re": obj.real.tolist(), "im": obj.imag.tolist()}
        return obj.tolist()
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, complex):
        return {"re": obj.real, "im": obj.imag}
    if isinstance(obj, float) and not np.isfinite(obj):
        return repr(obj)
    return obj


def write_json(path, payload) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        json.dump(_to_jsonable(payload), fh, indent=2, sort_keys=True,
                  allow_nan=True)
        fh.write("\n")
    return path


def write_csv(path, header, rows) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow([repr(v) if isinstance(v, float) else v for v in row])
    return path


def write_pure_trajectory_csv(path, traj, stride: int = 1) -> Path:
    """Columns t, re/im per component, norm_sq, optionally downsampled."""
    m = traj.states.shape[1]
    header = ["t"]
    for k in range(m):
        header += [f"re_{k}", f"im_{k}"]
    header.append("norm_sq")
    rows = []
    for i in range(0, len(traj.times), stride):
        row = [float(traj.times[i])]
        for k in range(m):
            row += [float(traj.states[i, k].real), float(traj.states[i, k].imag)]
        row.append(float(traj.norm_sq.values[i]))
        rows.append(row)
    return write_csv(path, header, rows)


def write_density_jsonl(path, traj, stride: int = 1) -> Path:
    """One record per recorded time: t, upper-triangle re/im, trace, min_eig."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    m = traj.matrices.shape[1]
    iu = np.triu_indices(m)
    min_eigs = traj.min_eigenvalues()
    with open(path, "w") as fh:
        for i in range(0, len(traj.times), stride):
            mat = traj.matrices[i]
            record = {
                "t": float(traj.times[i]),
                "re": mat[iu].real.tolist(),
                "im": mat[iu].imag.tolist(),
                "trace": float(np.real(np.trace(mat))),
                "min_eig": float(min_eigs[i]),
            }
            fh.write(json.dumps(record, sort_keys=True) + "\n")
    return path


def dump_trajectory_binary(path, times, states) -> Path:
    """Grid header + little-endian complex64 rows (one row per time)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    states = np.asarray(states, dtype=np.complex64)
    flat = states.reshape(len(times), -1)
    with open(path, "wb") as fh:
        fh.write(b"QSFTRAJ1")
        fh.write(struct.pack("<qq", len(times), flat.shape[1]))
        fh.write(np.asarray(times, dtype="<f8").tobytes())
        fh.write(flat.astype("<c8").tobytes())
    return path


def load_trajectory_binary(path):
    with open(path, "rb") as fh:
        magic = fh.read(8)
        if magic != b"QSFTRAJ1":
            raise ValueError("not a trajectory dump")
        n_times, width = struct.unpack("<qq", fh.read(16))
        times = np.frombuffer(fh.read(8 * n_times), dtype="<f8")
        flat = np.frombuffer(fh.read(8 * n_times * width), dtype="<c8")
    return times, flat.reshape(n_times, width)
