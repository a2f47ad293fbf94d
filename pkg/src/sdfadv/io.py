"""Point-cloud files: PLY (ascii or binary little-endian) and a CSV fallback.

Both formats carry ``x, y, z`` (float64) and ``sensor_id`` (int32) per point.
Sensor origins live in a JSON sidecar next to the cloud (``<stem>.sensors.json``).
"""

from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np

from sdfadv.render import Scene

FORMAT_VERSION = "1"

_PLY_DTYPE = np.dtype([("x", "<f8"), ("y", "<f8"), ("z", "<f8"), ("sensor_id", "<i4")])
_PLY_TYPES = {"double": "f8", "float64": "f8", "float": "f4", "float32": "f4",
              "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
              "short": "i2", "int16": "i2", "ushort": "u2", "uint16": "u2",
              "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1"}


def sensors_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.stem + ".sensors.json")


def write_ply(path, points, sensor_index, binary: bool = True) -> None:
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    rec = np.empty(len(pts), dtype=_PLY_DTYPE)
    rec["x"], rec["y"], rec["z"] = pts.T
    rec["sensor_id"] = np.asarray(sensor_index, dtype=np.int32)
    header = "\n".join([
        "ply",
        f"format {'binary_little_endian' if binary else 'ascii'} 1.0",
        f"element vertex {len(pts)}",
        "property double x", "property double y", "property double z",
        "property int sensor_id",
        "end_header",
    ]) + "\n"
    with open(path, "wb") as f:
        f.write(header.encode("ascii"))
        if binary:
            f.write(rec.tobytes())
        else:
            for x, y, z, s in rec:
                f.write(f"{float(x)!r} {float(y)!r} {float(z)!r} {int(s)}\n".encode("ascii"))


def read_ply(path) -> tuple[np.ndarray, np.ndarray]:
    """Return (points (N, 3) float64, sensor_index (N,) int64)."""
    with open(path, "rb") as f:
        if f.readline().strip() != b"ply":
            raise ValueError(f"{path}: not a PLY file")
        fmt, n, props, in_vertex = None, None, [], False
        while True:
            line = f.readline()
            if not line:
                raise ValueError(f"{path}: truncated header")
            tok = line.decode("ascii").split()
            if not tok or tok[0] == "comment":
                continue
            if tok[0] == "format":
                fmt = tok[1]
            elif tok[0] == "element":
                in_vertex = tok[1] == "vertex"
                if in_vertex:
                    n = int(tok[2])
            elif tok[0] == "property" and in_vertex:
                if tok[1] == "list":
                    raise ValueError(f"{path}: list properties are not supported on vertices")
                props.append((tok[2], _PLY_TYPES[tok[1]]))
            elif tok[0] == "end_header":
                break
        if n is None:
            raise ValueError(f"{path}: no vertex element")
        names = [p[0] for p in props]
        for required in ("x", "y", "z"):
            if required not in names:
                raise ValueError(f"{path}: missing vertex property {required!r}")
        if fmt == "ascii":
            data = np.loadtxt(f, ndmin=2, max_rows=n) if n else np.empty((0, len(props)))
            cols = {name: data[:, i] for i, name in enumerate(names)}
        elif fmt == "binary_little_endian":
            dt = np.dtype([(name, "<" + t) for name, t in props])
            rec = np.frombuffer(f.read(dt.itemsize * n), dtype=dt, count=n)
            cols = {name: rec[name] for name in names}
        else:
            raise ValueError(f"{path}: unsupported PLY format {fmt!r}")
    pts = np.stack([cols["x"], cols["y"], cols["z"]], axis=1).astype(float)
    sid = cols.get("sensor_id", np.zeros(n))
    return pts, np.asarray(sid, dtype=np.int64)


def write_csv(path, points, sensor_index) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["x", "y", "z", "sensor_id"])
        for (x, y, z), s in zip(np.asarray(points, dtype=float), np.asarray(sensor_index)):
            w.writerow([repr(float(x)), repr(float(y)), repr(float(z)), int(s)])


def read_csv(path) -> tuple[np.ndarray, np.ndarray]:
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return data[:, :3].astype(float), data[:, 3].astype(np.int64)


def write_sensors(path, sensors) -> None:
    payload = {"format_version": FORMAT_VERSION,
               "sensors": [[float(v) for v in s] for s in np.asarray(sensors, dtype=float).reshape(-1, 3)]}
    Path(path).write_text(json.dumps(payload, indent=2) + "\n")


def read_sensors(path) -> np.ndarray:
    return np.asarray(json.loads(Path(path).read_text())["sensors"], dtype=float).reshape(-1, 3)


def save_scene(scene: Scene, path, binary: bool = True) -> None:
    """Write the cloud (format chosen by suffix: .ply or .csv) and its sensor sidecar."""
    path = Path(path)
    if path.suffix.lower() == ".csv":
        write_csv(path, scene.points, scene.sensor_index)
    else:
        write_ply(path, scene.points, scene.sensor_index, binary=binary)
    write_sensors(sensors_path(path), scene.sensors)


def load_scene(path) -> Scene:
    path = Path(path)
    pts, sid = read_csv(path) if path.suffix.lower() == ".csv" else read_ply(path)
    return Scene(points=pts, sensors=read_sensors(sensors_path(path)), sensor_index=sid)
