"""File formats: binary little-endian PLY clouds, OBJ meshes, JSON-lines grasps."""
from __future__ import annotations

import json
from pathlib import Path
from typing import Iterable, Optional

import numpy as np

from .geometry import PointCloud, TriangleMesh

_PLY_TYPES = {
    "float": "<f4", "float32": "<f4", "double": "<f8", "float64": "<f8",
    "int": "<i4", "int32": "<i4", "uint": "<u4", "uint32": "<u4",
    "uchar": "u1", "uint8": "u1", "char": "i1", "int8": "i1",
    "short": "<i2", "int16": "<i2", "ushort": "<u2", "uint16": "<u2",
}


def write_ply(path, cloud: PointCloud, segments: Optional[np.ndarray] = None) -> None:
    """Write x,y,z (and nx,ny,nz / label when present) as float32 binary PLY.

    ``segments`` (``(M, 2)`` vertex indices) adds an ``edge`` element, used for
    gripper marker geometry.
    """
    pts = np.asarray(cloud.points, dtype="<f4")
    fields = [("x", "<f4"), ("y", "<f4"), ("z", "<f4")]
    if cloud.normals is not None:
        fields += [("nx", "<f4"), ("ny", "<f4"), ("nz", "<f4")]
    if cloud.labels is not None:
        fields += [("label", "<i4")]
    rec = np.zeros(len(pts), dtype=fields)
    rec["x"], rec["y"], rec["z"] = pts[:, 0], pts[:, 1], pts[:, 2]
    if cloud.normals is not None:
        n = np.asarray(cloud.normals, dtype="<f4")
        rec["nx"], rec["ny"], rec["nz"] = n[:, 0], n[:, 1], n[:, 2]
    if cloud.labels is not None:
        rec["label"] = cloud.labels
    names = {"<f4": "float", "<i4": "int"}
    header = ["ply", "format binary_little_endian 1.0", f"element vertex {len(pts)}"]
    header += [f"property {names[t]} {name}" for name, t in fields]
    if segments is not None:
        header += [f"element edge {len(segments)}", "property int vertex1", "property int vertex2"]
    header.append("end_header")
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        fh.write(rec.tobytes())
        if segments is not None:
            fh.write(np.asarray(segments, dtype="<i4").tobytes())


def read_ply(path) -> PointCloud:
    data = Path(path).read_bytes()
    end = data.find(b"end_header\n")
    if not data.startswith(b"ply") or end < 0:
        raise ValueError(f"{path}: not a PLY file")
    lines = data[:end].decode("ascii").splitlines()
    if "format binary_little_endian 1.0" not in lines:
        raise ValueError(f"{path}: only binary little-endian PLY is supported")
    count, fields, in_vertex = 0, [], False
    for line in lines:
        tok = line.split()
        if tok[:1] == ["element"]:
            in_vertex = tok[1] == "vertex"
            if in_vertex:
                count = int(tok[2])
        elif tok[:1] == ["property"] and in_vertex:
            if tok[1] == "list":
                raise ValueError(f"{path}: list properties on vertices are not supported")
            fields.append((tok[2], _PLY_TYPES[tok[1]]))
    dtype = np.dtype(fields)
    body = data[end + len(b"end_header\n"):]
    if len(body) < count * dtype.itemsize:
        raise ValueError(f"{path}: truncated vertex data")
    rec = np.frombuffer(body, dtype=dtype, count=count)
    names = rec.dtype.names
    pts = np.stack([rec["x"], rec["y"], rec["z"]], axis=1).astype(float)
    normals = labels = None
    if {"nx", "ny", "nz"} <= set(names):
        normals = np.stack([rec["nx"], rec["ny"], rec["nz"]], axis=1).astype(float)
    if "label" in names:
        labels = rec["label"].astype(np.int64)
    return PointCloud(pts, normals, labels)


def read_obj(path) -> TriangleMesh:
    verts, faces = [], []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        tok = line.split()
        if not tok or tok[0].startswith("#"):
            continue
        if tok[0] == "v":
            verts.append([float(x) for x in tok[1:4]])
        elif tok[0] == "f":
            if len(tok) != 4:
                raise ValueError(f"{path}:{lineno}: only triangular faces are supported")
            idx = []
            for t in tok[1:]:
                i = int(t.split("/")[0])
                idx.append(i - 1 if i > 0 else len(verts) + i)
            faces.append(idx)
    return TriangleMesh(np.array(verts, dtype=float).reshape(-1, 3),
                        np.array(faces, dtype=np.int64).reshape(-1, 3))


def write_obj(path, mesh: TriangleMesh) -> None:
    with open(path, "w") as fh:
        for v in mesh.vertices:
            fh.write(f"v {v[0]:.9g} {v[1]:.9g} {v[2]:.9g}\n")
        for f in mesh.triangles:
            fh.write(f"f {f[0] + 1} {f[1] + 1} {f[2] + 1}\n")


def write_jsonl(path, records: Iterable[dict]) -> None:
    with open(path, "w") as fh:
        for r in records:
            fh.write(json.dumps(r, sort_keys=True) + "\n")


def read_jsonl(path) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]
