"""Point-cloud, keypoint and matrix file formats.

Text clouds hold one point per line, ``x y z [nx ny nz] [id]``, with ``#``
comments. PLY files are written as binary little-endian and read in either
binary little-endian or ASCII form.
"""

from __future__ import annotations

import os
import struct
from pathlib import Path

import numpy as np

from .geometry import PointCloud

TEXT_SUFFIXES = {".xyz", ".txt", ".pts"}


class CloudFormatError(ValueError):
    pass


def _fmt(v: float) -> str:
    return format(float(v), ".9g")


def _parse_id(token: str, where: str) -> int:
    try:
        val = float(token)
    except ValueError:
        raise CloudFormatError(f"{where}: id {token!r} is not a number") from None
    if not np.isfinite(val) or val != int(val):
        raise CloudFormatError(f"{where}: id {token!r} is not an integer")
    return int(val)


def read_text_cloud(path) -> PointCloud:
    path = Path(path)
    rows, ids, width = [], [], None
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            body = line.split("#", 1)[0].strip()
            if not body:
                continue
            tokens = body.split()
            where = f"{path}:{lineno}"
            if len(tokens) not in (3, 4, 6, 7):
                raise CloudFormatError(f"{where}: expected 3, 4, 6 or 7 columns, got {len(tokens)}")
            if width is None:
                width = len(tokens)
            elif len(tokens) != width:
                raise CloudFormatError(f"{where}: expected {width} columns like the first row, got {len(tokens)}")
            n_float = 6 if width >= 6 else 3
            try:
                vals = [float(t) for t in tokens[:n_float]]
            except ValueError:
                raise CloudFormatError(f"{where}: malformed number") from None
            if not all(np.isfinite(vals)):
                raise CloudFormatError(f"{where}: non-finite coordinate")
            rows.append(vals)
            if width in (4, 7):
                ids.append(_parse_id(tokens[-1], where))
    if not rows:
        raise CloudFormatError(f"{path}: no points")
    arr = np.array(rows)
    normals = None
    if width >= 6:
        normals = arr[:, 3:6]
        lengths = np.linalg.norm(normals, axis=1, keepdims=True)
        if np.any(lengths == 0):
            bad = int(np.nonzero(lengths[:, 0] == 0)[0][0])
            raise CloudFormatError(f"{path}: zero-length normal at point {bad}")
        normals = normals / lengths
    return PointCloud(arr[:, :3], normals, np.array(ids) if ids else None)


def write_text_cloud(cloud: PointCloud, path) -> None:
    lines = []
    for i in range(len(cloud)):
        vals = [_fmt(v) for v in cloud.points[i]]
        if cloud.normals is not None:
            vals += [_fmt(v) for v in cloud.normals[i]]
        if cloud.ids is not None:
            vals.append(str(int(cloud.ids[i])))
        lines.append(" ".join(vals))
    Path(path).write_text("\n".join(lines) + "\n")


_PLY_TYPES = {
    "char": "b", "int8": "b", "uchar": "B", "uint8": "B",
    "short": "h", "int16": "h", "ushort": "H", "uint16": "H",
    "int": "i", "int32": "i", "uint": "I", "uint32": "I",
    "float": "f", "float32": "f", "double": "d", "float64": "d",
}


def write_ply(cloud: PointCloud, path, colors: np.ndarray | None = None) -> None:
    n = len(cloud)
    props = [("double", "x"), ("double", "y"), ("double", "z")]
    cols = [cloud.points]
    if cloud.normals is not None:
        props += [("double", "nx"), ("double", "ny"), ("double", "nz")]
        cols.append(cloud.normals)
    header = ["ply", "format binary_little_endian 1.0", f"element vertex {n}"]
    header += [f"property {t} {name}" for t, name in props]
    fields = "<" + "d" * sum(c.shape[1] for c in cols)
    if cloud.ids is not None:
        header.append("property int id")
        fields += "i"
    if colors is not None:
        colors = np.asarray(colors, dtype=np.uint8)
        if colors.shape != (n, 3):
            raise ValueError(f"colors must have shape ({n}, 3)")
        header += ["property uchar red", "property uchar green", "property uchar blue"]
        fields += "BBB"
    header.append("end_header")
    floats = np.concatenate(cols, axis=1)
    packer = struct.Struct(fields)
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        for i in range(n):
            row = list(floats[i])
            if cloud.ids is not None:
                row.append(int(cloud.ids[i]))
            if colors is not None:
                row += [int(c) for c in colors[i]]
            fh.write(packer.pack(*row))


def read_ply(path, return_colors=False):
    with open(path, "rb") as fh:
        if fh.readline().strip() != b"ply":
            raise CloudFormatError(f"{path}: missing 'ply' magic")
        fmt, n, props, in_vertex = None, None, [], False
        while True:
            line = fh.readline()
            if not line:
                raise CloudFormatError(f"{path}: header not terminated")
            tokens = line.decode("ascii", "replace").split()
            if not tokens or tokens[0] in ("comment", "obj_info"):
                continue
            if tokens[0] == "end_header":
                break
            if tokens[0] == "format":
                fmt = tokens[1]
            elif tokens[0] == "element":
                in_vertex = tokens[1] == "vertex"
                if in_vertex:
                    n = int(tokens[2])
            elif tokens[0] == "property" and in_vertex:
                if tokens[1] == "list":
                    raise CloudFormatError(f"{path}: list properties on vertices are not supported")
                if tokens[1] not in _PLY_TYPES:
                    raise CloudFormatError(f"{path}: unknown property type {tokens[1]}")
                props.append((tokens[2], _PLY_TYPES[tokens[1]]))
        if n is None:
            raise CloudFormatError(f"{path}: no vertex element")
        names = [p[0] for p in props]
        if fmt == "binary_little_endian":
            packer = struct.Struct("<" + "".join(p[1] for p in props))
            blob = fh.read(packer.size * n)
            if len(blob) < packer.size * n:
                raise CloudFormatError(f"{path}: truncated vertex data")
            data = np.array(list(packer.iter_unpack(blob)), dtype=np.float64).reshape(n, len(props))
        elif fmt == "ascii":
            rows = []
            for i in range(n):
                line = fh.readline().decode("ascii").split()
                if len(line) < len(props):
                    raise CloudFormatError(f"{path}: vertex {i} has {len(line)} values, expected {len(props)}")
                rows.append([float(t) for t in line[: len(props)]])
            data = np.array(rows, dtype=np.float64).reshape(n, len(props))
        else:
            raise CloudFormatError(f"{path}: unsupported PLY format {fmt}")
    if not np.isfinite(data).all():
        raise CloudFormatError(f"{path}: non-finite vertex data")
    col = {name: data[:, i] for i, name in enumerate(names)}
    try:
        pts = np.stack([col["x"], col["y"], col["z"]], axis=1)
    except KeyError:
        raise CloudFormatError(f"{path}: vertex element lacks x/y/z") from None
    normals = None
    if all(k in col for k in ("nx", "ny", "nz")):
        normals = np.stack([col["nx"], col["ny"], col["nz"]], axis=1)
        normals = normals / np.linalg.norm(normals, axis=1, keepdims=True)
    ids = col["id"].astype(np.int64) if "id" in col else None
    cloud = PointCloud(pts, normals, ids)
    if return_colors:
        colors = None
        if all(k in col for k in ("red", "green", "blue")):
            colors = np.stack([col["red"], col["green"], col["blue"]], axis=1).astype(np.uint8)
        return cloud, colors
    return cloud


def load_cloud(path) -> PointCloud:
    suffix = Path(path).suffix.lower()
    if suffix == ".ply":
        return read_ply(path)
    if suffix in TEXT_SUFFIXES:
        return read_text_cloud(path)
    raise CloudFormatError(f"{path}: unsupported extension {suffix!r}")


def save_cloud(cloud: PointCloud, path) -> None:
    suffix = Path(path).suffix.lower()
    if suffix == ".ply":
        write_ply(cloud, path)
    elif suffix in TEXT_SUFFIXES:
        write_text_cloud(cloud, path)
    else:
        raise CloudFormatError(f"{path}: unsupported extension {suffix!r}")


def read_keypoints(path):
    """Return (labels, positions) from a ``label x y z`` file."""
    labels, pos = [], []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            body = line.split("#", 1)[0].strip()
            if not body:
                continue
            tokens = body.split()
            if len(tokens) != 4:
                raise CloudFormatError(f"{path}:{lineno}: expected 'label x y z'")
            try:
                xyz = [float(t) for t in tokens[1:]]
            except ValueError:
                raise CloudFormatError(f"{path}:{lineno}: malformed number") from None
            if not all(np.isfinite(xyz)):
                raise CloudFormatError(f"{path}:{lineno}: non-finite coordinate")
            labels.append(tokens[0])
            pos.append(xyz)
    return labels, np.array(pos, dtype=np.float64).reshape(-1, 3)


def write_keypoints(labels, positions, path) -> None:
    lines = [f"{lab} " + " ".join(_fmt(v) for v in p) for lab, p in zip(labels, positions)]
    Path(path).write_text("\n".join(lines) + "\n")


def read_matrix(path) -> np.ndarray:
    try:
        m = np.loadtxt(path, comments="#", ndmin=2)
    except ValueError as exc:
        raise CloudFormatError(f"{path}: {exc}") from None
    if not np.isfinite(m).all():
        raise CloudFormatError(f"{path}: non-finite matrix entry")
    return m


def write_matrix(m, path) -> None:
    np.savetxt(path, np.asarray(m), fmt="%.12g")


def ensure_dir(path) -> Path:
    path = Path(path)
    os.makedirs(path, exist_ok=True)
    return path
