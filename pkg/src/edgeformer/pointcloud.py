"""Point cloud container, file I/O (xyz / ply / obj) and canonical normalization."""

from __future__ import annotations

import math
import os
import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np

FORMATS = ("xyz", "ply", "obj")


class CloudFormatError(ValueError):
    """Raised when a cloud file cannot be parsed. Carries the offending line number."""

    def __init__(self, message: str, path=None, lineno: int | None = None):
        self.path = None if path is None else str(path)
        self.lineno = lineno
        where = ""
        if self.path is not None:
            where = self.path
        if lineno is not None:
            where = f"{where}:{lineno}" if where else f"line {lineno}"
        super().__init__(f"{where}: {message}" if where else message)


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class PointCloud:
    """N points with optional unit normals and optional binary edge labels.

    Arrays are copied on construction and made read-only.
    """

    points: np.ndarray
    normals: np.ndarray | None = None
    labels: np.ndarray | None = None

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise ValueError(f"points must have shape (N, 3), got {pts.shape}")
        if pts.shape[0] < 1:
            raise ValueError("a point cloud needs at least one point")
        if not np.all(np.isfinite(pts)):
            raise ValueError("point coordinates must be finite")
        object.__setattr__(self, "points", _frozen(pts))
        if self.normals is not None:
            nrm = np.asarray(self.normals, dtype=np.float64)
            if nrm.shape != pts.shape:
                raise ValueError(f"normals shape {nrm.shape} does not match points {pts.shape}")
            object.__setattr__(self, "normals", _frozen(nrm))
        if self.labels is not None:
            lab = np.asarray(self.labels)
            if lab.shape != (pts.shape[0],):
                raise ValueError(f"labels shape {lab.shape} does not match N={pts.shape[0]}")
            if lab.size and not np.all((lab == 0) | (lab == 1)):
                raise ValueError("labels must be binary")
            object.__setattr__(self, "labels", _frozen(lab.astype(np.uint8)))

    def __len__(self) -> int:
        return self.points.shape[0]

    @property
    def n(self) -> int:
        return self.points.shape[0]

    def with_normals(self, normals) -> "PointCloud":
        return PointCloud(self.points, normals, self.labels)

    def with_labels(self, labels) -> "PointCloud":
        return PointCloud(self.points, self.normals, labels)

    def subset(self, indices) -> "PointCloud":
        idx = np.asarray(indices, dtype=np.int64)
        return PointCloud(
            self.points[idx],
            None if self.normals is None else self.normals[idx],
            None if self.labels is None else self.labels[idx],
        )

    def edge_indices(self) -> np.ndarray:
        if self.labels is None:
            raise ValueError("cloud carries no labels")
        return np.flatnonzero(self.labels)


@dataclass(frozen=True)
class NormalizationTransform:
    center: tuple[float, float, float]
    scale: float

    def __post_init__(self):
        if not self.scale > 0:
            raise ValueError("scale must be positive")

    def apply(self, points: np.ndarray) -> np.ndarray:
        return (np.asarray(points, dtype=np.float64) - np.asarray(self.center)) / self.scale

    def invert(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points, dtype=np.float64) * self.scale + np.asarray(self.center)

    def to_dict(self) -> dict:
        return {"center": list(self.center), "scale": self.scale}


def normalize_points(points: np.ndarray) -> tuple[np.ndarray, NormalizationTransform]:
    pts = np.asarray(points, dtype=np.float64)
    center = pts.mean(axis=0)
    shifted = pts - center
    radius = float(np.sqrt((shifted**2).sum(axis=1)).max())
    # coincident points leave only rounding residue in `radius`
    if radius <= 1e-12 * max(1.0, float(np.abs(center).max())):
        radius = 1.0
    out = shifted / radius
    return out, NormalizationTransform(tuple(float(c) for c in center), radius)


def normalize_cloud(cloud: PointCloud) -> tuple[PointCloud, NormalizationTransform]:
    """Center on the centroid and scale so the farthest point sits at radius 1."""
    pts, tf = normalize_points(cloud.points)
    return PointCloud(pts, cloud.normals, cloud.labels), tf


# ---------------------------------------------------------------- labels sidecar


def read_label_indices(path) -> np.ndarray:
    """Read a `.labels` file: one nonnegative integer point index per line."""
    out = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            s = line.strip()
            if not s or s.startswith("#"):
                continue
            try:
                v = int(s)
            except ValueError:
                raise CloudFormatError(f"expected an integer index, got {s!r}", path, lineno) from None
            if v < 0:
                raise CloudFormatError(f"negative index {v}", path, lineno)
            out.append(v)
    return np.asarray(out, dtype=np.int64)


def write_label_indices(path, indices) -> None:
    idx = np.asarray(indices, dtype=np.int64)
    with open(path, "w", encoding="utf-8") as fh:
        for v in idx:
            fh.write(f"{int(v)}\n")


def labels_from_indices(indices, n: int) -> np.ndarray:
    idx = np.asarray(indices, dtype=np.int64)
    if idx.size and (idx.max() >= n or idx.min() < 0):
        raise ValueError(f"label index out of range for N={n}")
    mask = np.zeros(n, dtype=np.uint8)
    mask[idx] = 1
    return mask


def sidecar_path(path) -> Path:
    return Path(path).with_suffix(".labels")


# ---------------------------------------------------------------- readers


def _parse_floats(tokens, path, lineno):
    try:
        vals = [float(t) for t in tokens]
    except ValueError:
        bad = next(t for t in tokens if not _is_float(t))
        raise CloudFormatError(f"cannot parse coordinate {bad!r}", path, lineno) from None
    if not all(math.isfinite(v) for v in vals):
        raise CloudFormatError("non-finite coordinate", path, lineno)
    return vals


def _is_float(t):
    try:
        float(t)
        return True
    except ValueError:
        return False


def _read_xyz(path):
    pts, nrm = [], []
    ncols = None
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            s = line.strip()
            if not s or s.startswith("#"):
                continue
            tokens = s.replace(",", " ").split()
            if len(tokens) not in (3, 6):
                raise CloudFormatError(f"expected 3 or 6 columns, got {len(tokens)}", path, lineno)
            if ncols is None:
                ncols = len(tokens)
            elif len(tokens) != ncols:
                raise CloudFormatError(f"column count changed from {ncols} to {len(tokens)}", path, lineno)
            vals = _parse_floats(tokens, path, lineno)
            pts.append(vals[:3])
            if ncols == 6:
                nrm.append(vals[3:])
    if not pts:
        raise CloudFormatError("empty file", path)
    return np.array(pts), (np.array(nrm) if nrm else None)


def read_obj(path):
    """Return (vertices, faces) from an OBJ file; faces are triangulated as fans, 0-based."""
    verts, faces = [], []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            s = line.strip()
            if not s or s.startswith("#"):
                continue
            head, _, rest = s.partition(" ")
            if head == "v":
                tokens = rest.split()
                if len(tokens) < 3:
                    raise CloudFormatError("vertex needs 3 coordinates", path, lineno)
                # extra columns (w or vertex colors) are ignored
                verts.append(_parse_floats(tokens[:3], path, lineno))
            elif head == "f":
                idx = []
                for tok in rest.split():
                    try:
                        v = int(tok.split("/")[0])
                    except ValueError:
                        raise CloudFormatError(f"bad face index {tok!r}", path, lineno) from None
                    if v == 0:
                        raise CloudFormatError("OBJ indices are 1-based", path, lineno)
                    idx.append(v - 1 if v > 0 else len(verts) + v)
                if len(idx) < 3:
                    raise CloudFormatError("face needs at least 3 vertices", path, lineno)
                for a, b in zip(idx[1:-1], idx[2:]):
                    faces.append((idx[0], a, b))
    if not verts:
        raise CloudFormatError("no vertices", path)
    v = np.array(verts)
    f = np.array(faces, dtype=np.int64).reshape(-1, 3)
    if f.size and (f.min() < 0 or f.max() >= len(v)):
        raise CloudFormatError("face references a missing vertex", path)
    return v, f


_PLY_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2", "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}


def _read_ply(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    if not raw:
        raise CloudFormatError("empty file", path)
    end = re.search(rb"end_header\r?\n", raw)
    if not raw.startswith(b"ply") or end is None:
        raise CloudFormatError("missing ply header", path, 1)
    header = raw[: end.start()].decode("ascii", errors="replace").splitlines()
    body = raw[end.end():]
    fmt = None
    elements = []  # (name, count, [(prop, dtype) | (prop, ('list', count_t, item_t))])
    for lineno, line in enumerate(header, 1):
        parts = line.split()
        if not parts or parts[0] in ("ply", "comment", "obj_info"):
            continue
        if parts[0] == "format":
            fmt = parts[1]
        elif parts[0] == "element":
            elements.append((parts[1], int(parts[2]), []))
        elif parts[0] == "property":
            if not elements:
                raise CloudFormatError("property before element", path, lineno)
            if parts[1] == "list":
                elements[-1][2].append((parts[4], ("list", _PLY_TYPES[parts[2]], _PLY_TYPES[parts[3]])))
            else:
                if parts[1] not in _PLY_TYPES:
                    raise CloudFormatError(f"unknown type {parts[1]}", path, lineno)
                elements[-1][2].append((parts[2], _PLY_TYPES[parts[1]]))
    if fmt not in ("ascii", "binary_little_endian"):
        raise CloudFormatError(f"unsupported ply format {fmt}", path)
    header_lines = len(header) + 1

    vertex = None
    if fmt == "ascii":
        lines = body.decode("ascii", errors="replace").splitlines()
        pos = 0
        for name, count, props in elements:
            rows = lines[pos: pos + count]
            if len(rows) < count:
                raise CloudFormatError(f"expected {count} {name} rows", path, header_lines + pos + len(rows) + 1)
            if name == "vertex":
                names = [p for p, _ in props]
                table = []
                for i, row in enumerate(rows):
                    tokens = row.split()
                    if len(tokens) < len(names):
                        raise CloudFormatError("short vertex row", path, header_lines + pos + i + 1)
                    table.append(_parse_floats(tokens[: len(names)], path, header_lines + pos + i + 1))
                vertex = {n: np.array([r[j] for r in table]) for j, n in enumerate(names)}
            pos += count
    else:
        offset = 0
        for name, count, props in elements:
            if all(not isinstance(t, tuple) for _, t in props):
                dt = np.dtype([(p, "<" + t) for p, t in props])
                arr = np.frombuffer(body, dtype=dt, count=count, offset=offset)
                offset += dt.itemsize * count
                if name == "vertex":
                    vertex = {p: arr[p].astype(np.float64) for p, _ in props}
            else:
                if name == "vertex":
                    raise CloudFormatError("list properties on vertex are unsupported", path)
                for _ in range(count):
                    for _, t in props:
                        if isinstance(t, tuple):
                            ct = np.dtype("<" + t[1])
                            c = int(np.frombuffer(body, ct, 1, offset)[0])
                            offset += ct.itemsize + c * np.dtype("<" + t[2]).itemsize
                        else:
                            offset += np.dtype(t).itemsize
            if vertex is not None:
                break
    if vertex is None or not all(k in vertex for k in "xyz"):
        raise CloudFormatError("no vertex element with x, y, z", path)
    pts = np.stack([vertex["x"], vertex["y"], vertex["z"]], axis=1)
    if len(pts) == 0:
        raise CloudFormatError("empty vertex element", path)
    if not np.all(np.isfinite(pts)):
        raise CloudFormatError("non-finite coordinate", path)
    nrm = None
    if all(k in vertex for k in ("nx", "ny", "nz")):
        nrm = np.stack([vertex["nx"], vertex["ny"], vertex["nz"]], axis=1)
    return pts, nrm


def _unit_or_none(nrm):
    if nrm is None:
        return None
    norms = np.linalg.norm(nrm, axis=1, keepdims=True)
    if np.any(norms == 0):
        return None
    return nrm / norms


def load_cloud(path, format: str | None = None, labels_path=None) -> PointCloud:
    """Load a cloud. `format` defaults to the file extension.

    Normals stored in the file are rescaled to unit length. Labels are only read
    from an explicitly given `.labels` sidecar.
    """
    path = Path(path)
    fmt = (format or path.suffix.lstrip(".")).lower()
    if fmt not in FORMATS:
        raise ValueError(f"unsupported format {fmt!r}; expected one of {FORMATS}")
    if not path.exists():
        raise FileNotFoundError(path)
    if os.path.getsize(path) == 0:
        raise CloudFormatError("empty file", path)
    if fmt == "xyz":
        pts, nrm = _read_xyz(path)
    elif fmt == "ply":
        pts, nrm = _read_ply(path)
    else:
        pts, _ = read_obj(path)
        nrm = None
    labels = None
    if labels_path is not None:
        labels = labels_from_indices(read_label_indices(labels_path), len(pts))
    return PointCloud(pts, _unit_or_none(nrm), labels)


def save_cloud(cloud: PointCloud, path, format: str | None = None, binary: bool = False) -> None:
    """Write positions (and normals) as xyz or ply; labels go to a `.labels` sidecar."""
    path = Path(path)
    fmt = (format or path.suffix.lstrip(".")).lower()
    has_n = cloud.normals is not None
    data = cloud.points if not has_n else np.hstack([cloud.points, cloud.normals])
    if fmt == "xyz":
        with open(path, "w", encoding="utf-8") as fh:
            for row in data:
                fh.write(" ".join(repr(float(v)) for v in row) + "\n")
    elif fmt == "ply":
        props = ["x", "y", "z"] + (["nx", "ny", "nz"] if has_n else [])
        kind = "binary_little_endian" if binary else "ascii"
        header = ["ply", f"format {kind} 1.0", f"element vertex {cloud.n}"]
        header += [f"property double {p}" for p in props]
        header.append("end_header")
        with open(path, "wb") as fh:
            fh.write(("\n".join(header) + "\n").encode("ascii"))
            if binary:
                fh.write(np.ascontiguousarray(data, dtype="<f8").tobytes())
            else:
                for row in data:
                    fh.write((" ".join(repr(float(v)) for v in row) + "\n").encode("ascii"))
    else:
        raise ValueError(f"cannot save format {fmt!r}")
    if cloud.labels is not None:
        write_label_indices(sidecar_path(path), cloud.edge_indices())
