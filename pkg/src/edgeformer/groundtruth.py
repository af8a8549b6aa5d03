"""Edge ground truth: ABC feature-curve files and analytic synthetic shapes."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import yaml

from .pointcloud import PointCloud, labels_from_indices, read_label_indices, write_label_indices

try:
    _Loader = yaml.CSafeLoader
except AttributeError:  # pragma: no cover - pure-python PyYAML
    _Loader = yaml.SafeLoader

CURVE_TYPES = ("line", "circle", "ellipse", "bspline", "other")
SHAPE_KINDS = ("cube", "cylinder", "wedge", "fused_boxes")


class FeatureFileError(ValueError):
    """Malformed feature YAML; `line`/`column` are 1-based when known."""

    def __init__(self, message, path=None, line=None, column=None):
        self.path, self.line, self.column = (None if path is None else str(path)), line, column
        where = self.path or "<yaml>"
        if line is not None:
            where += f":{line}" + (f":{column}" if column is not None else "")
        super().__init__(f"{where}: {message}")


class InconsistentPairingError(ValueError):
    def __init__(self, path, index, n_vertices):
        self.path, self.index, self.n_vertices = str(path), int(index), int(n_vertices)
        super().__init__(f"{path}: vertex index {index} out of range for a mesh with {n_vertices} vertices")


@dataclass(frozen=True)
class EdgeLabelSet:
    n: int
    edge_indices: np.ndarray

    def __post_init__(self):
        idx = np.asarray(self.edge_indices, dtype=np.int64)
        if idx.ndim != 1:
            raise ValueError("edge_indices must be one-dimensional")
        if idx.size:
            if np.any(np.diff(idx) <= 0):
                raise ValueError("edge_indices must be sorted ascending without duplicates")
            if idx[0] < 0 or idx[-1] >= self.n:
                raise ValueError(f"edge index out of range for n={self.n}")
        idx.setflags(write=False)
        object.__setattr__(self, "edge_indices", idx)

    def __len__(self):
        return len(self.edge_indices)

    def __eq__(self, other):
        return (isinstance(other, EdgeLabelSet) and self.n == other.n
                and np.array_equal(self.edge_indices, other.edge_indices))

    @classmethod
    def from_indices(cls, n: int, indices) -> "EdgeLabelSet":
        return cls(n, np.unique(np.asarray(indices, dtype=np.int64)))

    @classmethod
    def from_mask(cls, mask) -> "EdgeLabelSet":
        m = np.asarray(mask).astype(bool)
        return cls(len(m), np.flatnonzero(m))

    def to_mask(self) -> np.ndarray:
        return labels_from_indices(self.edge_indices, self.n)

    def save(self, path) -> None:
        write_label_indices(path, self.edge_indices)

    @classmethod
    def load(cls, path, n: int) -> "EdgeLabelSet":
        return cls.from_indices(n, read_label_indices(path))


# ---------------------------------------------------------------- ABC feature files


@dataclass(frozen=True)
class FeatureCurve:
    curve_type: str
    sharp: bool
    vert_indices: tuple


def _load_yaml(path):
    try:
        with open(path, "r", encoding="utf-8") as fh:
            return yaml.load(fh, Loader=_Loader)
    except yaml.MarkedYAMLError as exc:
        mark = exc.problem_mark or exc.context_mark
        msg = exc.problem or str(exc)
        if mark is None:
            raise FeatureFileError(msg, path) from None
        raise FeatureFileError(msg, path, mark.line + 1, mark.column + 1) from None
    except yaml.YAMLError as exc:
        raise FeatureFileError(str(exc), path) from None


def _is_true(v) -> bool:
    return v is True or (isinstance(v, str) and v.strip().lower() == "true")


def read_feature_curves(path) -> list[FeatureCurve]:
    doc = _load_yaml(path)
    if not isinstance(doc, dict) or not isinstance(doc.get("curves"), (list, type(None))):
        raise FeatureFileError("expected a mapping with a 'curves' list", path)
    curves = []
    for i, c in enumerate(doc.get("curves") or []):
        if not isinstance(c, dict):
            raise FeatureFileError(f"curve #{i} is not a mapping", path)
        idx = c.get("vert_indices") or []
        if not isinstance(idx, list) or not all(isinstance(v, int) and v >= 0 for v in idx):
            raise FeatureFileError(f"curve #{i}: vert_indices must be nonnegative integers", path)
        kind = str(c.get("type", "other")).lower()
        curves.append(FeatureCurve(kind if kind in CURVE_TYPES else "other", _is_true(c.get("sharp")), tuple(idx)))
    return curves


def parse_abc_features(yaml_path, n_vertices: int) -> EdgeLabelSet:
    """Union of `vert_indices` over curves flagged `sharp: true`."""
    picked = set()
    for curve in read_feature_curves(yaml_path):
        if curve.sharp:
            picked.update(curve.vert_indices)
    if picked and max(picked) >= n_vertices:
        raise InconsistentPairingError(yaml_path, max(picked), n_vertices)
    return EdgeLabelSet(n_vertices, np.array(sorted(picked), dtype=np.int64))


# ---------------------------------------------------------------- synthetic shapes


@dataclass(frozen=True)
class _Rect:
    origin: np.ndarray
    e1: np.ndarray
    e2: np.ndarray
    normal: np.ndarray

    @property
    def area(self):
        return float(np.linalg.norm(np.cross(self.e1, self.e2)))

    def sample(self, rng, m):
        u = rng.random((m, 2))
        pts = self.origin + u[:, :1] * self.e1 + u[:, 1:] * self.e2
        return pts, np.tile(self.normal, (m, 1))


@dataclass(frozen=True)
class _CylinderSide:
    radius: float
    z0: float
    z1: float

    @property
    def area(self):
        return 2 * math.pi * self.radius * (self.z1 - self.z0)

    def sample(self, rng, m):
        th = rng.random(m) * 2 * math.pi
        z = self.z0 + rng.random(m) * (self.z1 - self.z0)
        n = np.stack([np.cos(th), np.sin(th), np.zeros(m)], axis=1)
        pts = np.stack([self.radius * n[:, 0], self.radius * n[:, 1], z], axis=1)
        return pts, n


@dataclass(frozen=True)
class _Disk:
    radius: float
    z: float
    up: bool

    @property
    def area(self):
        return math.pi * self.radius**2

    def sample(self, rng, m):
        r = self.radius * np.sqrt(rng.random(m))
        th = rng.random(m) * 2 * math.pi
        pts = np.stack([r * np.cos(th), r * np.sin(th), np.full(m, self.z)], axis=1)
        n = np.tile([0.0, 0.0, 1.0 if self.up else -1.0], (m, 1))
        return pts, n


def _segment_distance(p, a, b):
    d = b - a
    t = np.clip(((p - a) @ d) / (d @ d), 0.0, 1.0)
    return np.linalg.norm(p - (a + t[:, None] * d), axis=1)


def _circle_distance(p, z, radius):
    rho = np.hypot(p[:, 0], p[:, 1])
    return np.hypot(rho - radius, p[:, 2] - z)


def _rect(o, e1, e2, n):
    return _Rect(np.asarray(o, float), np.asarray(e1, float), np.asarray(e2, float), np.asarray(n, float))


def _geometry(kind: str, angle_deg: float):
    """(patches, crease distance functions) for a shape kind."""
    if kind == "cube":
        patches, creases = [], []
        h = 0.5
        for ax in range(3):
            a1, a2 = (ax + 1) % 3, (ax + 2) % 3
            for s in (-1.0, 1.0):
                o = np.zeros(3)
                o[ax], o[a1], o[a2] = s * h, -h, -h
                e1, e2, n = np.zeros(3), np.zeros(3), np.zeros(3)
                e1[a1], e2[a2], n[ax] = 2 * h, 2 * h, s
                patches.append(_rect(o, e1, e2, n))
        corners = np.array([[x, y, z] for x in (-h, h) for y in (-h, h) for z in (-h, h)])
        for i in range(8):
            for j in range(i + 1, 8):
                if np.count_nonzero(corners[i] != corners[j]) == 1:
                    a, b = corners[i], corners[j]
                    creases.append(lambda p, a=a, b=b: _segment_distance(p, a, b))
        return patches, creases
    if kind == "cylinder":
        r, h = 0.5, 0.5
        patches = [_CylinderSide(r, -h, h), _Disk(r, -h, False), _Disk(r, h, True)]
        creases = [lambda p, z=z: _circle_distance(p, z, r) for z in (-h, h)]
        return patches, creases
    if kind == "wedge":
        th = math.radians(angle_deg)
        if not 0 < th < math.pi:
            raise ValueError("wedge angle must lie strictly between 0 and 180 degrees")
        y = np.array([0.0, 1.0, 0.0])
        u2 = np.array([math.cos(th), 0.0, math.sin(th)])
        patches = [
            _rect([0, 0, 0], [1, 0, 0], y, [0, 0, -1]),
            _rect([0, 0, 0], u2, y, [-math.sin(th), 0, math.cos(th)]),
        ]
        a, b = np.zeros(3), y.copy()
        return patches, [lambda p: _segment_distance(p, a, b)]
    if kind == "fused_boxes":
        # L-shaped prism: the union of two boxes, with one concave crease
        s, depth = 0.5, 0.5
        poly = s * np.array([[0, 0], [2, 0], [2, 1], [1, 1], [1, 2], [0, 2]], dtype=float)
        poly -= s * np.array([1.0, 1.0])
        patches, creases = [], []
        dy = np.array([0.0, depth, 0.0])
        y0 = -depth / 2
        for i in range(len(poly)):
            pa, pb = poly[i], poly[(i + 1) % len(poly)]
            a = np.array([pa[0], y0, pa[1]])
            b = np.array([pb[0], y0, pb[1]])
            d = pb - pa
            out = np.array([d[1], 0.0, -d[0]]) / np.linalg.norm(d)
            patches.append(_rect(a, b - a, dy, out))
            creases.append(lambda p, a=a, b=b: _segment_distance(p, a, b))
            creases.append(lambda p, a=a + dy, b=b + dy: _segment_distance(p, a, b))
            creases.append(lambda p, a=a, b=a + dy: _segment_distance(p, a, b))
        lo = poly.min(axis=0)
        for yy, ny in ((y0, -1.0), (y0 + depth, 1.0)):
            patches.append(_rect([lo[0], yy, lo[1]], [2 * s, 0, 0], [0, 0, s], [0, ny, 0]))
            patches.append(_rect([lo[0], yy, lo[1] + s], [s, 0, 0], [0, 0, s], [0, ny, 0]))
        return patches, creases
    raise ValueError(f"unknown shape kind {kind!r}; expected one of {SHAPE_KINDS}")


def surface_area(kind: str, angle_deg: float = 90.0) -> float:
    patches, _ = _geometry(kind, angle_deg)
    return sum(p.area for p in patches)


def band_width(points_per_unit_area: float) -> float:
    return 1.5 / math.sqrt(points_per_unit_area)


def crease_distance(kind: str, points: np.ndarray, angle_deg: float = 90.0) -> np.ndarray:
    _, creases = _geometry(kind, angle_deg)
    p = np.asarray(points, dtype=np.float64)
    return np.min(np.stack([c(p) for c in creases]), axis=0)


def _allocate(total: int, areas: list[float]) -> list[int]:
    raw = np.array(areas) / sum(areas) * total
    counts = np.floor(raw).astype(int)
    for i in np.argsort(-(raw - counts), kind="stable")[: total - counts.sum()]:
        counts[i] += 1
    return counts.tolist()


def synth_shape(kind: str, points_per_unit_area: float, seed: int = 0, angle_deg: float = 90.0) -> PointCloud:
    """Uniform surface samples with analytic normals.

    A point is labelled as an edge iff it lies within 1.5 / sqrt(density) of a
    crease curve (cube edges, cylinder rims, the wedge fold, box seams).
    """
    patches, creases = _geometry(kind, angle_deg)
    total = int(round(points_per_unit_area * sum(p.area for p in patches)))
    if total < 200:
        raise ValueError(f"density {points_per_unit_area} gives only {total} points; need at least 200")
    rng = np.random.default_rng(seed)
    pts, nrm = [], []
    for patch, m in zip(patches, _allocate(total, [p.area for p in patches])):
        p, n = patch.sample(rng, m)
        pts.append(p)
        nrm.append(n)
    pts = np.concatenate(pts)
    nrm = np.concatenate(nrm)
    dist = np.min(np.stack([c(pts) for c in creases]), axis=0)
    labels = (dist <= band_width(points_per_unit_area)).astype(np.uint8)
    return PointCloud(pts, nrm, labels)


def synth_shape_n(kind: str, n: int, seed: int = 0, angle_deg: float = 90.0) -> PointCloud:
    """Like `synth_shape`, with the density chosen to give exactly `n` points."""
    return synth_shape(kind, n / surface_area(kind, angle_deg), seed, angle_deg)
