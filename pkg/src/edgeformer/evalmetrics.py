"""Edge-detection evaluation: Hausdorff, Chamfer, ICP correspondence and confusion metrics."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .groundtruth import EdgeLabelSet
from .pointcloud import PointCloud, normalize_points
from .spatial import thread_count

PROTOCOLS = ("label_direct", "icp_matched")


def _nonempty(a, name):
    a = np.asarray(a, dtype=np.float64).reshape(-1, 3)
    if len(a) == 0:
        raise ValueError(f"{name} point set is empty")
    return a


def nearest_distances(a, b) -> np.ndarray:
    """Distance from each point of `a` to its nearest point in `b`."""
    a, b = _nonempty(a, "first"), _nonempty(b, "second")
    d, _ = cKDTree(b).query(a, k=1, workers=thread_count())
    return d


def directed_hausdorff(a, b) -> float:
    return float(nearest_distances(a, b).max())


def hausdorff(a, b) -> float:
    """Symmetric Hausdorff distance: the larger of the two directed distances."""
    return max(directed_hausdorff(a, b), directed_hausdorff(b, a))


def chamfer(a, b) -> float:
    """Mean nearest distance a->b plus mean nearest distance b->a (unsquared)."""
    return float(nearest_distances(a, b).mean() + nearest_distances(b, a).mean())


# ---------------------------------------------------------------- ICP


@dataclass(eq=False)
class Correspondences:
    pairs: np.ndarray  # (M, 2): pred index, gt index
    unmatched_pred: np.ndarray
    unmatched_gt: np.ndarray
    rotation: np.ndarray
    translation: np.ndarray
    iterations: int
    rmse: float

    @property
    def matched(self) -> int:
        return len(self.pairs)


def rigid_fit(src: np.ndarray, dst: np.ndarray):
    """Least-squares rotation + translation mapping src onto dst (Kabsch).

    Falls back to a pure translation when the cross-covariance is rank < 2
    (collinear or single-point sets), where the rotation is not determined.
    """
    cs, cd = src.mean(axis=0), dst.mean(axis=0)
    h = (src - cs).T @ (dst - cd)
    u, s, vt = np.linalg.svd(h)
    if len(src) < 3 or s[1] <= 1e-12 * max(s[0], 1e-300):
        return np.eye(3), cd - cs
    d = np.sign(np.linalg.det(vt.T @ u.T)) or 1.0
    r = vt.T @ np.diag([1.0, 1.0, d]) @ u.T
    return r, cd - r @ cs


def icp_align(pred, gt, max_iter: int = 50, tol: float = 1e-8, tau: float = 0.02) -> Correspondences:
    """Point-to-point ICP of pred onto gt, then mutual nearest pairs within `tau`.

    Stops when the mean squared nearest distance improves by less than `tol`.
    Inputs are expected in normalized (unit-radius) coordinates.
    """
    src = _nonempty(pred, "pred")
    dst = _nonempty(gt, "gt")
    tree = cKDTree(dst)
    cur = src.copy()
    rot, trans = np.eye(3), np.zeros(3)
    prev = math.inf
    it = 0
    for it in range(1, max_iter + 1):
        d, j = tree.query(cur, k=1, workers=thread_count())
        mse = float(np.mean(d * d))
        if prev - mse < tol:
            break
        prev = mse
        r, t = rigid_fit(cur, dst[j])
        cur = cur @ r.T + t
        rot, trans = r @ rot, r @ trans + t
    d_pg, j_pg = tree.query(cur, k=1, workers=thread_count())
    _, i_gp = cKDTree(cur).query(dst, k=1, workers=thread_count())
    pi = np.arange(len(cur))
    mutual = (i_gp[j_pg] == pi) & (d_pg <= tau)
    pairs = np.stack([pi[mutual], j_pg[mutual]], axis=1).astype(np.int64)
    unmatched_gt = np.setdiff1d(np.arange(len(dst)), pairs[:, 1])
    return Correspondences(
        pairs, pi[~mutual], unmatched_gt, rot, trans, it, float(np.sqrt(np.mean(d_pg**2)))
    )


# ---------------------------------------------------------------- confusion metrics


@dataclass(frozen=True)
class ConfusionMetrics:
    precision: float
    recall: float
    mcc: float
    iou: float


def _ratio(num, den) -> float:
    return 0.0 if den == 0 else num / den


def confusion_metrics(tp: int, fp: int, tn: int, fn: int) -> ConfusionMetrics:
    """Precision, recall, MCC and IoU from raw counts; a zero denominator yields 0."""
    counts = (tp, fp, tn, fn)
    if any(c < 0 for c in counts):
        raise ValueError("counts must be nonnegative")
    if not any(counts):
        raise ValueError("all counts are zero")
    tp, fp, tn, fn = (int(c) for c in counts)
    den = (tp + fp) * (tp + fn) * (tn + fp) * (tn + fn)
    mcc = 0.0 if den == 0 else (tp * tn - fp * fn) / math.sqrt(den)
    return ConfusionMetrics(_ratio(tp, tp + fp), _ratio(tp, tp + fn), mcc, _ratio(tp, tp + fp + fn))


# ---------------------------------------------------------------- full report


@dataclass
class MetricsReport:
    protocol: str
    tp: int
    fp: int
    tn: int
    fn: int
    precision: float
    recall: float
    mcc: float
    iou: float
    hausdorff: float | None
    chamfer: float | None
    n_points: int
    tau: float | None = None
    normalization: dict = field(default_factory=dict)
    icp: dict | None = None
    notes: list = field(default_factory=list)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["units"] = "normalized (centroid at origin, max radius 1)"
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def evaluate(
    pred: EdgeLabelSet,
    gt: EdgeLabelSet,
    cloud: PointCloud,
    protocol: str = "label_direct",
    pred_cloud: PointCloud | None = None,
    tau: float = 0.02,
    max_iter: int = 50,
    tol: float = 1e-8,
) -> MetricsReport:
    """Score a predicted edge set against ground truth.

    label_direct counts TP/FP/FN by index-set algebra over the shared cloud.
    icp_matched normalizes both clouds, aligns the predicted edge points to the
    ground-truth edge points with ICP, and counts mutual pairs within `tau` as
    TP; TN is the remainder of the ground-truth cloud's point count.
    Distances are always reported in normalized units.
    """
    if protocol not in PROTOCOLS:
        raise ValueError(f"protocol must be one of {PROTOCOLS}")
    if gt.n != cloud.n:
        raise ValueError(f"ground truth covers {gt.n} points but the cloud has {cloud.n}")
    n = cloud.n
    notes = []
    gt_pts_all, tf = normalize_points(cloud.points)
    norm = {"gt": tf.to_dict()}
    gt_pts = gt_pts_all[gt.edge_indices]
    icp_info = None
    if protocol == "label_direct":
        if pred.n != n:
            raise ValueError(f"prediction covers {pred.n} points but the cloud has {n}")
        p, g = pred.to_mask().astype(bool), gt.to_mask().astype(bool)
        tp = int(np.sum(p & g))
        fp = int(np.sum(p & ~g))
        fn = int(np.sum(~p & g))
        tn = n - tp - fp - fn
        pred_pts = gt_pts_all[pred.edge_indices]
        used_tau = None
    else:
        src_cloud = cloud if pred_cloud is None else pred_cloud
        if pred.n != src_cloud.n:
            raise ValueError(f"prediction covers {pred.n} points but its cloud has {src_cloud.n}")
        pred_all, ptf = normalize_points(src_cloud.points)
        norm["pred"] = ptf.to_dict()
        pred_pts = pred_all[pred.edge_indices]
        used_tau = tau
        if len(pred_pts) and len(gt_pts):
            corr = icp_align(pred_pts, gt_pts, max_iter=max_iter, tol=tol, tau=tau)
            tp = corr.matched
            pred_pts = pred_pts @ corr.rotation.T + corr.translation
            icp_info = {"iterations": corr.iterations, "rmse": corr.rmse,
                        "rotation": corr.rotation.tolist(), "translation": corr.translation.tolist()}
        else:
            tp = 0
        fp = len(pred.edge_indices) - tp
        fn = len(gt.edge_indices) - tp
        tn = n - tp - fp - fn
        if tn < 0:
            notes.append(f"TN clamped to 0 (raw {tn})")
            tn = 0
    if len(pred_pts) and len(gt_pts):
        hd, cd = hausdorff(pred_pts, gt_pts), chamfer(pred_pts, gt_pts)
    else:
        hd = cd = None
        notes.append("Hausdorff/Chamfer undefined: empty prediction or ground truth")
    if tp + fp + tn + fn == 0:
        m = ConfusionMetrics(0.0, 0.0, 0.0, 0.0)
    else:
        m = confusion_metrics(tp, fp, tn, fn)
    return MetricsReport(protocol, tp, fp, tn, fn, m.precision, m.recall, m.mcc, m.iou, hd, cd, n,
                         used_tau, norm, icp_info, notes)
