import json
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.spatial.transform import Rotation

from edgeformer.evalmetrics import (
    chamfer,
    confusion_metrics,
    directed_hausdorff,
    evaluate,
    hausdorff,
    icp_align,
    rigid_fit,
)
from edgeformer.groundtruth import EdgeLabelSet, synth_shape_n
from edgeformer.pointcloud import PointCloud


def brute_chamfer(a, b):
    def mean_nn(x, y):
        return sum(min(math.dist(p, q) for q in y) for p in x) / len(x)

    return mean_nn(a.tolist(), b.tolist()) + mean_nn(b.tolist(), a.tolist())


def test_identical_sets_zero():
    a = np.random.default_rng(0).random((50, 3))
    assert hausdorff(a, a) == 0 and chamfer(a, a) == 0


def test_hausdorff_345():
    assert hausdorff([[0, 0, 0]], [[3, 4, 0]]) == 5


def test_hausdorff_asymmetric_components():
    a, b = [[0, 0, 0], [1, 0, 0]], [[0, 0, 0]]
    assert directed_hausdorff(a, b) == 1 and directed_hausdorff(b, a) == 0
    assert hausdorff(a, b) == 1


def test_chamfer_unit():
    assert chamfer([[0, 0, 0]], [[1, 0, 0]]) == 2


def test_empty_set_rejected():
    with pytest.raises(ValueError):
        hausdorff(np.zeros((0, 3)), [[0, 0, 0]])


@pytest.mark.parametrize("seed", range(5))
def test_chamfer_against_exhaustive(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.random((100, 3)), rng.random((100, 3))
    assert abs(chamfer(a, b) - brute_chamfer(a, b)) <= 1e-12


@given(st.integers(0, 10_000), st.integers(1, 30), st.integers(1, 30))
def test_distance_properties(seed, n, m):
    rng = np.random.default_rng(seed)
    a, b = rng.random((n, 3)), rng.random((m, 3))
    h = hausdorff(a, b)
    assert h == hausdorff(b, a)
    assert abs(chamfer(a, b) - chamfer(b, a)) < 1e-12
    assert h >= directed_hausdorff(a, b) and h >= directed_hausdorff(b, a)
    assert chamfer(a, b) <= 2 * h + 1e-12
    assert h > 0


def test_confusion_perfect():
    m = confusion_metrics(2, 0, 2, 0)
    assert (m.precision, m.recall, m.mcc, m.iou) == (1, 1, 1, 1)


def test_confusion_mcc_zero():
    assert confusion_metrics(1, 1, 1, 1).mcc == 0


def test_confusion_iou():
    assert confusion_metrics(3, 1, 0, 1).iou == 0.6


def test_confusion_zero_denominator():
    m = confusion_metrics(0, 0, 5, 0)
    assert (m.precision, m.recall, m.mcc, m.iou) == (0, 0, 0, 0)
    with pytest.raises(ValueError):
        confusion_metrics(0, 0, 0, 0)


@given(st.integers(0, 50), st.integers(0, 50), st.integers(0, 50), st.integers(0, 50))
def test_confusion_bounds(tp, fp, tn, fn):
    if tp + fp + tn + fn == 0:
        return
    m = confusion_metrics(tp, fp, tn, fn)
    assert -1 <= m.mcc <= 1
    if tp > 0:
        assert m.iou <= m.precision and m.iou <= m.recall


def test_icp_identity():
    g = synth_shape_n("cube", 800, seed=0).points
    c = icp_align(g, g)
    np.testing.assert_allclose(c.rotation, np.eye(3), atol=1e-12)
    assert c.matched == len(g) and c.iterations <= 2


def test_icp_translation():
    g = np.random.default_rng(3).random((300, 3)) - 0.5
    c = icp_align(g + [0.1, 0, 0], g)
    np.testing.assert_allclose(c.translation, [-0.1, 0, 0], atol=1e-6)
    assert c.matched == 300


def test_icp_rotation_with_noise():
    # scattered set whose spacing (~0.1) is well above the noise, so mutual pairing is unambiguous
    gt = np.random.default_rng(1).uniform(-1, 1, (400, 3))
    gt = gt - gt.mean(0)
    gt /= np.linalg.norm(gt, axis=1).max()
    rot = Rotation.from_euler("z", 10, degrees=True).as_matrix()
    # 1% RMS displacement (3D) of the unit-radius set: per-axis sigma = 0.01 / sqrt(3)
    noise = np.random.default_rng(2).normal(0, 0.01 / np.sqrt(3), gt.shape)
    pred = gt @ rot.T + noise
    c = icp_align(pred, gt, tau=0.02)
    assert c.matched / len(gt) >= 0.95
    assert abs(np.linalg.det(c.rotation) - 1) < 1e-6
    np.testing.assert_allclose(c.rotation @ c.rotation.T, np.eye(3), atol=1e-6)


def test_icp_pairs_unique():
    rng = np.random.default_rng(5)
    a, b = rng.random((80, 3)), rng.random((60, 3))
    c = icp_align(a, b, tau=0.3)
    assert len(set(c.pairs[:, 0])) == c.matched and len(set(c.pairs[:, 1])) == c.matched
    assert c.matched + len(c.unmatched_pred) == 80 and c.matched + len(c.unmatched_gt) == 60


def test_rigid_fit_collinear_falls_back():
    src = np.array([[0, 0, 0], [1, 0, 0], [2, 0, 0]], float)
    r, t = rigid_fit(src, src + [0, 1, 0])
    np.testing.assert_array_equal(r, np.eye(3))
    np.testing.assert_allclose(t, [0, 1, 0])


def _cloud():
    c = synth_shape_n("cube", 500, seed=3)
    return c, EdgeLabelSet.from_mask(c.labels)


def test_evaluate_perfect():
    c, gt = _cloud()
    r = evaluate(gt, gt, c)
    assert (r.tp, r.fp, r.fn) == (len(gt), 0, 0)
    assert (r.precision, r.recall, r.mcc, r.iou) == (1, 1, 1, 1)
    assert r.hausdorff == 0 and r.chamfer == 0


def test_evaluate_complement():
    c, gt = _cloud()
    comp = EdgeLabelSet.from_mask(1 - gt.to_mask())
    r = evaluate(comp, gt, c)
    p, n = len(gt), c.n - len(gt)
    assert r.precision == 0 and r.recall == 0
    assert r.mcc == (0 * 0 - n * p) / math.sqrt(n * p * p * n)


def test_evaluate_icp_on_identical_sets():
    c, gt = _cloud()
    r = evaluate(gt, gt, c, protocol="icp_matched")
    assert (r.tp, r.fp, r.fn, r.tn) == (len(gt), 0, 0, c.n - len(gt))
    assert r.tau == 0.02 and r.icp["iterations"] <= 2


def test_evaluate_icp_across_clouds():
    c, gt = _cloud()
    moved = PointCloud(c.points * 2.5 + [1, 2, 3], c.normals)
    r = evaluate(gt, gt, c, protocol="icp_matched", pred_cloud=moved)
    assert r.tp == len(gt) and r.hausdorff < 1e-9


def test_evaluate_empty_prediction():
    c, gt = _cloud()
    r = evaluate(EdgeLabelSet(c.n, np.array([], dtype=np.int64)), gt, c)
    assert r.hausdorff is None and r.chamfer is None and r.recall == 0 and r.notes


def test_report_json():
    c, gt = _cloud()
    d = json.loads(evaluate(gt, gt, c).to_json())
    assert d["protocol"] == "label_direct" and "normalization" in d and "units" in d
    for k in ("hausdorff", "chamfer", "precision", "recall", "iou", "mcc", "tp", "fp", "tn", "fn"):
        assert k in d


def test_evaluate_size_mismatch():
    c, gt = _cloud()
    with pytest.raises(ValueError):
        evaluate(EdgeLabelSet(10, np.array([1])), gt, c)
