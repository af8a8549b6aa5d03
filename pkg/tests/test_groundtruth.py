import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from edgeformer.groundtruth import (
    EdgeLabelSet,
    FeatureFileError,
    InconsistentPairingError,
    band_width,
    crease_distance,
    parse_abc_features,
    read_feature_curves,
    surface_area,
    synth_shape,
    synth_shape_n,
)


def write_yaml(tmp_path, curves):
    lines = ["curves:"]
    for sharp, idx in curves:
        lines.append(f"- sharp: {'true' if sharp else 'false'}")
        lines.append("  type: Line")
        lines.append(f"  vert_indices: {list(idx)}")
    p = tmp_path / "f.yml"
    p.write_text("\n".join(lines) + "\n")
    return p


def test_sharp_only(tmp_path):
    p = write_yaml(tmp_path, [(True, [0, 1, 2]), (False, [3, 4])])
    assert parse_abc_features(p, 10) == EdgeLabelSet(10, np.array([0, 1, 2]))


def test_shared_index_once(tmp_path):
    p = write_yaml(tmp_path, [(True, [5, 1]), (True, [7, 5])])
    np.testing.assert_array_equal(parse_abc_features(p, 10).edge_indices, [1, 5, 7])


def test_index_out_of_range(tmp_path):
    p = write_yaml(tmp_path, [(True, [0, 10])])
    with pytest.raises(InconsistentPairingError) as ei:
        parse_abc_features(p, 10)
    assert ei.value.index == 10 and "f.yml" in str(ei.value)


def test_missing_sharp_flag_ignored(tmp_path):
    p = tmp_path / "f.yml"
    p.write_text("curves:\n- type: Circle\n  vert_indices: [1, 2]\n- sharp: true\n  vert_indices: [4]\n")
    np.testing.assert_array_equal(parse_abc_features(p, 5).edge_indices, [4])


def test_mini_fixture(data_dir):
    curves = read_feature_curves(data_dir / "abc_mini_features.yml")
    assert len(curves) == 3 and sum(c.sharp for c in curves) == 2
    assert [c.curve_type for c in curves] == ["line", "bspline", "circle"]
    assert parse_abc_features(data_dir / "abc_mini_features.yml", 8) == EdgeLabelSet(8, np.array([0, 1, 3, 5]))


def test_malformed_yaml_positioned(data_dir):
    with pytest.raises(FeatureFileError) as ei:
        parse_abc_features(data_dir / "abc_malformed.yml", 8)
    e = ei.value
    assert e.line == 5 and e.column is not None
    assert str(e).startswith(f"{data_dir / 'abc_malformed.yml'}:5:")


def test_wrong_structure(tmp_path):
    p = tmp_path / "f.yml"
    p.write_text("- 1\n- 2\n")
    with pytest.raises(FeatureFileError):
        parse_abc_features(p, 3)


@given(st.lists(st.tuples(st.booleans(), st.lists(st.integers(0, 49), max_size=6)), max_size=6), st.randoms())
def test_order_insensitive(tmp_path_factory, curves, rnd):
    d = tmp_path_factory.mktemp("y")
    a = parse_abc_features(write_yaml(d, curves), 50)
    shuffled = list(curves)
    rnd.shuffle(shuffled)
    assert parse_abc_features(write_yaml(d, shuffled), 50) == a
    expected = sorted({i for s, idx in curves if s for i in idx})
    np.testing.assert_array_equal(a.edge_indices, expected)


def test_label_set_invariants():
    with pytest.raises(ValueError):
        EdgeLabelSet(5, np.array([2, 1]))
    with pytest.raises(ValueError):
        EdgeLabelSet(5, np.array([1, 1]))
    with pytest.raises(ValueError):
        EdgeLabelSet(5, np.array([5]))


@given(st.integers(1, 200), st.integers(0, 1000))
def test_label_set_sidecar_round_trip(tmp_path_factory, n, seed):
    mask = np.random.default_rng(seed).random(n) < 0.3
    ls = EdgeLabelSet.from_mask(mask)
    p = tmp_path_factory.mktemp("l") / "x.labels"
    ls.save(p)
    assert EdgeLabelSet.load(p, n) == ls
    np.testing.assert_array_equal(ls.to_mask().astype(bool), mask)


def test_cube_labels_near_edges():
    c = synth_shape("cube", 400, seed=1)
    eps = band_width(400)
    d = crease_distance("cube", c.points)
    assert c.labels.any()
    assert np.all(d[c.labels == 1] <= eps)
    assert np.all(d[c.labels == 0] > eps)


def test_cylinder_labels_only_on_rims():
    c = synth_shape("cylinder", 600, seed=2)
    eps = band_width(600)
    lab = c.points[c.labels == 1]
    rim_dist = np.minimum(np.hypot(np.hypot(lab[:, 0], lab[:, 1]) - 0.5, lab[:, 2] - 0.5),
                          np.hypot(np.hypot(lab[:, 0], lab[:, 1]) - 0.5, lab[:, 2] + 0.5))
    assert np.all(rim_dist <= eps)
    side_mid = (np.abs(c.points[:, 2]) < 0.5 - eps) & (np.abs(np.hypot(c.points[:, 0], c.points[:, 1]) - 0.5) < 1e-12)
    assert side_mid.any() and not c.labels[side_mid].any()


def test_wedge_label_fraction_matches_area_ratio():
    density = 2000 / surface_area("wedge")
    eps = band_width(density)
    # the fold spans the full sheet width, so the band on each unit sheet is an eps x 1 strip
    expected = 2 * eps / surface_area("wedge")
    fracs = [synth_shape("wedge", density, seed=s).labels.mean() for s in range(5)]
    assert abs(np.mean(fracs) - expected) / expected < 0.2


def test_wedge_angles_and_normals():
    for ang in (45, 90, 135):
        c = synth_shape_n("wedge", 500, seed=0, angle_deg=ang)
        np.testing.assert_allclose(np.linalg.norm(c.normals, axis=1), 1, atol=1e-12)
        sheet2 = c.normals[:, 2] > -1 + 1e-9
        u2 = np.array([math.cos(math.radians(ang)), 0, math.sin(math.radians(ang))])
        np.testing.assert_allclose(c.normals[sheet2] @ u2, 0, atol=1e-12)
    with pytest.raises(ValueError):
        synth_shape_n("wedge", 500, angle_deg=180)


def test_synth_deterministic_and_exact_count():
    for kind in ("cube", "cylinder", "wedge", "fused_boxes"):
        a, b = synth_shape_n(kind, 777, seed=7), synth_shape_n(kind, 777, seed=7)
        assert a.n == 777
        np.testing.assert_array_equal(a.points, b.points)
        np.testing.assert_array_equal(a.labels, b.labels)


def test_fused_boxes_has_concave_seam():
    c = synth_shape_n("fused_boxes", 3000, seed=0)
    # the inner corner of the L sits at (x, z) = (0, 0) in the centred layout
    near = np.hypot(c.points[:, 0], c.points[:, 2]) < 0.02
    assert near.any() and c.labels[near].all()


def test_too_few_points():
    with pytest.raises(ValueError):
        synth_shape("cube", 10)
