import math

import numpy as np
import pytest

from edgeformer.groundtruth import synth_shape_n
from edgeformer.model import load_checkpoint, save_checkpoint
from edgeformer.pointcloud import PointCloud
from edgeformer.training import (
    LabeledPatchSet,
    TrainConfig,
    TrainingDivergedError,
    UnbalanceableError,
    balance_samples,
    format_train_config,
    parse_train_config,
    patches_from_cloud,
    predict,
    predict_descriptors,
    train,
)

TINY = dict(k=8, d_model=8, heads=2, encoder_layers=1, ffn_width=16, decoder_widths=(16, 8), batch_size=32)


def fake_patches(n_pos, n_neg, k=8, seed=0):
    rng = np.random.default_rng(seed)
    n = n_pos + n_neg
    labels = np.r_[np.ones(n_pos, np.int64), np.zeros(n_neg, np.int64)]
    d = rng.random((n, k)).astype(np.float32)
    return LabeledPatchSet(d, d.copy(), labels, np.full(n, "s", dtype=object), np.arange(n))


@pytest.fixture(scope="module")
def wedge_patches():
    sets = [patches_from_cloud(synth_shape_n("wedge", 400, seed=s, angle_deg=a), k=8, source=f"w{s}")
            for s, a in ((0, 60), (1, 90))]
    return LabeledPatchSet.concat(sets)


def test_balance_minority_kept():
    p = fake_patches(100, 400)
    b = balance_samples(p, 0)
    assert (b.labels == 1).sum() == 100 and (b.labels == 0).sum() == 100
    np.testing.assert_array_equal(np.sort(b.point_index[b.labels == 1]), np.arange(100))


def test_balance_already_balanced():
    p = fake_patches(50, 50)
    b = balance_samples(p, 3)
    np.testing.assert_array_equal(b.point_index, p.point_index)


def test_balance_majority_positive():
    b = balance_samples(fake_patches(300, 40), 1)
    assert (b.labels == 1).sum() == 40 and (b.labels == 0).sum() == 40


def test_balance_single_class():
    with pytest.raises(UnbalanceableError):
        balance_samples(fake_patches(0, 30), 0)
    with pytest.raises(UnbalanceableError):
        train(fake_patches(0, 30), TrainConfig(epochs=1, **TINY))


def test_balance_seeded():
    p = fake_patches(20, 200)
    assert np.array_equal(balance_samples(p, 5).point_index, balance_samples(p, 5).point_index)
    assert not np.array_equal(balance_samples(p, 5).point_index, balance_samples(p, 6).point_index)


def test_patch_set_row_check():
    with pytest.raises(ValueError):
        LabeledPatchSet(np.zeros((3, 8)), np.zeros((2, 8)), np.zeros(3), np.zeros(3), np.arange(3))


def test_unlabeled_cloud_rejected():
    c = synth_shape_n("cube", 200, seed=0).with_labels(None)
    with pytest.raises(ValueError):
        patches_from_cloud(c, k=8)


def test_two_epoch_determinism(wedge_patches, tmp_path):
    cfg = TrainConfig(epochs=2, lr=1e-3, **TINY)
    a = train(wedge_patches, cfg, checkpoint_path=tmp_path / "a.efck")
    b = train(wedge_patches, cfg, checkpoint_path=tmp_path / "b.efck")
    assert (tmp_path / "a.efck").read_bytes() == (tmp_path / "b.efck").read_bytes()
    assert a.history == b.history


def test_loss_decreases(wedge_patches):
    res = train(wedge_patches, TrainConfig(epochs=5, lr=1e-3, **TINY))
    losses = [h["train_loss"] for h in res.history]
    assert losses[-1] < losses[0]


def test_logged_learning_rates(tmp_path):
    cfg = TrainConfig(epochs=151, **{**TINY, "batch_size": 4})
    res = train(fake_patches(2, 2), cfg, log_path=tmp_path / "log.jsonl")
    lr = [h["lr"] for h in res.history]
    assert (lr[0], lr[74], lr[75], lr[149], lr[150]) == (1e-6, 1e-6, 1e-7, 1e-7, 1e-8)
    assert len((tmp_path / "log.jsonl").read_text().splitlines()) == 151


def test_validation_tracks_best(wedge_patches, tmp_path):
    cfg = TrainConfig(epochs=3, lr=1e-3, **TINY)
    res = train(wedge_patches, cfg, validation=wedge_patches.take(np.arange(0, 800, 7)),
                checkpoint_path=tmp_path / "m.efck")
    assert all("val_loss" in h for h in res.history)
    assert res.best_params is not None and (tmp_path / "m.best.efck").exists()


def test_divergence_detected(wedge_patches, monkeypatch):
    import edgeformer.training as tr

    real = tr.softmax_cross_entropy
    calls = []

    def flaky(logits, y):
        out = real(logits, y)
        calls.append(1)
        if len(calls) == 3:
            out.data = np.asarray(np.nan, dtype=out.data.dtype)
        return out

    monkeypatch.setattr(tr, "softmax_cross_entropy", flaky)
    with pytest.raises(TrainingDivergedError) as ei:
        train(wedge_patches, TrainConfig(epochs=1, **TINY))
    assert ei.value.epoch == 0 and ei.value.batch == 2


@pytest.fixture(scope="module")
def trained(wedge_patches):
    return train(wedge_patches, TrainConfig(epochs=2, lr=1e-3, **TINY)).params


def test_predict_outputs(trained):
    c = synth_shape_n("cube", 300, seed=9)
    p = predict(c, trained)
    assert p.probabilities.shape == (300,) and p.labels.n == 300
    assert np.all(np.isfinite(p.probabilities))
    assert np.all((p.probabilities >= 0) & (p.probabilities <= 1))
    np.testing.assert_array_equal(p.labels.to_mask(), (p.probabilities >= 0.5).astype(np.int64))
    assert set(p.timings) == {"local_patch_encoding_s", "network_s"}


def test_predict_batch_size_invariant(trained):
    c = synth_shape_n("cylinder", 200, seed=4)
    ref = predict(c, trained, batch_size=64).probabilities
    for bs in (1, 7, 200):
        assert predict(c, trained, batch_size=bs).probabilities.tobytes() == ref.tobytes()


def test_predict_threshold(trained):
    c = synth_shape_n("cube", 300, seed=9)
    assert predict(c, trained, threshold=1.01).labels.edge_indices.size == 0
    assert predict(c, trained, threshold=0.0).labels.edge_indices.size == 300


def test_predict_too_small(trained):
    with pytest.raises(ValueError):
        predict(PointCloud(np.random.default_rng(0).random((8, 3))), trained)


def test_predict_after_checkpoint_round_trip(trained, tmp_path):
    save_checkpoint(trained, tmp_path / "m.efck")
    q = load_checkpoint(tmp_path / "m.efck")
    d = np.random.default_rng(0).random((10, 8)).astype(np.float32)
    assert predict_descriptors(d, d, q).tobytes() == predict_descriptors(d, d, trained).tobytes()


def test_config_round_trip():
    cfg = TrainConfig(epochs=7, lr=2.5e-4, decoder_widths=(64, 32), balance=False, ablation="drop_d2")
    assert parse_train_config(format_train_config(cfg)) == cfg


def test_config_parse_errors():
    assert parse_train_config("# comment\n\nepochs = 3  # trailing\n").epochs == 3
    for bad in ("bogus = 1", "epochs 3", "balance = maybe", "epochs = x"):
        with pytest.raises(ValueError):
            parse_train_config(bad)
    with pytest.raises(ValueError):
        TrainConfig(batch_size=1)
    with pytest.raises(ValueError):
        TrainConfig(epochs=0)


def test_default_config():
    cfg = TrainConfig()
    assert (cfg.epochs, cfg.batch_size, cfg.lr, cfg.milestones, cfg.gamma) == (200, 64, 1e-6, (75, 150), 0.1)
    assert math.isclose(cfg.dropout_p, 0.5)
