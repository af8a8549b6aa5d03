"""Patch datasets, class balancing, the training loop and whole-cloud inference."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import dataclass, fields, replace
from pathlib import Path

import numpy as np

from .autodiff import AdamState, LrSchedule, Tape, adam_step, lr_at_epoch, softmax_cross_entropy
from .autodiff.tensor import no_tape
from .descriptor import compute_descriptors
from .groundtruth import EdgeLabelSet
from .model import EdgeFormerConfig, EdgeFormerParams, forward, init_params, probabilities, save_checkpoint
from .pointcloud import PointCloud, normalize_cloud

log = logging.getLogger(__name__)


class UnbalanceableError(ValueError):
    pass


class TrainingDivergedError(RuntimeError):
    def __init__(self, epoch, batch):
        self.epoch, self.batch = epoch, batch
        super().__init__(f"loss became NaN/inf at epoch {epoch}, batch {batch}")


@dataclass(frozen=True, eq=False)
class LabeledPatchSet:
    d1: np.ndarray
    d2: np.ndarray
    labels: np.ndarray
    source: np.ndarray
    point_index: np.ndarray

    def __post_init__(self):
        m = len(self.labels)
        if not (len(self.d1) == len(self.d2) == len(self.source) == len(self.point_index) == m):
            raise ValueError("row counts differ")
        if m and not np.all((self.labels == 0) | (self.labels == 1)):
            raise ValueError("labels must be 0/1")

    def __len__(self):
        return len(self.labels)

    def take(self, idx) -> "LabeledPatchSet":
        idx = np.asarray(idx, dtype=np.int64)
        return LabeledPatchSet(self.d1[idx], self.d2[idx], self.labels[idx], self.source[idx], self.point_index[idx])

    @classmethod
    def concat(cls, sets) -> "LabeledPatchSet":
        sets = list(sets)
        return cls(*(np.concatenate([getattr(s, f.name) for s in sets]) for f in fields(cls)))


def patch_descriptors(cloud: PointCloud, k: int, normalize: bool = True):
    """Descriptors of a cloud, computed on its normalized copy by default."""
    if normalize:
        cloud, _ = normalize_cloud(cloud)
    return compute_descriptors(cloud, k)


def patches_from_cloud(cloud: PointCloud, k: int = 20, source: str = "", normalize: bool = True) -> LabeledPatchSet:
    if cloud.labels is None:
        raise ValueError("training clouds need labels")
    desc = patch_descriptors(cloud, k, normalize)
    n = cloud.n
    return LabeledPatchSet(
        desc.d1.astype(np.float32),
        desc.d2.astype(np.float32),
        cloud.labels.astype(np.int64),
        np.full(n, source, dtype=object),
        np.arange(n),
    )


def balance_samples(patches: LabeledPatchSet, seed) -> LabeledPatchSet:
    """Keep every minority-class row and an equal-size uniform subsample of the majority."""
    pos = np.flatnonzero(patches.labels == 1)
    neg = np.flatnonzero(patches.labels == 0)
    if len(pos) == 0 or len(neg) == 0:
        raise UnbalanceableError(f"need both classes, got {len(pos)} edge and {len(neg)} non-edge rows")
    rng = np.random.default_rng(seed)
    if len(pos) < len(neg):
        neg = rng.choice(neg, size=len(pos), replace=False)
    elif len(neg) < len(pos):
        pos = rng.choice(pos, size=len(neg), replace=False)
    return patches.take(np.sort(np.concatenate([pos, neg])))


# ---------------------------------------------------------------- configuration


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 200
    batch_size: int = 64
    lr: float = 1e-6
    milestones: tuple = (75, 150)
    gamma: float = 0.1
    seed: int = 0
    balance: bool = True
    ablation: str = "full"
    k: int = 20
    d_model: int = 128
    heads: int = 8
    encoder_layers: int = 4
    ffn_width: int = 512
    decoder_widths: tuple = (512, 128)
    dropout_p: float = 0.5
    share_encoder: bool = False

    def __post_init__(self):
        object.__setattr__(self, "milestones", tuple(int(m) for m in self.milestones))
        object.__setattr__(self, "decoder_widths", tuple(int(w) for w in self.decoder_widths))
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2 (BatchNorm)")
        self.model_config()  # validate architecture fields early

    def model_config(self) -> EdgeFormerConfig:
        return EdgeFormerConfig(self.k, self.d_model, self.heads, self.encoder_layers, self.ffn_width,
                                self.decoder_widths, self.dropout_p, self.ablation, self.share_encoder)

    def schedule(self) -> LrSchedule:
        return LrSchedule(self.lr, self.milestones, self.gamma)


def _parse_value(raw: str, current):
    s = raw.strip()
    if isinstance(current, bool):
        if s.lower() in ("true", "1", "yes", "on"):
            return True
        if s.lower() in ("false", "0", "no", "off"):
            return False
        raise ValueError(f"expected a boolean, got {raw!r}")
    if isinstance(current, tuple):
        s = s.strip("[]()")
        return tuple(int(v) for v in s.replace(",", " ").split())
    if isinstance(current, int):
        return int(s)
    if isinstance(current, float):
        return float(s)
    return s


def parse_train_config(text: str, base: TrainConfig | None = None) -> TrainConfig:
    """Read `key = value` lines (``#`` comments allowed) over the defaults."""
    base = base or TrainConfig()
    known = {f.name for f in fields(TrainConfig)}
    updates = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        s = line.split("#", 1)[0].strip()
        if not s:
            continue
        key, sep, value = s.partition("=")
        key = key.strip()
        if not sep or key not in known:
            raise ValueError(f"config line {lineno}: unknown or malformed entry {s!r}")
        try:
            updates[key] = _parse_value(value, getattr(base, key))
        except ValueError as exc:
            raise ValueError(f"config line {lineno}: {exc}") from None
    return replace(base, **updates)


def load_train_config(path, base: TrainConfig | None = None) -> TrainConfig:
    return parse_train_config(Path(path).read_text(encoding="utf-8"), base)


def format_train_config(cfg: TrainConfig) -> str:
    out = []
    for f in fields(cfg):
        v = getattr(cfg, f.name)
        if isinstance(v, tuple):
            v = ", ".join(map(str, v))
        elif isinstance(v, bool):
            v = str(v).lower()
        out.append(f"{f.name} = {v}")
    return "\n".join(out) + "\n"


# ---------------------------------------------------------------- training loop


@dataclass
class TrainResult:
    params: EdgeFormerParams
    history: list
    best_params: EdgeFormerParams | None = None


def _evaluate(params, patches: LabeledPatchSet, batch_size: int):
    total, correct, n = 0.0, 0, len(patches)
    with no_tape():
        for s in range(0, n, batch_size):
            sl = slice(s, s + batch_size)
            logits = forward(patches.d1[sl], patches.d2[sl], params, "eval")
            y = patches.labels[sl]
            total += float(softmax_cross_entropy(logits, y).data) * len(y)
            correct += int((logits.data.argmax(1) == y).sum())
    return total / n, correct / n


def train(
    data,
    config: TrainConfig,
    validation: LabeledPatchSet | None = None,
    checkpoint_path=None,
    log_path=None,
) -> TrainResult:
    """Train from scratch with Adam and the step LR schedule.

    Balancing (if enabled) is redrawn every epoch from the pooled data with an
    epoch-derived seed, so a run is fully determined by (data, config).
    """
    pooled = data if isinstance(data, LabeledPatchSet) else LabeledPatchSet.concat(data)
    if config.balance:
        balance_samples(pooled, 0)  # fail fast on single-class data
    params = init_params(config.model_config(), config.seed)
    for t in params.tensors.values():
        t.requires_grad = True
    state = AdamState()
    schedule = config.schedule()
    history = []
    best, best_loss = None, math.inf
    log_fh = open(log_path, "w", encoding="utf-8") if log_path else None
    try:
        for epoch in range(config.epochs):
            lr = lr_at_epoch(schedule, epoch)
            rng = np.random.default_rng([config.seed, epoch])
            epoch_set = balance_samples(pooled, rng) if config.balance else pooled
            order = rng.permutation(len(epoch_set))
            if len(order) < 2:
                raise ValueError("need at least 2 training samples")
            loss_sum, correct, seen = 0.0, 0, 0
            for b, s in enumerate(range(0, len(order), config.batch_size)):
                idx = order[s: s + config.batch_size]
                if len(idx) < 2:
                    break
                y = epoch_set.labels[idx]
                with Tape() as tape:
                    logits = forward(epoch_set.d1[idx], epoch_set.d2[idx], params, "train", rng)
                    loss = softmax_cross_entropy(logits, y)
                value = float(loss.data)
                if not math.isfinite(value):
                    raise TrainingDivergedError(epoch, b)
                tape.backward(loss)
                grads = {n: t.grad for n, t in params.tensors.items() if t.grad is not None}
                adam_step({n: t.data for n, t in params.tensors.items()}, grads, state, lr)
                for t in params.tensors.values():
                    t.grad = None
                loss_sum += value * len(idx)
                correct += int((logits.data.argmax(1) == y).sum())
                seen += len(idx)
            entry = {"epoch": epoch, "lr": lr, "train_loss": loss_sum / seen, "train_acc": correct / seen}
            if validation is not None and len(validation):
                vl, va = _evaluate(params, validation, max(config.batch_size, 2))
                entry["val_loss"], entry["val_acc"] = vl, va
                if vl < best_loss:
                    best_loss, best = vl, params.copy()
                    if checkpoint_path is not None:
                        save_checkpoint(best, best_checkpoint_path(checkpoint_path))
            history.append(entry)
            log.debug("epoch %d lr %.3g loss %.4f acc %.3f", epoch, lr, entry["train_loss"], entry["train_acc"])
            if log_fh:
                log_fh.write(json.dumps(entry) + "\n")
                log_fh.flush()
    finally:
        if log_fh:
            log_fh.close()
    for t in params.tensors.values():
        t.requires_grad = False
    if checkpoint_path is not None:
        save_checkpoint(params, checkpoint_path)
    return TrainResult(params, history, best)


def best_checkpoint_path(path) -> Path:
    p = Path(path)
    return p.with_name(p.stem + ".best" + p.suffix)


# ---------------------------------------------------------------- inference


@dataclass
class Prediction:
    labels: EdgeLabelSet
    probabilities: np.ndarray
    timings: dict


def predict_descriptors(d1, d2, params: EdgeFormerParams, batch_size: int = 256) -> np.ndarray:
    """Edge-class probability per row, eval mode."""
    n = len(d1)
    out = np.empty(n, dtype=np.float64)
    with no_tape():
        for s in range(0, n, max(1, batch_size)):
            sl = slice(s, s + batch_size)
            out[sl] = probabilities(forward(d1[sl], d2[sl], params, "eval"))[:, 1]
    return out


def predict(cloud: PointCloud, params: EdgeFormerParams, batch_size: int = 256, threshold: float = 0.5) -> Prediction:
    """Label every point: edge iff the edge-class softmax probability is >= threshold."""
    k = params.config.k
    if cloud.n < k + 1:
        raise ValueError(f"cloud has {cloud.n} points; the model needs at least {k + 1}")
    t0 = time.perf_counter()
    desc = patch_descriptors(cloud, k)
    t1 = time.perf_counter()
    probs = predict_descriptors(desc.d1.astype(np.float32), desc.d2.astype(np.float32), params, batch_size)
    t2 = time.perf_counter()
    labels = EdgeLabelSet.from_mask(probs >= threshold)
    return Prediction(labels, probs, {"local_patch_encoding_s": t1 - t0, "network_s": t2 - t1})
