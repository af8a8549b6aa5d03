"""The EdgeFormer classifier: per-branch embedding, transformer enhancement, fusion, MLP decoder.

Shape chain for B points with K neighbours and width E:

    (B, K) -> embed (K, B, E) -> enhance (B, K, E) -> fuse (B, 2*K*E) -> classify (B, 2)
"""

from __future__ import annotations

import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from .autodiff import ops
from .autodiff.nn import encoder_layer, encoder_param_shapes
from .autodiff.ops import BatchNormState
from .autodiff.tensor import Tensor

ABLATIONS = ("full", "mlp_only", "encoder_only", "drop_d1", "drop_d2")


@dataclass(frozen=True)
class EdgeFormerConfig:
    k: int = 20
    d_model: int = 128
    heads: int = 8
    encoder_layers: int = 4
    ffn_width: int = 512
    decoder_widths: tuple = (512, 128)
    dropout_p: float = 0.5
    ablation: str = "full"
    share_encoder: bool = False

    def __post_init__(self):
        object.__setattr__(self, "decoder_widths", tuple(int(w) for w in self.decoder_widths))
        if self.ablation not in ABLATIONS:
            raise ValueError(f"unknown ablation {self.ablation!r}; expected one of {ABLATIONS}")
        if self.d_model % self.heads:
            raise ValueError(f"d_model={self.d_model} must be divisible by heads={self.heads}")
        if not self.decoder_widths:
            raise ValueError("decoder_widths must be nonempty")
        if min(self.k, self.d_model, self.heads, self.ffn_width, *self.decoder_widths) < 1:
            raise ValueError("sizes must be positive")
        if self.encoder_layers < 0 or not 0 <= self.dropout_p < 1:
            raise ValueError("invalid encoder_layers or dropout_p")

    @property
    def branches(self) -> tuple:
        if self.ablation == "drop_d1":
            return (2,)
        if self.ablation == "drop_d2":
            return (1,)
        return (1, 2)

    @property
    def fuse_width(self) -> int:
        return len(self.branches) * self.k * self.d_model

    def to_dict(self) -> dict:
        d = asdict(self)
        d["decoder_widths"] = list(self.decoder_widths)
        return d


@dataclass(eq=False)
class EdgeFormerParams:
    config: EdgeFormerConfig
    tensors: dict = field(default_factory=dict)
    bn: dict = field(default_factory=dict)
    seed: int = 0

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def __iter__(self):
        return iter(self.tensors)

    def trainable(self) -> dict:
        return self.tensors

    def astype(self, dtype) -> "EdgeFormerParams":
        tensors = {n: Tensor(t.data.astype(dtype), name=n) for n, t in self.tensors.items()}
        bn = {
            n: BatchNormState(s.running_mean.astype(dtype), s.running_var.astype(dtype), s.momentum, s.eps)
            for n, s in self.bn.items()
        }
        return EdgeFormerParams(self.config, tensors, bn, self.seed)

    def copy(self) -> "EdgeFormerParams":
        return self.astype(next(iter(self.tensors.values())).dtype)


def _encoder_prefix(config: EdgeFormerConfig, branch: int) -> str:
    return "enc1" if config.share_encoder else f"enc{branch}"


def param_shapes(config: EdgeFormerConfig) -> dict[str, tuple]:
    shapes: dict[str, tuple] = {}
    e = config.d_model
    use_encoder = config.ablation != "mlp_only"
    encoders = []
    for b in config.branches:
        shapes[f"emb{b}.w"] = (1, e)
        shapes[f"emb{b}.b"] = (e,)
        pre = _encoder_prefix(config, b)
        if use_encoder and pre not in encoders:
            encoders.append(pre)
    for pre in encoders:
        for layer in range(config.encoder_layers):
            shapes.update(encoder_param_shapes(f"{pre}.{layer}", e, config.ffn_width))
        shapes[f"{pre}.ln.g"] = (e,)
        shapes[f"{pre}.ln.b"] = (e,)
    width = config.fuse_width
    if config.ablation != "encoder_only":
        for i, h in enumerate(config.decoder_widths):
            shapes[f"dec.{i}.w"] = (width, h)
            shapes[f"dec.{i}.b"] = (h,)
            shapes[f"dec.{i}.bn.g"] = (h,)
            shapes[f"dec.{i}.bn.b"] = (h,)
            width = h
    shapes["out.w"] = (width, 2)
    shapes["out.b"] = (2,)
    shapes["out.bn.g"] = (2,)
    shapes["out.bn.b"] = (2,)
    return shapes


def bn_names(config: EdgeFormerConfig) -> list[str]:
    names = [] if config.ablation == "encoder_only" else [f"dec.{i}.bn" for i in range(len(config.decoder_widths))]
    return names + ["out.bn"]


def init_params(config: EdgeFormerConfig, seed: int = 0, dtype=np.float32) -> EdgeFormerParams:
    """Fan-in uniform weights, zero biases, unit/zero norm affines. Deterministic in `seed`."""
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, shape in param_shapes(config).items():
        leaf = name.rsplit(".", 1)[-1]
        if len(shape) == 2:
            bound = 1.0 / np.sqrt(shape[0])
            data = rng.uniform(-bound, bound, size=shape)
        elif leaf == "g":
            data = np.ones(shape)
        else:
            data = np.zeros(shape)
        tensors[name] = Tensor(data.astype(dtype), name=name)
    bn = {}
    for name in bn_names(config):
        bn[name] = BatchNormState.fresh(tensors[f"{name}.g"].shape[0], dtype)
    return EdgeFormerParams(config, tensors, bn, seed)


# ---------------------------------------------------------------- network stages


def _as_input(d, params: EdgeFormerParams) -> Tensor:
    dtype = params[next(iter(params))].dtype
    if isinstance(d, Tensor):
        return d if d.dtype == dtype else Tensor(d.data.astype(dtype))
    return Tensor(np.asarray(d, dtype=dtype))


def embed(d, params: EdgeFormerParams, branch: int) -> Tensor:
    """(B, K) descriptor rows -> (K, B, E): transpose, unsqueeze, shared 1->E linear + ReLU."""
    x = _as_input(d, params)
    k = params.config.k
    if x.ndim != 2 or x.shape[1] != k:
        raise ops.ShapeError(f"expected descriptor rows of shape (B, {k}), got {x.shape}")
    b = x.shape[0]
    x = ops.reshape(ops.transpose(x, (1, 0)), (k, b, 1))
    return ops.relu(ops.linear(x, params[f"emb{branch}.w"], params[f"emb{branch}.b"]))


def enhance(f_emd: Tensor, params: EdgeFormerParams, branch: int) -> Tensor:
    """Encoder stack attending over the K neighbours, then axis swap and a final LayerNorm."""
    cfg = params.config
    pre = _encoder_prefix(cfg, branch)
    x = f_emd
    for layer in range(cfg.encoder_layers):
        x = encoder_layer(x, params, f"{pre}.{layer}", cfg.heads)
    x = ops.transpose(x, (1, 0, 2))
    return ops.layer_norm(x, params[f"{pre}.ln.g"], params[f"{pre}.ln.b"])


def fuse(features) -> Tensor:
    """Flatten each (B, K, E) branch row-major and concatenate them in order."""
    flat = []
    for f in features:
        if f.shape != features[0].shape:
            raise ops.ShapeError(f"branch shapes differ: {f.shape} vs {features[0].shape}")
        flat.append(ops.reshape(f, (f.shape[0], f.shape[1] * f.shape[2])))
    return flat[0] if len(flat) == 1 else ops.concat(flat, axis=1)


def classify(f_fuse: Tensor, params: EdgeFormerParams, mode: str = "eval", rng=None) -> Tensor:
    """Decoder MLP to 2 logits: [Linear, ReLU, BatchNorm] per hidden layer, dropout after the first."""
    cfg = params.config
    training = _training(mode)
    if f_fuse.shape[1] != cfg.fuse_width:
        raise ops.ShapeError(f"fused width {f_fuse.shape[1]} != expected {cfg.fuse_width}")
    x = f_fuse
    if cfg.ablation != "encoder_only":
        for i in range(len(cfg.decoder_widths)):
            x = ops.relu(ops.linear(x, params[f"dec.{i}.w"], params[f"dec.{i}.b"]))
            x = ops.batch_norm(x, params[f"dec.{i}.bn.g"], params[f"dec.{i}.bn.b"], params.bn[f"dec.{i}.bn"], training)
            if i == 0 and len(cfg.decoder_widths) > 1:
                x = ops.dropout(x, cfg.dropout_p, training, rng)
    x = ops.linear(x, params["out.w"], params["out.b"])
    return ops.batch_norm(x, params["out.bn.g"], params["out.bn.b"], params.bn["out.bn"], training)


def _training(mode: str) -> bool:
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    return mode == "train"


def forward(d1, d2, params: EdgeFormerParams, mode: str = "eval", rng=None) -> Tensor:
    """Logits (B, 2) for B patches given their D1 and D2 rows."""
    cfg = params.config
    _training(mode)
    feats = []
    for branch, d in zip((1, 2), (d1, d2)):
        if branch not in cfg.branches:
            continue
        f = embed(d, params, branch)
        if cfg.ablation == "mlp_only":
            f = ops.transpose(f, (1, 0, 2))
        else:
            f = enhance(f, params, branch)
        feats.append(f)
    return classify(fuse(feats), params, mode, rng)


def probabilities(logits: Tensor) -> np.ndarray:
    z = logits.data.astype(np.float64)
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


# ---------------------------------------------------------------- checkpoint file

_MAGIC = b"EFCK"
_VERSION = 1


def save_checkpoint(params: EdgeFormerParams, path) -> None:
    cfg = params.config
    out = bytearray(_MAGIC)
    out += struct.pack("<I", _VERSION)
    out += struct.pack("<5I", cfg.k, cfg.d_model, cfg.heads, cfg.encoder_layers, cfg.ffn_width)
    out += struct.pack("<I", len(cfg.decoder_widths))
    out += struct.pack(f"<{len(cfg.decoder_widths)}I", *cfg.decoder_widths)
    out += struct.pack("<fBBQ", cfg.dropout_p, ABLATIONS.index(cfg.ablation), int(cfg.share_encoder), params.seed)
    named = [(n, t.data) for n, t in params.tensors.items()]
    for n, s in params.bn.items():
        named.append((f"{n}.running_mean", s.running_mean))
        named.append((f"{n}.running_var", s.running_var))
    out += struct.pack("<I", len(named))
    for name, arr in named:
        raw = name.encode("utf-8")
        out += struct.pack("<I", len(raw)) + raw
        out += struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
        out += np.ascontiguousarray(arr, dtype="<f4").tobytes()
    with open(path, "wb") as fh:
        fh.write(bytes(out))


def load_checkpoint(path) -> EdgeFormerParams:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != _MAGIC:
        raise ValueError(f"{path}: not a checkpoint (bad magic)")
    (version,) = struct.unpack_from("<I", raw, 4)
    if version != _VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    off = 8
    k, d_model, heads, layers, ffn = struct.unpack_from("<5I", raw, off)
    off += 20
    (nd,) = struct.unpack_from("<I", raw, off)
    off += 4
    widths = struct.unpack_from(f"<{nd}I", raw, off)
    off += 4 * nd
    dropout_p, abl, share, seed = struct.unpack_from("<fBBQ", raw, off)
    off += struct.calcsize("<fBBQ")
    cfg = EdgeFormerConfig(k, d_model, heads, layers, ffn, widths, float(np.float32(dropout_p)),
                           ABLATIONS[abl], bool(share))
    (count,) = struct.unpack_from("<I", raw, off)
    off += 4
    arrays = {}
    for _ in range(count):
        (ln,) = struct.unpack_from("<I", raw, off)
        off += 4
        name = raw[off: off + ln].decode("utf-8")
        off += ln
        (ndim,) = struct.unpack_from("<I", raw, off)
        off += 4
        shape = struct.unpack_from(f"<{ndim}I", raw, off)
        off += 4 * ndim
        size = int(np.prod(shape)) if ndim else 1
        arrays[name] = np.frombuffer(raw, "<f4", size, off).reshape(shape).astype(np.float32)
        off += 4 * size
    tensors = {}
    for name, shape in param_shapes(cfg).items():
        if name not in arrays or arrays[name].shape != shape:
            raise ValueError(f"{path}: parameter {name} missing or misshapen")
        tensors[name] = Tensor(arrays[name], name=name)
    bn = {n: BatchNormState(arrays[f"{n}.running_mean"], arrays[f"{n}.running_var"]) for n in bn_names(cfg)}
    return EdgeFormerParams(cfg, tensors, bn, seed)
