"""Transformer encoder blocks built from the primitives in `ops`.

Parameters are looked up by name in a flat mapping, e.g. ``f"{prefix}.wq"``.
Tensors are sequence-first: (S, B, E).
"""

from __future__ import annotations

import math

from . import ops
from .tensor import Tensor


def multi_head_attention(x: Tensor, params, prefix: str, heads: int) -> Tensor:
    """Unmasked scaled dot-product self-attention over the sequence axis."""
    s, b, e = x.shape
    if e % heads:
        raise ops.ShapeError(f"embedding width {e} is not divisible by {heads} heads")
    dh = e // heads

    def split(t):
        return ops.transpose(ops.reshape(t, (s, b, heads, dh)), (1, 2, 0, 3))  # (B, H, S, dh)

    q = split(ops.linear(x, params[f"{prefix}.wq"], params[f"{prefix}.bq"]))
    k = split(ops.linear(x, params[f"{prefix}.wk"], params[f"{prefix}.bk"]))
    v = split(ops.linear(x, params[f"{prefix}.wv"], params[f"{prefix}.bv"]))
    scores = ops.scale(ops.matmul(q, ops.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))
    ctx = ops.matmul(ops.softmax(scores, axis=-1), v)
    ctx = ops.reshape(ops.transpose(ctx, (2, 0, 1, 3)), (s, b, e))
    return ops.linear(ctx, params[f"{prefix}.wo"], params[f"{prefix}.bo"])


def feed_forward(x: Tensor, params, prefix: str) -> Tensor:
    h = ops.relu(ops.linear(x, params[f"{prefix}.w1"], params[f"{prefix}.b1"]))
    return ops.linear(h, params[f"{prefix}.w2"], params[f"{prefix}.b2"])


def encoder_layer(x: Tensor, params, prefix: str, heads: int) -> Tensor:
    """Post-norm layer: LN(x + MHA(x)) followed by LN(y + FFN(y))."""
    y = ops.add(x, multi_head_attention(x, params, f"{prefix}.attn", heads))
    y = ops.layer_norm(y, params[f"{prefix}.ln1.g"], params[f"{prefix}.ln1.b"])
    z = ops.add(y, feed_forward(y, params, f"{prefix}.ffn"))
    return ops.layer_norm(z, params[f"{prefix}.ln2.g"], params[f"{prefix}.ln2.b"])


def encoder_param_shapes(prefix: str, d_model: int, ffn: int) -> dict[str, tuple]:
    e = d_model
    shapes = {}
    for n in ("q", "k", "v", "o"):
        shapes[f"{prefix}.attn.w{n}"] = (e, e)
        shapes[f"{prefix}.attn.b{n}"] = (e,)
    shapes[f"{prefix}.ffn.w1"] = (e, ffn)
    shapes[f"{prefix}.ffn.b1"] = (ffn,)
    shapes[f"{prefix}.ffn.w2"] = (ffn, e)
    shapes[f"{prefix}.ffn.b2"] = (e,)
    for ln in ("ln1", "ln2"):
        shapes[f"{prefix}.{ln}.g"] = (e,)
        shapes[f"{prefix}.{ln}.b"] = (e,)
    return shapes
