"""Finite-difference gradient suite over every primitive and a toy EdgeFormer."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import ops
from .autodiff.gradcheck import grad_check
from .autodiff.nn import encoder_layer, encoder_param_shapes, multi_head_attention
from .autodiff.tensor import Tensor
from .model import EdgeFormerConfig, forward, init_params

AFFINE_TOL = 1e-6
COMPOSITE_TOL = 1e-4

TOY_CONFIG = EdgeFormerConfig(k=4, d_model=8, heads=2, encoder_layers=1, ffn_width=16, decoder_widths=(16, 8))


@dataclass(frozen=True)
class GradResult:
    name: str
    error: float
    tol: float

    @property
    def passed(self) -> bool:
        return self.error < self.tol


def _rand(rng, *shape, away_from_zero=False):
    x = rng.standard_normal(shape)
    if away_from_zero:
        # keep ReLU inputs clear of the kink so central differences stay valid
        x = np.sign(x) * (np.abs(x) + 0.1)
    return Tensor(x, dtype=np.float64)


def _encoder_params(rng, prefix, e, ffn):
    p = {}
    for name, shape in encoder_param_shapes(prefix, e, ffn).items():
        scale = 1.0 if name.endswith((".g", ".b")) and "ln" in name else 1.0 / np.sqrt(shape[0])
        p[name] = Tensor(rng.standard_normal(shape) * scale, dtype=np.float64)
        if name.endswith(".g"):
            p[name].data += 1.0
    return p


def toy_model_check(seed: int = 0, h: float = 1e-5) -> float:
    """Gradient error of the toy EdgeFormer (eval mode) w.r.t. every parameter and both inputs."""
    rng = np.random.default_rng(seed)
    params = init_params(TOY_CONFIG, seed, dtype=np.float64)
    for t in params.tensors.values():
        # move off the init point (zero biases, unit norms) so no gradient is trivially structured
        t.data += 0.1 * rng.standard_normal(t.shape)
    for s in params.bn.values():
        s.running_mean[:] = 0.1 * rng.standard_normal(s.running_mean.shape)
        s.running_var[:] = 0.5 + rng.random(s.running_var.shape)
    b, k = 4, TOY_CONFIG.k
    d1 = Tensor(rng.random((b, k)) + 0.05, dtype=np.float64)
    d2 = Tensor(rng.random((b, k)) + 0.05, dtype=np.float64)
    names = list(params.tensors)
    inputs = [d1, d2] + [params.tensors[n] for n in names]

    def fn(x1, x2, *ps):
        for n, t in zip(names, ps):
            params.tensors[n] = t
        return forward(x1, x2, params, "eval")

    zero = [2 + i for i, n in enumerate(names) if n.endswith(".attn.bk")]
    return grad_check(fn, inputs, h=h, zero_inputs=zero)


def gradient_suite(seed: int = 0) -> list[GradResult]:
    rng = np.random.default_rng(seed)
    out = []

    def add(name, fn, inputs, tol, zero=()):
        out.append(GradResult(name, grad_check(fn, inputs, zero_inputs=zero), tol))

    add("add", ops.add, [_rand(rng, 4, 3), _rand(rng, 3)], AFFINE_TOL)
    add("sub", ops.sub, [_rand(rng, 4, 3), _rand(rng, 1, 3)], AFFINE_TOL)
    add("mul", ops.mul, [_rand(rng, 4, 3), _rand(rng, 4, 1)], AFFINE_TOL)
    add("scale", lambda x: ops.scale(x, 0.37), [_rand(rng, 4, 3)], AFFINE_TOL)
    add("sum", ops.sum, [_rand(rng, 4, 3)], AFFINE_TOL)
    add("mean", ops.mean, [_rand(rng, 2, 3, 2)], AFFINE_TOL)
    add("swapaxes", lambda x: ops.swapaxes(x, 0, 2), [_rand(rng, 2, 3, 4)], AFFINE_TOL)
    add("matmul", ops.matmul, [_rand(rng, 2, 4, 3), _rand(rng, 2, 3, 5)], AFFINE_TOL)
    add("linear", ops.linear, [_rand(rng, 4, 3), _rand(rng, 3, 2), _rand(rng, 2)], AFFINE_TOL)
    add("reshape_transpose", lambda x: ops.transpose(ops.reshape(x, (3, 2, 2)), (2, 0, 1)),
        [_rand(rng, 4, 3)], AFFINE_TOL)
    add("concat", lambda a, b: ops.concat([a, b], axis=1), [_rand(rng, 2, 3), _rand(rng, 2, 2)], AFFINE_TOL)
    add("relu", ops.relu, [_rand(rng, 5, 4, away_from_zero=True)], AFFINE_TOL)
    add("dropout_train", lambda x: ops.dropout(x, 0.5, True, np.random.default_rng(7)),
        [_rand(rng, 5, 4)], AFFINE_TOL)
    add("softmax", ops.softmax, [_rand(rng, 3, 5)], 1e-5)
    add("layer_norm", ops.layer_norm, [_rand(rng, 3, 6), _rand(rng, 6), _rand(rng, 6)], 1e-5)
    bn_state = ops.BatchNormState.fresh(3, np.float64)
    add("batch_norm_train", lambda x, g, b: ops.batch_norm(x, g, b, bn_state, True),
        [_rand(rng, 6, 3), _rand(rng, 3), _rand(rng, 3)], 1e-5)
    bn_eval = ops.BatchNormState(rng.standard_normal(3), 0.5 + rng.random(3))
    add("batch_norm_eval", lambda x, g, b: ops.batch_norm(x, g, b, bn_eval, False),
        [_rand(rng, 6, 3), _rand(rng, 3), _rand(rng, 3)], 1e-5)
    targets = rng.integers(0, 2, 4)
    add("softmax_cross_entropy", lambda z: ops.softmax_cross_entropy(z, targets), [_rand(rng, 4, 2)], AFFINE_TOL)

    s, b, e, heads = 3, 2, 8, 2
    mha = {}
    for n in ("q", "k", "v", "o"):
        mha[f"a.w{n}"] = Tensor(rng.standard_normal((e, e)) / np.sqrt(e), dtype=np.float64)
        mha[f"a.b{n}"] = Tensor(0.1 * rng.standard_normal(e), dtype=np.float64)
    mha_names = list(mha)

    def mha_fn(x, *ps):
        return multi_head_attention(x, dict(zip(mha_names, ps)), "a", heads)

    add("multi_head_attention", mha_fn, [_rand(rng, s, b, e)] + [mha[n] for n in mha_names], COMPOSITE_TOL,
        zero=[1 + mha_names.index("a.bk")])

    enc = _encoder_params(rng, "l", e, 16)
    enc_names = list(enc)

    def enc_fn(x, *ps):
        return encoder_layer(x, dict(zip(enc_names, ps)), "l", heads)

    add("encoder_layer", enc_fn, [_rand(rng, s, b, e)] + [enc[n] for n in enc_names], COMPOSITE_TOL,
        zero=[1 + enc_names.index("l.attn.bk")])
    out.append(GradResult("edgeformer_toy", toy_model_check(seed), COMPOSITE_TOL))
    return out
