from __future__ import annotations

import numpy as np

from . import ops
from .tensor import Tape, Tensor, no_tape


def _scalarize(out: Tensor, cotangent: np.ndarray | None) -> Tensor:
    if out.data.size == 1:
        return ops.reshape(out, ())
    return ops.sum(ops.mul(out, Tensor(cotangent)))


def grad_check(fn, inputs: list[Tensor], h: float = 1e-5, seed: int = 0, zero_inputs=()) -> float:
    """Max relative error between reverse-mode and central-difference gradients.

    `fn(*inputs)` must return a Tensor; non-scalar outputs are contracted with a
    fixed random cotangent. Inputs should be float64. The relative error of each
    coordinate is |a - n| / max(|a|, |n|, 1e-8).

    Inputs whose positions are listed in `zero_inputs` have a gradient that is
    identically zero (e.g. the attention key bias, which shifts all scores of a
    query equally). Central differences only return rounding noise there, so
    those inputs are checked absolutely instead: |a| <= 1e-12 and |n| <= 1e-8,
    with any violation reported as max(|a|, |n|) / 1e-8.
    """
    zero_inputs = set(zero_inputs)
    for t in inputs:
        if t.dtype != np.float64:
            raise TypeError("grad_check requires float64 inputs")
        t.requires_grad = True
        t.grad = None

    with no_tape():
        probe = fn(*inputs)
    cot = None
    if probe.data.size != 1:
        cot = np.random.default_rng(seed).standard_normal(probe.shape)

    with Tape() as tape:
        loss = _scalarize(fn(*inputs), cot)
    tape.backward(loss)
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in inputs]

    def f() -> float:
        with no_tape():
            return float(_scalarize(fn(*inputs), cot).data)

    worst = 0.0
    for pos, (t, a) in enumerate(zip(inputs, analytic)):
        flat = t.data.reshape(-1)
        af = a.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = f()
            flat[i] = orig - h
            fm = f()
            flat[i] = orig
            num = (fp - fm) / (2 * h)
            if pos in zero_inputs:
                ok = abs(af[i]) <= 1e-12 and abs(num) <= 1e-8
                err = 0.0 if ok else max(abs(af[i]), abs(num)) / 1e-8
            else:
                err = abs(af[i] - num) / max(abs(af[i]), abs(num), 1e-8)
            worst = max(worst, err)
    return worst
