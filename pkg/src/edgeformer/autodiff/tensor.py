from __future__ import annotations

import itertools
import threading

import numpy as np

_ids = itertools.count()
_local = threading.local()


class Tensor:
    """A numpy array that can take part in reverse-mode differentiation.

    Operations are recorded only while a `Tape` is active and at least one
    input has `requires_grad` set.
    """

    __slots__ = ("data", "grad", "requires_grad", "is_leaf", "node_id", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if dtype is None and not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self.is_leaf = True
        self.node_id = next(_ids)
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def astype(self, dtype) -> "Tensor":
        return Tensor(self.data.astype(dtype), requires_grad=self.requires_grad, name=self.name)

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"

    def __add__(self, other):
        from . import ops

        return ops.add(self, other)

    def __sub__(self, other):
        from . import ops

        return ops.sub(self, other)

    def __mul__(self, other):
        from . import ops

        return ops.mul(self, other)

    def __matmul__(self, other):
        from . import ops

        return ops.matmul(self, other)


class _Node:
    __slots__ = ("inputs", "out_id", "backward")

    def __init__(self, inputs, out_id, backward):
        self.inputs = inputs
        self.out_id = out_id
        self.backward = backward


class Tape:
    """Ordered record of executed primitives; `backward` replays it in reverse.

    Use as a context manager. Tapes are thread-local and may nest (innermost wins).
    """

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self):
        stack = getattr(_local, "stack", None)
        if stack is None:
            stack = _local.stack = []
        stack.append(self)
        return self

    def __exit__(self, *exc):
        _local.stack.pop()
        return False

    def __len__(self):
        return len(self.nodes)

    def record(self, inputs, out: Tensor, backward) -> None:
        self.nodes.append(_Node(tuple(inputs), out.node_id, backward))

    def backward(self, loss: Tensor, grad=None) -> None:
        """Accumulate d(loss)/d(leaf) into `.grad` of every leaf that requires grad."""
        seed = np.ones_like(loss.data) if grad is None else np.asarray(grad, dtype=loss.dtype)
        grads = {loss.node_id: seed}
        leaves = {}
        for node in reversed(self.nodes):
            g = grads.pop(node.out_id, None)
            if g is None:
                continue
            in_grads = node.backward(g)
            for t, gi in zip(node.inputs, in_grads):
                if gi is None or not t.requires_grad:
                    continue
                if t.is_leaf:
                    leaves[t.node_id] = t
                prev = grads.get(t.node_id)
                grads[t.node_id] = gi if prev is None else prev + gi
        if loss.is_leaf and loss.requires_grad:
            leaves[loss.node_id] = loss
        for nid, t in leaves.items():
            g = grads.get(nid)
            if g is None:
                continue
            g = np.asarray(g, dtype=t.dtype).reshape(t.shape)
            t.grad = g if t.grad is None else t.grad + g


def current_tape() -> Tape | None:
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


def no_tape():
    """Context manager that suspends recording (e.g. for finite differences)."""
    return _NoTape()


class _NoTape:
    def __enter__(self):
        stack = getattr(_local, "stack", None)
        if stack is None:
            stack = _local.stack = []
        self._saved = list(stack)
        stack.clear()
        return self

    def __exit__(self, *exc):
        _local.stack[:] = self._saved
        return False
