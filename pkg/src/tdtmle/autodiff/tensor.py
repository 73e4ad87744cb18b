"""Dense float64 tensors with a reverse-mode tape.

A ``Tape`` records primitive operations in execution order; ``backward``
replays it in reverse, accumulating gradients additively on fan-out.
Recording only happens inside a ``with Tape():`` block, so plain forward
evaluation (model inference, finite-difference probes) carries no tape
overhead.  Backward functions must never mutate their incoming gradient
arrays; accumulation always allocates.
"""

import threading

import numpy as np


class ShapeError(ValueError):
    """Raised when primitive inputs are not shape-compatible."""


class GradientError(FloatingPointError):
    """Raised when backward produces non-finite gradients."""


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "op")

    def __init__(self, data, requires_grad=False, op="leaf"):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self.op = op

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def item(self):
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, op={self.op!r}, grad={self.requires_grad})"

    # Arithmetic overloads are attached by tdtmle.autodiff.ops.


class Node:
    __slots__ = ("out", "name", "backward_fn")

    def __init__(self, out, name, backward_fn):
        self.out = out
        self.name = name
        self.backward_fn = backward_fn


class _TapeState(threading.local):
    def __init__(self):
        self.stack = []


_STATE = _TapeState()


class Tape:
    """Ordered record of primitives; inputs always precede consumers."""

    __slots__ = ("nodes",)

    def __init__(self):
        self.nodes = []

    def push(self, out, name, backward_fn):
        out.requires_grad = True
        out.op = name
        self.nodes.append(Node(out, name, backward_fn))

    def __enter__(self):
        _STATE.stack.append(self)
        return self

    def __exit__(self, *exc):
        popped = _STATE.stack.pop()
        assert popped is self
        return False

    def __len__(self):
        return len(self.nodes)


def active_tape():
    return _STATE.stack[-1] if _STATE.stack else None


def accumulate(tensor, g):
    if tensor.grad is None:
        tensor.grad = g
    else:
        tensor.grad = tensor.grad + g


def backward(tape, loss, params=None):
    """Populate ``.grad`` on every tensor reachable from ``loss``.

    ``loss`` must be a scalar recorded on ``tape``.  When ``params`` is
    given their gradients are checked for finiteness afterwards; on
    failure the first offending node (nearest the loss) is named.
    """
    if loss.data.shape != ():
        raise ShapeError(f"backward requires a scalar loss, got shape {loss.data.shape}")
    loss.grad = np.ones((), dtype=np.float64)
    for node in reversed(tape.nodes):
        if node.out.grad is None:
            continue
        node.backward_fn(node.out.grad)
    if params is not None:
        bad = [p for p in params if p.grad is not None and not np.all(np.isfinite(p.grad))]
        if bad:
            for node in reversed(tape.nodes):
                if node.out.grad is not None and not np.all(np.isfinite(node.out.grad)):
                    raise GradientError(
                        f"non-finite gradient flowing out of node {node.name!r}"
                    )
            raise GradientError("non-finite parameter gradient of unknown origin")
