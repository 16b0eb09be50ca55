"""Dense tensors, trainable parameters, and the reverse-mode tape.

Tensors wrap a numpy array of rank <= 4 in float32 (default) or float64
(gradient-check mode).  Operations on tensors live in :mod:`lmiinet.ops`
and :mod:`lmiinet.conv`; when a :class:`Tape` is active on the current
thread they append one :class:`TapeNode` per operation, and
:func:`backward` replays the tape in reverse to accumulate gradients.

Tensors are treated as immutable once created.  The only mutable buffers
are ``Parameter.grad`` arrays, which are written during backward sweeps
and optimizer steps.
"""

from __future__ import annotations

import threading

import numpy as np

from .errors import ShapeError, UsageError

DEFAULT_DTYPE = np.float32

_SUPPORTED_DTYPES = (np.float32, np.float64)


class Tensor:
    """Dense array of rank <= 4, row-major, uniform float dtype."""

    __slots__ = ("data",)

    def __init__(self, data, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in _SUPPORTED_DTYPES:
            arr = arr.astype(DEFAULT_DTYPE)
        if arr.dtype not in _SUPPORTED_DTYPES:
            raise ShapeError(f"unsupported dtype {arr.dtype}; use float32 or float64")
        if arr.ndim > 4:
            raise ShapeError(f"rank {arr.ndim} tensor not supported (max 4)")
        self.data = arr

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    @property
    def ndim(self):
        return self.data.ndim

    def item(self) -> float:
        if self.data.size != 1:
            raise UsageError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        """Read-only view of the underlying array."""
        return self.data

    def assert_finite(self, what: str = "tensor") -> "Tensor":
        """Reject NaN/Inf corruption; returns self for chaining."""
        if not np.all(np.isfinite(self.data)):
            raise ShapeError(f"{what} contains non-finite values")
        return self

    def __repr__(self):
        return f"Tensor(shape={tuple(self.shape)}, dtype={self.data.dtype.name})"

    # Arithmetic sugar is attached by lmiinet.ops at import time so the
    # operator table and the tape-recording functions stay in one module.


def zeros(shape, dtype=DEFAULT_DTYPE) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype))


def ones(shape, dtype=DEFAULT_DTYPE) -> Tensor:
    return Tensor(np.ones(shape, dtype=dtype))


class Parameter:
    """A named trainable tensor with a zero-initialized gradient buffer."""

    __slots__ = ("value", "grad", "name", "trainable", "decay")

    def __init__(self, data, name="", trainable=True, decay=True, dtype=None):
        self.value = data if isinstance(data, Tensor) else Tensor(data, dtype=dtype)
        self.grad = np.zeros_like(self.value.data)
        self.name = name
        self.trainable = trainable
        # decay=False exempts biases and normalization affines from weight decay
        self.decay = decay

    @property
    def shape(self):
        return self.value.shape

    def zero_grad(self):
        self.grad.fill(0.0)

    def __repr__(self):
        return f"Parameter({self.name or '<unnamed>'}, shape={tuple(self.shape)})"


class TapeNode:
    """One recorded operation: op kind, input/output ids, backward rule."""

    __slots__ = ("op", "input_ids", "output_id", "backward")

    def __init__(self, op, input_ids, output_id, backward):
        self.op = op
        self.input_ids = input_ids
        self.output_id = output_id
        self.backward = backward


_tls = threading.local()


def _tape_stack():
    stack = getattr(_tls, "stack", None)
    if stack is None:
        stack = []
        _tls.stack = stack
    return stack


def active_tape():
    """The innermost tape open on this thread, or None."""
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tape:
    """Append-only, topologically ordered record of operations.

    Use as a context manager around a forward pass, then call
    :func:`backward` (or ``tape.run_backward``) exactly once::

        with Tape() as tape:
            loss = model_loss(...)
        backward(tape, loss, net.parameters())
    """

    def __init__(self):
        self.nodes: list[TapeNode] = []
        self.consumed = False
        self._grads: dict[int, np.ndarray] | None = None

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        stack = _tape_stack()
        if not stack or stack[-1] is not self:
            raise UsageError("tape context exited out of order")
        stack.pop()
        return False

    def record(self, op, inputs, output, backward_fn):
        if self.consumed:
            raise UsageError("cannot record onto a consumed tape")
        self.nodes.append(
            TapeNode(op, tuple(id(t) for t in inputs), id(output), backward_fn)
        )

    def run_backward(self, root: Tensor):
        """Reverse sweep seeding d(root)/d(root) = 1; grads accumulate by addition."""
        if self.consumed:
            raise UsageError("backward called twice on the same tape")
        if not self.nodes:
            raise UsageError("backward on an empty tape")
        if root.size != 1:
            raise UsageError(f"backward root must be scalar, got shape {root.shape}")
        grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
        for node in reversed(self.nodes):
            gout = grads.get(node.output_id)
            if gout is None:
                continue
            for input_id, gin in zip(node.input_ids, node.backward(gout)):
                if gin is None:
                    continue
                acc = grads.get(input_id)
                if acc is None:
                    grads[input_id] = gin
                else:
                    grads[input_id] = acc + gin
        self._grads = grads
        self.consumed = True

    def grad(self, tensor: Tensor) -> np.ndarray:
        """Gradient of the root w.r.t. ``tensor``; zeros if it was off-path."""
        if self._grads is None:
            raise UsageError("grad queried before backward")
        g = self._grads.get(id(tensor))
        if g is None:
            return np.zeros_like(tensor.data)
        return g


def backward(tape: Tape, root: Tensor, parameters=()):
    """Run the reverse sweep and add gradients into each parameter's buffer.

    Parameters whose values never entered the tape receive zero (their
    buffers are left untouched, matching zero accumulation).
    """
    tape.run_backward(root)
    for p in parameters:
        g = tape._grads.get(id(p.value))
        if g is not None:
            p.grad += g
