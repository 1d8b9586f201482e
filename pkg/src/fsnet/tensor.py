"""Dense float tensors with reverse-mode automatic differentiation.

Every differentiable operation appends one record to the active tape.
Calling :func:`backward` on a scalar loss replays the tape in reverse,
accumulating gradients into each participating tensor that has
``requires_grad=True``.  Storage defaults to float32 with float32
accumulation; :func:`set_default_dtype` switches the whole engine to
float64 for high-precision gradient checks.

A tape (and the tensors recorded on it) must stay on one thread for the
duration of a forward/backward pair; tensors with no live tape reference
may move freely between threads.
"""

from __future__ import annotations

import numpy as np

_DTYPES = (np.float32, np.float64)

_default_dtype = np.float32
_grad_enabled = True
_active_tape = None


def set_default_dtype(dtype):
    """Set the engine storage dtype (float32 or float64)."""
    global _default_dtype
    dtype = np.dtype(dtype).type
    if dtype not in _DTYPES:
        raise ValueError(f"unsupported dtype {dtype!r}; use float32 or float64")
    _default_dtype = dtype


def default_dtype():
    return _default_dtype


class Tape:
    """Ordered record of executed ops for one forward pass.

    Reverse iteration over the records is a valid topological order of the
    op graph, so backward simply walks the list once, back to front.
    """

    __slots__ = ("_records", "consumed")

    def __init__(self):
        self._records = []
        self.consumed = False

    def __len__(self):
        return len(self._records)

    def record(self, out, backward_fn):
        self._records.append((out, backward_fn))


def _current_tape():
    global _active_tape
    if _active_tape is None or _active_tape.consumed:
        _active_tape = Tape()
    return _active_tape


class no_grad:
    """Context manager that disables op recording (inference mode)."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


def grad_enabled():
    return _grad_enabled


class Tensor:
    """N-dimensional float array, optionally tracked by the autodiff tape."""

    __slots__ = ("data", "grad", "requires_grad", "tape")

    def __init__(self, data, requires_grad=False, dtype=None):
        self.data = np.asarray(data, dtype=dtype or _default_dtype)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.tape = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        return float(self.data.reshape(()))

    def zero_grad(self):
        self.grad = None

    def backward(self):
        backward(self)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def sum(self):
        return tsum(self)

    def mean(self):
        return tmean(self)


def make_op(out_data, inputs, backward_fn):
    """Wrap ``out_data`` as a Tensor, recording ``backward_fn`` when needed.

    ``backward_fn`` receives the gradient of the loss with respect to the
    output (an ndarray) and must accumulate into the inputs via
    :func:`accumulate_grad`.
    """
    requires = _grad_enabled and any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=requires, dtype=out_data.dtype)
    if requires:
        tape = _current_tape()
        tape.record(out, backward_fn)
        out.tape = tape
    return out


def accumulate_grad(t, g):
    """Add ``g`` into ``t.grad``, allocating on first touch."""
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def backward(loss):
    """Populate gradients of everything the scalar ``loss`` depends on.

    Raises if the loss is not a scalar or if its tape has already been
    consumed by a previous backward call.
    """
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = loss.tape
    if tape is None:
        # leaf scalar: no recorded ops, gradient is trivially 1
        if loss.requires_grad:
            loss.grad = np.ones_like(loss.data)
        return
    if tape.consumed:
        raise RuntimeError("backward called twice on a consumed tape")
    tape.consumed = True
    loss.grad = np.ones_like(loss.data)
    for out, fn in reversed(tape._records):
        if out.grad is not None:
            fn(out.grad)
    global _active_tape
    if _active_tape is tape:
        _active_tape = None


# ---------------------------------------------------------------------------
# elementwise and reduction primitives


def _check_same_shape(a, b, op):
    if a.shape != b.shape:
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def add(a, b):
    """Elementwise sum of two same-shape tensors."""
    _check_same_shape(a, b, "add")
    out_data = a.data + b.data

    def bwd(g):
        accumulate_grad(a, g)
        accumulate_grad(b, g)

    return make_op(out_data, (a, b), bwd)


def mul(a, b):
    """Elementwise product; ``b`` may be a python scalar."""
    if isinstance(b, (int, float)):
        scalar = a.data.dtype.type(b)
        out_data = a.data * scalar

        def bwd_scalar(g):
            accumulate_grad(a, g * scalar)

        return make_op(out_data, (a,), bwd_scalar)

    _check_same_shape(a, b, "mul")
    out_data = a.data * b.data

    def bwd(g):
        accumulate_grad(a, g * b.data)
        accumulate_grad(b, g * a.data)

    return make_op(out_data, (a, b), bwd)


def tsum(x):
    """Sum of all elements, as a scalar tensor."""
    out_data = np.asarray(x.data.sum(), dtype=x.data.dtype)

    def bwd(g):
        accumulate_grad(x, np.broadcast_to(g, x.shape))

    return make_op(out_data, (x,), bwd)


def tmean(x):
    """Mean of all elements, as a scalar tensor."""
    n = x.data.dtype.type(x.size)
    out_data = np.asarray(x.data.mean(), dtype=x.data.dtype)

    def bwd(g):
        accumulate_grad(x, np.broadcast_to(g / n, x.shape))

    return make_op(out_data, (x,), bwd)
