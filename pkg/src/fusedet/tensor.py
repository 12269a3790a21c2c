"""Minimal dense-tensor reverse-mode autodiff engine.

Tensors wrap float64 numpy arrays. Differentiable ops record a backward
closure on the active :class:`Tape`; calling ``Tape.backward(loss)`` replays
the closures in exact reverse execution order. With no tape active, ops run
in plain inference mode and record nothing.

Gradients accumulate additively into ``.grad`` buffers; running a second
forward/backward on the same parameters without ``zero_grad`` adds to the
existing gradients (documented semantics, relied upon for batching).
"""

from __future__ import annotations

import threading

import numpy as np

_tls = threading.local()


def active_tape():
    """Return the innermost active Tape for this thread, or None."""
    stack = getattr(_tls, "stack", None)
    if not stack:
        return None
    return stack[-1]


class Tape:
    """Ordered record of backward closures for one forward pass.

    Single-threaded by design; independent tapes may live on separate
    threads. Use as a context manager around the forward pass.
    """

    def __init__(self):
        self._nodes = []

    def __enter__(self):
        stack = getattr(_tls, "stack", None)
        if stack is None:
            stack = _tls.stack = []
        stack.append(self)
        return self

    def __exit__(self, *exc):
        _tls.stack.pop()
        return False

    def record(self, backward_fn):
        self._nodes.append(backward_fn)

    def clear(self):
        """Drop all recorded closures (and their saved intermediates)."""
        self._nodes = []

    def backward(self, loss: "Tensor"):
        """Seed d(loss)/d(loss)=1 and run all closures in reverse order."""
        if loss.data.size != 1:
            raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
        loss.ensure_grad()
        loss.grad += 1.0
        for fn in reversed(self._nodes):
            fn()


class Tensor:
    """Dense float64 array with optional gradient participation."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None

    @property
    def shape(self):
        return self.data.shape

    def ensure_grad(self):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        return self.grad

    def zero_grad(self):
        self.grad = None

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # operator sugar; scalars and arrays are wrapped as constants
    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other))

    def __rmul__(self, other):
        return mul(_as_tensor(other), self)

    def __truediv__(self, other):
        return div(self, _as_tensor(other))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _track(*inputs: Tensor) -> bool:
    """True if the active tape should record an op over these inputs."""
    if active_tape() is None:
        return False
    return any(t.requires_grad for t in inputs)


def _make_out(data, inputs) -> Tensor:
    out = Tensor(data)
    out.requires_grad = any(t.requires_grad for t in inputs)
    return out


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    """Sum-reduce a broadcasted gradient back to the operand's shape."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------------------
# binary ops


def add(a: Tensor, b: Tensor) -> Tensor:
    out = _make_out(a.data + b.data, (a, b))
    if _track(a, b):

        def bwd():
            if a.requires_grad:
                a.ensure_grad()
                a.grad += _unbroadcast(out.grad, a.data.shape)
            if b.requires_grad:
                b.ensure_grad()
                b.grad += _unbroadcast(out.grad, b.data.shape)

        active_tape().record(bwd)
    return out


def sub(a: Tensor, b: Tensor) -> Tensor:
    out = _make_out(a.data - b.data, (a, b))
    if _track(a, b):

        def bwd():
            if a.requires_grad:
                a.ensure_grad()
                a.grad += _unbroadcast(out.grad, a.data.shape)
            if b.requires_grad:
                b.ensure_grad()
                b.grad -= _unbroadcast(out.grad, b.data.shape)

        active_tape().record(bwd)
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = _make_out(a.data * b.data, (a, b))
    if _track(a, b):
        a_data, b_data = a.data, b.data

        def bwd():
            if a.requires_grad:
                a.ensure_grad()
                a.grad += _unbroadcast(out.grad * b_data, a.data.shape)
            if b.requires_grad:
                b.ensure_grad()
                b.grad += _unbroadcast(out.grad * a_data, b.data.shape)

        active_tape().record(bwd)
    return out


def div(a: Tensor, b: Tensor) -> Tensor:
    out = _make_out(a.data / b.data, (a, b))
    if _track(a, b):
        a_data, b_data = a.data, b.data

        def bwd():
            if a.requires_grad:
                a.ensure_grad()
                a.grad += _unbroadcast(out.grad / b_data, a.data.shape)
            if b.requires_grad:
                b.ensure_grad()
                b.grad += _unbroadcast(-out.grad * a_data / (b_data * b_data), b.data.shape)

        active_tape().record(bwd)
    return out


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.data.shape} x {b.data.shape}")
    out = _make_out(a.data @ b.data, (a, b))
    if _track(a, b):
        a_data, b_data = a.data, b.data

        def bwd():
            if a.requires_grad:
                a.ensure_grad()
                a.grad += out.grad @ b_data.T
            if b.requires_grad:
                b.ensure_grad()
                b.grad += a_data.T @ out.grad

        active_tape().record(bwd)
    return out


# ---------------------------------------------------------------------------
# unary ops


def _unary(a: Tensor, fwd_data, dgrad_fn) -> Tensor:
    out = _make_out(fwd_data, (a,))
    if _track(a):

        def bwd():
            a.ensure_grad()
            a.grad += out.grad * dgrad_fn()

        active_tape().record(bwd)
    return out


def neg(a: Tensor) -> Tensor:
    return _unary(a, -a.data, lambda: -1.0)


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _unary(a, np.where(mask, a.data, 0.0), lambda: mask.astype(np.float64))


def sigmoid(a: Tensor) -> Tensor:
    y = 1.0 / (1.0 + np.exp(-a.data))
    return _unary(a, y, lambda: y * (1.0 - y))


def exp(a: Tensor) -> Tensor:
    y = np.exp(a.data)
    return _unary(a, y, lambda: y)


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise ValueError("log of non-positive input")
    return _unary(a, np.log(a.data), lambda: 1.0 / a.data)


def sin(a: Tensor) -> Tensor:
    return _unary(a, np.sin(a.data), lambda: np.cos(a.data))


def cos(a: Tensor) -> Tensor:
    return _unary(a, np.cos(a.data), lambda: -np.sin(a.data))


def sqrt(a: Tensor) -> Tensor:
    y = np.sqrt(a.data)
    return _unary(a, y, lambda: 0.5 / y)


def absolute(a: Tensor) -> Tensor:
    # subgradient 0 at exactly 0
    return _unary(a, np.abs(a.data), lambda: np.sign(a.data))


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp values; gradient is identity strictly inside [lo, hi], zero outside."""
    inside = (a.data > lo) & (a.data < hi)
    return _unary(a, np.clip(a.data, lo, hi), lambda: inside.astype(np.float64))


# ---------------------------------------------------------------------------
# reductions / structure


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = _make_out(a.data.sum(axis=axis, keepdims=keepdims), (a,))
    if _track(a):
        shape = a.data.shape

        def bwd():
            a.ensure_grad()
            g = out.grad
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            a.grad += np.broadcast_to(g, shape)

        active_tape().record(bwd)
    return out


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.data.size if axis is None else a.data.shape[axis]
    return tsum(a, axis=axis, keepdims=keepdims) * (1.0 / n)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    """Numerically stabilized softmax along one axis."""
    if not np.all(np.isfinite(a.data)):
        raise ValueError("softmax requires finite inputs")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)
    out = _make_out(y, (a,))
    if _track(a):

        def bwd():
            a.ensure_grad()
            g = out.grad
            a.grad += y * (g - (g * y).sum(axis=axis, keepdims=True))

        active_tape().record(bwd)
    return out


def reshape(a: Tensor, shape) -> Tensor:
    out = _make_out(a.data.reshape(shape), (a,))
    if _track(a):
        orig = a.data.shape

        def bwd():
            a.ensure_grad()
            a.grad += out.grad.reshape(orig)

        active_tape().record(bwd)
    return out


def transpose(a: Tensor) -> Tensor:
    out = _make_out(a.data.T, (a,))
    if _track(a):

        def bwd():
            a.ensure_grad()
            a.grad += out.grad.T

        active_tape().record(bwd)
    return out


def concat(tensors, axis: int = -1) -> Tensor:
    out = _make_out(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors))
    if _track(*tensors):
        sizes = [t.data.shape[axis] for t in tensors]
        splits = np.cumsum(sizes)[:-1]

        def bwd():
            parts = np.split(out.grad, splits, axis=axis)
            for t, g in zip(tensors, parts):
                if t.requires_grad:
                    t.ensure_grad()
                    t.grad += g

        active_tape().record(bwd)
    return out


def gather_rows(a: Tensor, idx) -> Tensor:
    """Select rows by integer index.

    Non-differentiable through the indices; gradients scatter-add back into
    the gathered rows of the source.
    """
    idx = np.asarray(idx, dtype=np.intp)
    out = _make_out(a.data[idx], (a,))
    if _track(a):

        def bwd():
            a.ensure_grad()
            np.add.at(a.grad, idx, out.grad)

        active_tape().record(bwd)
    return out


def slice_cols(a: Tensor, start: int, stop: int) -> Tensor:
    out = _make_out(a.data[:, start:stop], (a,))
    if _track(a):

        def bwd():
            a.ensure_grad()
            a.grad[:, start:stop] += out.grad

        active_tape().record(bwd)
    return out


# ---------------------------------------------------------------------------
# finite-difference gradient oracle


def check_gradients(f, inputs, step: float = 1e-5, tol: float = 1e-4) -> dict:
    """Compare autodiff gradients of scalar-valued ``f(*inputs)`` against
    central finite differences.

    Returns a report dict: per-input max relative error, overall max, and a
    boolean ``passed``. Relative error uses max(|g_ad|, |g_fd|, 1) as the
    denominator so near-zero gradients are compared absolutely.
    """
    for t in inputs:
        t.zero_grad()
    with Tape() as tape:
        loss = f(*inputs)
        if not np.isfinite(loss.data).all():
            return {"passed": False, "max_rel_err": np.inf, "per_input": [], "error": "non-finite loss"}
        tape.backward(loss)
    ad_grads = [np.array(t.grad) if t.grad is not None else np.zeros_like(t.data) for t in inputs]

    per_input = []
    worst = 0.0
    for t, g_ad in zip(inputs, ad_grads):
        if not t.requires_grad:
            continue
        g_fd = np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        fd_flat = g_fd.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            hi = f(*inputs).item()
            flat[i] = orig - step
            lo = f(*inputs).item()
            flat[i] = orig
            fd_flat[i] = (hi - lo) / (2.0 * step)
        denom = np.maximum(np.maximum(np.abs(g_ad), np.abs(g_fd)), 1.0)
        err = float(np.max(np.abs(g_ad - g_fd) / denom)) if flat.size else 0.0
        per_input.append(err)
        worst = max(worst, err)
    return {"passed": worst < tol, "max_rel_err": worst, "per_input": per_input}
