"""Dense tensors with tape-based reverse-mode automatic differentiation.

A Tape records every operation executed while it is active (it is a context
manager). backward() replays the record in reverse, which is a valid reverse
topological order because operands always exist before the op that consumes
them. Gradients accumulate in a dict keyed by tensor identity and are
deposited into Parameter.gradient for the leaves that asked for them, so the
same machinery drives plain gradient checks and the alternating GAN phases
(pass `parameters=` to route gradients into one subset and starve the rest).
"""

from __future__ import annotations

import numpy as np

DEFAULT_DTYPE = np.float32


class TapeConsumedError(RuntimeError):
    """A tape was used for a second backward (or forward) pass."""


class GraphError(ValueError):
    """Backward was asked something the recorded graph cannot answer."""


_tape_stack: list["Tape"] = []

# Finite-value checking after every op. Costs one pass over each result;
# training keeps it on, tight benchmark loops may switch it off.
_finite_checks = True


def set_finite_checks(enabled):
    """Toggle NaN/Inf screening of op results. Returns the previous setting."""
    global _finite_checks
    previous = _finite_checks
    _finite_checks = bool(enabled)
    return previous


def _check_finite(data):
    if _finite_checks and not np.isfinite(data).all():
        raise FloatingPointError("operation produced non-finite values")


def _current_tape():
    return _tape_stack[-1] if _tape_stack else None


def _unbroadcast(grad, shape):
    # Sum out the axes numpy broadcasting added or stretched.
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


class Tape:
    """Ordered operation record for one forward/backward cycle.

    Entering pushes the tape onto a stack; ops record onto the innermost
    active tape. A tape is single-use: after backward() it refuses both
    another backward and further recording.
    """

    def __init__(self):
        self._nodes = []
        self._consumed = False

    def __enter__(self):
        _tape_stack.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _tape_stack.pop()
        if popped is not self:
            raise GraphError("tapes exited out of order")
        return False

    def __len__(self):
        return len(self._nodes)

    @property
    def consumed(self):
        return self._consumed


def _record(out, parents, grad_fn):
    """Attach `out` to the active tape if any parent wants gradients.

    grad_fn(grad_out, needs) returns one gradient (or None) per parent;
    `needs` tells it which parents actually require a value this sweep, so
    frozen networks never pay for gradients that would be thrown away.
    """
    tape = _current_tape()
    if tape is not None and any(p.requires_grad for p in parents):
        if tape._consumed:
            raise TapeConsumedError("tape already consumed by backward; use a fresh tape")
        out.requires_grad = True
        out._tape = tape
        tape._nodes.append((out, parents, grad_fn))
    return out


class Tensor:
    """N-d float array plus the hooks needed to record onto a Tape.

    float32 by default; pass float64 data (or dtype=np.float64) to run the
    whole graph in 64-bit, which gradient checking requires. Outside an
    active tape every method is a plain forward computation.
    """

    __slots__ = ("data", "requires_grad", "_tape", "_param")

    def __init__(self, data, dtype=None, requires_grad=False):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype != np.float32 and arr.dtype != np.float64:
            arr = arr.astype(DEFAULT_DTYPE)
        _check_finite(arr)
        self.data = arr
        self.requires_grad = requires_grad
        self._tape = None
        self._param = None

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

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    def item(self):
        return float(self.data)

    def detach(self):
        """Same values, cut loose from any recorded history."""
        return Tensor(self.data)

    # ---- arithmetic -----------------------------------------------------

    def __add__(self, other):
        if isinstance(other, Tensor):
            out = Tensor(self.data + other.data)

            def grad_fn(g, needs, a=self, b=other):
                return (
                    _unbroadcast(g, a.data.shape) if needs[0] else None,
                    _unbroadcast(g, b.data.shape) if needs[1] else None,
                )

            return _record(out, (self, other), grad_fn)
        out = Tensor(self.data + other)

        def grad_fn(g, needs):
            return (g,)

        return _record(out, (self,), grad_fn)

    __radd__ = __add__

    def __neg__(self):
        out = Tensor(-self.data)

        def grad_fn(g, needs):
            return (-g,)

        return _record(out, (self,), grad_fn)

    def __sub__(self, other):
        if isinstance(other, Tensor):
            out = Tensor(self.data - other.data)

            def grad_fn(g, needs, a=self, b=other):
                return (
                    _unbroadcast(g, a.data.shape) if needs[0] else None,
                    _unbroadcast(-g, b.data.shape) if needs[1] else None,
                )

            return _record(out, (self, other), grad_fn)
        out = Tensor(self.data - other)

        def grad_fn(g, needs):
            return (g,)

        return _record(out, (self,), grad_fn)

    def __rsub__(self, other):
        # scalar - tensor
        out = Tensor(other - self.data)

        def grad_fn(g, needs):
            return (-g,)

        return _record(out, (self,), grad_fn)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            out = Tensor(self.data * other.data)

            def grad_fn(g, needs, a=self, b=other):
                return (
                    _unbroadcast(g * b.data, a.data.shape) if needs[0] else None,
                    _unbroadcast(g * a.data, b.data.shape) if needs[1] else None,
                )

            return _record(out, (self, other), grad_fn)
        scale = other
        out = Tensor(self.data * scale)

        def grad_fn(g, needs):
            return (g * scale,)

        return _record(out, (self,), grad_fn)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            out = Tensor(self.data / other.data)

            def grad_fn(g, needs, a=self, b=other):
                ga = _unbroadcast(g / b.data, a.data.shape) if needs[0] else None
                gb = (
                    _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape)
                    if needs[1]
                    else None
                )
                return (ga, gb)

            return _record(out, (self, other), grad_fn)
        inv = 1.0 / other
        out = Tensor(self.data * inv)

        def grad_fn(g, needs):
            return (g * inv,)

        return _record(out, (self,), grad_fn)

    def __pow__(self, exponent):
        if not isinstance(exponent, (int, float)):
            raise TypeError("only scalar exponents are supported")
        out = Tensor(self.data ** exponent)

        def grad_fn(g, needs, x=self.data, n=exponent):
            return (g * n * x ** (n - 1),)

        return _record(out, (self,), grad_fn)

    def __matmul__(self, other):
        if not isinstance(other, Tensor):
            raise TypeError("matmul requires a Tensor operand")
        if self.data.ndim != 2 or other.data.ndim != 2:
            raise GraphError(
                f"matmul expects 2-d operands, got {self.data.shape} @ {other.data.shape}"
            )
        if self.data.shape[1] != other.data.shape[0]:
            raise GraphError(
                f"matmul inner dimensions differ: {self.data.shape} @ {other.data.shape}"
            )
        out = Tensor(self.data @ other.data)

        def grad_fn(g, needs, a=self, b=other):
            return (
                g @ b.data.T if needs[0] else None,
                a.data.T @ g if needs[1] else None,
            )

        return _record(out, (self, other), grad_fn)

    # ---- elementwise math ------------------------------------------------

    def exp(self):
        out = Tensor(np.exp(self.data))

        def grad_fn(g, needs, y=out.data):
            return (g * y,)

        return _record(out, (self,), grad_fn)

    def log(self):
        out = Tensor(np.log(self.data))

        def grad_fn(g, needs, x=self.data):
            return (g / x,)

        return _record(out, (self,), grad_fn)

    def sqrt(self):
        out = Tensor(np.sqrt(self.data))

        def grad_fn(g, needs, y=out.data):
            return (g * 0.5 / y,)

        return _record(out, (self,), grad_fn)

    def abs(self):
        out = Tensor(np.abs(self.data))

        def grad_fn(g, needs, x=self.data):
            return (g * np.sign(x),)

        return _record(out, (self,), grad_fn)

    def clip(self, lower=None, upper=None):
        """Clamp values; gradient is zero outside the open interval."""
        out = Tensor(np.clip(self.data, lower, upper))
        lo = -np.inf if lower is None else lower
        hi = np.inf if upper is None else upper

        def grad_fn(g, needs, x=self.data):
            return (g * ((x > lo) & (x < hi)),)

        return _record(out, (self,), grad_fn)

    # ---- reductions / shape ----------------------------------------------

    def sum(self, axis=None, keepdims=False):
        out = Tensor(self.data.sum(axis=axis, keepdims=keepdims))

        def grad_fn(g, needs, shape=self.data.shape):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, shape),)

        return _record(out, (self,), grad_fn)

    def mean(self, axis=None, keepdims=False):
        out = Tensor(self.data.mean(axis=axis, keepdims=keepdims))
        count = self.data.size // max(out.data.size, 1)

        def grad_fn(g, needs, shape=self.data.shape, n=count):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g / n, shape),)

        return _record(out, (self,), grad_fn)

    def reshape(self, shape):
        out = Tensor(self.data.reshape(shape))

        def grad_fn(g, needs, orig=self.data.shape):
            return (g.reshape(orig),)

        return _record(out, (self,), grad_fn)


def concat(tensors, axis=1):
    """Concatenate along `axis`; backward splits the gradient back apart."""
    tensors = tuple(tensors)
    if not tensors:
        raise GraphError("concat of zero tensors")
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis))
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum(sizes[:-1])

    def grad_fn(g, needs):
        pieces = np.split(g, offsets, axis=axis)
        return tuple(p if need else None for p, need in zip(pieces, needs))

    return _record(out, tensors, grad_fn)


class Parameter:
    """Named trainable tensor with a persistent gradient accumulator."""

    __slots__ = ("name", "value", "gradient")

    def __init__(self, name, value):
        self.name = name
        self.value = Tensor(value, requires_grad=True)
        self.value._param = self
        self.gradient = Tensor(np.zeros_like(self.value.data))

    def zero_grad(self):
        self.gradient.data[...] = 0

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.value.data.shape})"


def backward(tape, loss, parameters=None):
    """Reverse sweep over `tape` from scalar `loss`.

    Gradients accumulate (+=) into Parameter.gradient for every parameter
    reached, or only those in `parameters` when given; with a filter, every
    other leaf behaves as a constant. Non-parameter leaves with
    requires_grad=True opt in when no filter is set. Returns {leaf tensor:
    gradient array}. Consumes the tape: a second backward raises.
    """
    if tape._consumed:
        raise TapeConsumedError("backward already ran on this tape")
    tape._consumed = True
    if loss._tape is not tape:
        raise GraphError("loss was not produced under this tape")
    if loss.data.size != 1:
        raise GraphError(f"loss must be scalar, got shape {loss.data.shape}")

    allowed = None
    if parameters is not None:
        allowed = {id(p.value) for p in parameters}

    # Forward scan: mark which tensors can reach a leaf that wants gradients.
    want = {}
    leaves = {}
    for out, parents, _ in tape._nodes:
        out_wanted = False
        for p in parents:
            pid = id(p)
            pw = want.get(pid)
            if pw is None:  # first sighting as a pure input: a leaf
                if p._param is not None:
                    pw = allowed is None or pid in allowed
                else:
                    pw = allowed is None and p.requires_grad
                want[pid] = pw
                if pw:
                    leaves[pid] = p
            out_wanted = out_wanted or pw
        want[id(out)] = out_wanted

    grads = {id(loss): np.ones_like(loss.data)}
    for out, parents, grad_fn in reversed(tape._nodes):
        g = grads.pop(id(out), None)
        if g is None:
            continue
        needs = tuple(want.get(id(p), False) for p in parents)
        if not any(needs):
            continue
        parent_grads = grad_fn(g, needs)
        for p, pg, need in zip(parents, parent_grads, needs):
            if not need or pg is None:
                continue
            pid = id(p)
            held = grads.get(pid)
            grads[pid] = pg if held is None else held + pg

    # Whatever is left belongs to leaves; interior entries were all popped.
    result = {}
    for pid, g in grads.items():
        leaf = leaves.get(pid)
        if leaf is None:
            continue
        if leaf._param is not None:
            leaf._param.gradient.data += g
        result[leaf] = g
    return result
