"""Tensor and tape for reverse-mode differentiation.

Operations executed while a :class:`Tape` is active append an entry
``(output, inputs, adjoint)`` to it.  :func:`backward` walks the entries
in reverse, calling each adjoint with the upstream gradient and
accumulating into every input that requires a gradient.
"""

from __future__ import annotations

import numpy as np

from ..errors import CTDoseError, ParameterError

_ACTIVE: list["Tape"] = []


class BackwardError(CTDoseError):
    """Backward pass requested on a consumed tape or with a bad seed."""


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_produced")

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.asarray(data)
        if self.data.dtype.kind != "f":
            self.data = self.data.astype(np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self.name = name
        self._produced = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        return float(self.data)

    def numpy(self):
        return self.data

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        tag = f" {self.name!r}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    # operator sugar, resolved lazily to avoid a circular import
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import ops
        return ops.add(self, ops.scale(as_tensor(other), -1.0))

    def __rsub__(self, other):
        from . import ops
        return ops.add(ops.scale(self, -1.0), other)

    def __mul__(self, other):
        from . import ops
        if np.isscalar(other):
            return ops.scale(self, float(other))
        return ops.mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        from . import ops
        return ops.scale(self, -1.0)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


class Tape:
    """Ordered record of executed primitives.

    Use as a context manager; tapes nest, and only the innermost one
    records.
    """

    def __init__(self):
        self.entries = []
        self.consumed = False

    def __enter__(self):
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc):
        _ACTIVE.remove(self)
        return False

    def __len__(self):
        return len(self.entries)

    def reset(self):
        self.entries = []
        self.consumed = False

    def record(self, out, inputs, adjoint):
        self.entries.append((out, inputs, adjoint))


def current_tape():
    return _ACTIVE[-1] if _ACTIVE else None


def make_output(value, inputs, adjoint, name=None):
    """Wrap ``value`` as an op output and record it if any input needs gradients.

    ``adjoint(g)`` must return one gradient (or ``None``) per input.
    """
    needs = any(t.requires_grad for t in inputs)
    out = Tensor(value, requires_grad=needs, name=name)
    tape = current_tape()
    if needs and tape is not None:
        out._produced = True
        tape.record(out, inputs, adjoint)
    return out


def backward(tape: Tape, output: Tensor, seed_gradient=None):
    """Propagate ``seed_gradient`` from ``output`` back through ``tape``.

    Gradients are accumulated into ``.grad`` of every tensor that
    requires one.  A tape can be replayed once; call :meth:`Tape.reset`
    (or record a new tape) before the next pass.
    """
    if tape.consumed:
        raise BackwardError("tape already consumed by a backward pass; reset it first")
    if seed_gradient is None:
        seed_gradient = np.ones_like(output.data)
    seed_gradient = np.asarray(seed_gradient)
    if seed_gradient.shape != output.shape:
        raise BackwardError(
            f"seed gradient shape {seed_gradient.shape} does not match output shape {output.shape}"
        )
    tape.consumed = True

    grads = {id(output): seed_gradient.astype(output.dtype, copy=True)}
    keep = {id(output): output}
    for out, inputs, adjoint in reversed(tape.entries):
        g = grads.get(id(out))
        if g is None:
            continue
        in_grads = adjoint(g)
        for t, gi in zip(inputs, in_grads):
            if gi is None or not t.requires_grad:
                continue
            if gi.shape != t.shape:
                raise ParameterError(f"adjoint produced shape {gi.shape} for input of shape {t.shape}")
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
                keep[key] = t

    for key, t in keep.items():
        g = np.asarray(grads[key], dtype=t.dtype)
        t.grad = g if t.grad is None else t.grad + g
