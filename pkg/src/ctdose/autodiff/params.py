"""Parameter store, Adam, and the named-tensor checkpoint format.

Checkpoint layout: an ASCII header followed by one contiguous block of
little-endian float32 values::

    CTDOSE-CHECKPOINT 1
    meta <key> <value>                  (zero or more)
    tensor <name> <offset> <d0,d1,...>  (offset counted in floats; '-' for 0-d)
    end
    <payload>
"""

from __future__ import annotations

from collections import OrderedDict
from pathlib import Path

import numpy as np

from ..errors import DivergenceError, IngestionError, ParameterError
from .tensor import Tensor

MAGIC = "CTDOSE-CHECKPOINT 1"


class NetworkParams:
    """Named float32 parameters with Adam moments."""

    def __init__(self):
        self.params: OrderedDict[str, Tensor] = OrderedDict()
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.step = 0

    def add(self, name, value):
        if name in self.params:
            raise ParameterError(f"duplicate parameter name {name!r}")
        t = Tensor(np.asarray(value, dtype=np.float32), requires_grad=True, name=name)
        self.params[name] = t
        self.m[name] = np.zeros_like(t.data)
        self.v[name] = np.zeros_like(t.data)
        return t

    def __getitem__(self, name):
        return self.params[name]

    def __iter__(self):
        return iter(self.params.items())

    def __len__(self):
        return len(self.params)

    def zero_grad(self):
        for t in self.params.values():
            t.grad = None

    def grads(self):
        return {name: (t.grad if t.grad is not None else np.zeros_like(t.data))
                for name, t in self.params.items()}

    def n_values(self):
        return sum(t.data.size for t in self.params.values())

    def state(self):
        """Flat named-array view including optimiser moments."""
        out = OrderedDict()
        for name, t in self.params.items():
            out[name] = t.data
        for name in self.params:
            out[f"adam.m/{name}"] = self.m[name]
            out[f"adam.v/{name}"] = self.v[name]
        return out

    def load_state(self, arrays, step=0):
        for name, t in self.params.items():
            if name not in arrays:
                raise IngestionError(f"checkpoint lacks parameter {name!r}")
            if arrays[name].shape != t.shape:
                raise IngestionError(f"parameter {name!r}: shape {arrays[name].shape} != {t.shape}")
            t.data = arrays[name].astype(np.float32, copy=True)
            self.m[name] = arrays.get(f"adam.m/{name}", np.zeros_like(t.data)).astype(np.float32, copy=True)
            self.v[name] = arrays.get(f"adam.v/{name}", np.zeros_like(t.data)).astype(np.float32, copy=True)
            t.grad = None
        self.step = int(step)


def adam_step(params: NetworkParams, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
    """One Adam update; zeroes gradients afterwards.

    Raises DivergenceError before touching anything if a gradient is
    non-finite.
    """
    grads = params.grads()
    bad = {name: int(np.count_nonzero(~np.isfinite(g))) for name, g in grads.items()
           if not np.all(np.isfinite(g))}
    if bad:
        raise DivergenceError(f"non-finite gradients at step {params.step + 1}: {bad}")
    params.step += 1
    t = params.step
    for name, tensor in params.params.items():
        g = grads[name].astype(np.float64)
        m = beta1 * params.m[name].astype(np.float64) + (1.0 - beta1) * g
        v = beta2 * params.v[name].astype(np.float64) + (1.0 - beta2) * g * g
        m_hat = m / (1.0 - beta1**t)
        v_hat = v / (1.0 - beta2**t)
        tensor.data = (tensor.data.astype(np.float64) - lr * m_hat / (np.sqrt(v_hat) + eps)).astype(np.float32)
        params.m[name] = m.astype(np.float32)
        params.v[name] = v.astype(np.float32)
        tensor.grad = None
    return params


def save_checkpoint(path, arrays, meta=None):
    """Write named arrays (cast to float32) and string metadata."""
    path = Path(path)
    lines = [MAGIC]
    for key, value in (meta or {}).items():
        if any(ch.isspace() for ch in str(key)) or "\n" in str(value):
            raise ParameterError(f"metadata key/value not representable: {key!r}")
        lines.append(f"meta {key} {value}")
    blocks = []
    offset = 0
    for name, arr in arrays.items():
        if any(ch.isspace() for ch in name):
            raise ParameterError(f"tensor name contains whitespace: {name!r}")
        arr = np.asarray(arr, dtype="<f4")  # ascontiguousarray would promote 0-d to 1-d
        dims = ",".join(str(d) for d in arr.shape) or "-"
        lines.append(f"tensor {name} {offset} {dims}")
        blocks.append(arr.tobytes())
        offset += arr.size
    lines.append("end")
    with open(path, "wb") as fh:
        fh.write(("\n".join(lines) + "\n").encode("ascii"))
        for blob in blocks:
            fh.write(blob)
    return path


def load_checkpoint(path):
    """Inverse of :func:`save_checkpoint`: returns ``(arrays, meta)``."""
    path = Path(path)
    raw = path.read_bytes()
    marker = b"\nend\n"
    cut = raw.find(marker)
    if not raw.startswith(MAGIC.encode()) or cut < 0:
        raise IngestionError(f"{path}: not a ctdose checkpoint")
    header = raw[:cut].decode("ascii").splitlines()[1:]
    payload = np.frombuffer(raw[cut + len(marker):], dtype="<f4")
    arrays, meta = OrderedDict(), {}
    for line in header:
        kind, rest = line.split(" ", 1)
        if kind == "meta":
            key, _, value = rest.partition(" ")
            meta[key] = value
        elif kind == "tensor":
            name, offset, dims = rest.split(" ")
            shape = () if dims == "-" else tuple(int(d) for d in dims.split(","))
            count = int(np.prod(shape)) if shape else 1
            start = int(offset)
            if start + count > payload.size:
                raise IngestionError(f"{path}: tensor {name!r} runs past end of payload")
            arrays[name] = payload[start:start + count].reshape(shape).astype(np.float32)
        else:
            raise IngestionError(f"{path}: unknown header line {line!r}")
    return arrays, meta
