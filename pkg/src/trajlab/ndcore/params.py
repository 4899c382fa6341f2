"""Named parameter containers, Adam, and the TLAB binary format."""
from __future__ import annotations

import struct
from collections import OrderedDict

import numpy as np

from .tensor import Tensor

MAGIC = b"TLAB"
FORMAT_VERSION = 1


class ParameterSet:
    """Ordered label -> Tensor mapping plus Adam moment state."""

    def __init__(self):
        self._params = OrderedDict()
        self.m = {}
        self.v = {}
        self.step = 0

    def add(self, name, values):
        if name in self._params:
            raise KeyError(f"duplicate parameter {name!r}")
        t = Tensor(np.array(values, dtype=np.float64), requires_grad=True, name=name)
        self._params[name] = t
        return t

    def __getitem__(self, name):
        return self._params[name]

    def __contains__(self, name):
        return name in self._params

    def __iter__(self):
        return iter(self._params)

    def __len__(self):
        return len(self._params)

    def items(self):
        return self._params.items()

    def names(self):
        return list(self._params)

    def zero_grad(self):
        for t in self._params.values():
            t.grad = np.zeros_like(t.data)

    def clear_grad(self):
        for t in self._params.values():
            t.grad = None

    def subset(self, prefix):
        """View over the parameters whose names start with ``prefix``.

        The view shares tensors but keeps its own optimizer state.
        """
        out = ParameterSet()
        for k, t in self._params.items():
            if k.startswith(prefix):
                out._params[k] = t
        return out

    def snapshot(self):
        return {k: t.data.copy() for k, t in self._params.items()}

    def load_snapshot(self, snap):
        for k, arr in snap.items():
            self._params[k].data = np.array(arr, dtype=np.float64)

    def n_values(self):
        return sum(t.data.size for t in self._params.values())


def init_uniform(rng, shape, hidden):
    bound = 1.0 / np.sqrt(hidden)
    return rng.uniform(-bound, bound, size=shape)


def adam_step(params, lr, betas=(0.9, 0.999), eps=1e-8, clip=None):
    """One bias-corrected Adam update; gradients are zeroed afterwards.

    ``clip`` optionally rescales the global gradient norm first.
    """
    b1, b2 = betas
    for name, t in params.items():
        if t.grad is None:
            raise ValueError(f"parameter {name!r} has no gradient")
    if clip is not None:
        total = np.sqrt(sum(float((t.grad ** 2).sum()) for _, t in params.items()))
        if total > clip:
            for _, t in params.items():
                t.grad *= clip / total
    params.step += 1
    k = params.step
    c1 = 1.0 - b1 ** k
    c2 = 1.0 - b2 ** k
    for name, t in params.items():
        g = t.grad
        m = params.m.get(name)
        if m is None:
            m = np.zeros_like(t.data)
            v = np.zeros_like(t.data)
        else:
            v = params.v[name]
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        params.m[name] = m
        params.v[name] = v
        t.data = t.data - lr * (m / c1) / (np.sqrt(v / c2) + eps)
        t.grad = np.zeros_like(t.data)
    return params


# -- serialization ---------------------------------------------------------
def dumps(params):
    """Encode parameters (values only) as TLAB bytes."""
    chunks = [MAGIC, struct.pack("<I", FORMAT_VERSION)]
    for name, t in params.items():
        raw = name.encode("utf-8")
        arr = np.asarray(t.data, dtype="<f8")
        chunks.append(struct.pack("<Q", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<Q", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        chunks.append(arr.tobytes(order="C"))
    return b"".join(chunks)


def loads(blob):
    if blob[:4] != MAGIC:
        raise ValueError("not a TLAB container")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != FORMAT_VERSION:
        raise ValueError(f"unsupported TLAB version {version}")
    pos = 8
    out = ParameterSet()
    while pos < len(blob):
        (n,) = struct.unpack_from("<Q", blob, pos)
        pos += 8
        name = blob[pos:pos + n].decode("utf-8")
        pos += n
        (rank,) = struct.unpack_from("<Q", blob, pos)
        pos += 8
        shape = struct.unpack_from(f"<{rank}Q", blob, pos)
        pos += 8 * rank
        count = int(np.prod(shape)) if rank else 1
        arr = np.frombuffer(blob, dtype="<f8", count=count, offset=pos).reshape(shape)
        pos += 8 * count
        out.add(name, arr.astype(np.float64))
    return out


def save(params, path):
    with open(path, "wb") as fh:
        fh.write(dumps(params))


def load(path):
    with open(path, "rb") as fh:
        return loads(fh.read())
