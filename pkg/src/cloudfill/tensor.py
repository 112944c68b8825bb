"""Minimal dense-tensor engine with reverse-mode autodiff.

Eager tape: every op records its parents and a backward closure on the
output tensor. float32 storage; long reductions accumulate in float64.
Broadcasting is restricted to scalar-with-tensor; use `expand` for
anything else.
"""

from __future__ import annotations

import struct

import numpy as np

# reductions longer than this accumulate in float64
_ACC64_THRESHOLD = 4096


class ShapeError(ValueError):
    pass


class GraphError(RuntimeError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float32)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def item(self):
        return float(self.data)

    def detach(self):
        return Tensor(self.data.copy())

    def zero_grad(self):
        self.grad = None

    def _accum(self, g):
        g = np.asarray(g, dtype=np.float32)
        if g.shape != self.data.shape:
            raise ShapeError(f"gradient shape {g.shape} != data shape {self.data.shape}")
        if self.grad is None:
            self.grad = g.copy()
        else:
            self.grad += g

    def backward(self):
        """Reverse-mode sweep from a scalar loss; fills .grad on the graph."""
        if self.data.size != 1:
            raise GraphError("backward() requires a scalar loss")
        topo = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self._accum(np.ones_like(self.data))
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)


def _wrap(out_data, parents, backward):
    out = Tensor(out_data)
    track = any(p.requires_grad or p._parents for p in parents)
    if track:
        out.requires_grad = any(p.requires_grad for p in parents)
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_same_shape(a, b, opname):
    if a.data.shape != b.data.shape:
        raise ShapeError(f"{opname}: shape mismatch {a.data.shape} vs {b.data.shape}")


# ---------------------------------------------------------------------------
# elementwise


def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.size != 1 and b.data.size != 1:
        _check_same_shape(a, b, "add")
    out_data = a.data + b.data

    def bw(g):
        if a.requires_grad or a._parents:
            a._accum(g if a.data.size != 1 else g.sum().reshape(a.data.shape))
        if b.requires_grad or b._parents:
            b._accum(g if b.data.size != 1 else g.sum().reshape(b.data.shape))

    return _wrap(out_data, (a, b), bw)


def sub(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.size != 1 and b.data.size != 1:
        _check_same_shape(a, b, "sub")
    out_data = a.data - b.data

    def bw(g):
        if a.requires_grad or a._parents:
            a._accum(g if a.data.size != 1 else g.sum().reshape(a.data.shape))
        if b.requires_grad or b._parents:
            b._accum(-g if b.data.size != 1 else -g.sum().reshape(b.data.shape))

    return _wrap(out_data, (a, b), bw)


def mul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.size != 1 and b.data.size != 1:
        _check_same_shape(a, b, "mul")
    out_data = a.data * b.data

    def bw(g):
        if a.requires_grad or a._parents:
            ga = g * b.data
            a._accum(ga if a.data.size != 1 else ga.sum().reshape(a.data.shape))
        if b.requires_grad or b._parents:
            gb = g * a.data
            b._accum(gb if b.data.size != 1 else gb.sum().reshape(b.data.shape))

    return _wrap(out_data, (a, b), bw)


def scale(a, s):
    """Multiply by a python scalar (non-differentiable w.r.t. s)."""
    a = _as_tensor(a)
    s = float(s)
    return _wrap(a.data * np.float32(s), (a,), lambda g: a._accum(g * np.float32(s)))


def neg(a):
    return scale(a, -1.0)


def relu(a):
    a = _as_tensor(a)
    mask = a.data > 0

    def bw(g):
        a._accum(g * mask)

    return _wrap(np.where(mask, a.data, 0.0), (a,), bw)


def sigmoid(a):
    a = _as_tensor(a)
    out_data = 1.0 / (1.0 + np.exp(-a.data.astype(np.float64)))
    out_data = out_data.astype(np.float32)

    def bw(g):
        a._accum(g * out_data * (1.0 - out_data))

    return _wrap(out_data, (a,), bw)


def arcosh1p(a):
    """arcosh(1 + x), elementwise; x must be >= 0."""
    a = _as_tensor(a)
    x = a.data.astype(np.float64)
    out_data = np.arccosh(1.0 + x).astype(np.float32)

    def bw(g):
        # d/dx arcosh(1+x) = 1/sqrt(x^2 + 2x); guard the singularity at 0
        denom = np.sqrt(np.maximum(x * x + 2.0 * x, 1e-12))
        a._accum(g / denom.astype(np.float32))

    return _wrap(out_data, (a,), bw)


def softmax(a, axis):
    a = _as_tensor(a)
    if a.data.shape == () or a.data.shape[axis] == 0:
        raise ShapeError("softmax: empty axis")
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out_data = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        dot = (g * out_data).sum(axis=axis, keepdims=True)
        a._accum(out_data * (g - dot))

    return _wrap(out_data, (a,), bw)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError("matmul expects rank-2 tensors")
    if a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul: inner dims {a.data.shape} x {b.data.shape}")
    out_data = a.data @ b.data

    def bw(g):
        if a.requires_grad or a._parents:
            a._accum(g @ b.data.T)
        if b.requires_grad or b._parents:
            b._accum(a.data.T @ g)

    return _wrap(out_data, (a, b), bw)


def pairwise_sqdist(a, b):
    """Squared Euclidean distances between rows of a [n,d] and b [m,d] -> [n,m]."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[1]:
        raise ShapeError("pairwise_sqdist expects [n,d] and [m,d]")
    diff = a.data[:, None, :] - b.data[None, :, :]
    out_data = np.einsum("nmd,nmd->nm", diff, diff)

    def bw(g):
        if a.requires_grad or a._parents:
            a._accum(2.0 * (a.data * g.sum(axis=1)[:, None] - g @ b.data))
        if b.requires_grad or b._parents:
            b._accum(2.0 * (b.data * g.sum(axis=0)[:, None] - g.T @ a.data))

    return _wrap(out_data, (a, b), bw)


# ---------------------------------------------------------------------------
# reductions


def _reduce_size(shape, axis):
    if axis is None:
        return int(np.prod(shape)) if shape else 1
    return shape[axis]


def sum_(a, axis=None, keepdims=False):
    a = _as_tensor(a)
    long = _reduce_size(a.data.shape, axis) > _ACC64_THRESHOLD
    src = a.data.astype(np.float64) if long else a.data
    out_data = src.sum(axis=axis, keepdims=keepdims).astype(np.float32)

    def bw(g):
        if axis is None:
            a._accum(np.full_like(a.data, float(g)))
        else:
            gg = g if keepdims else np.expand_dims(g, axis)
            a._accum(np.broadcast_to(gg, a.data.shape).copy())

    return _wrap(out_data, (a,), bw)


def mean(a, axis=None, keepdims=False):
    a = _as_tensor(a)
    n = _reduce_size(a.data.shape, axis)
    return scale(sum_(a, axis=axis, keepdims=keepdims), 1.0 / n)


def max_(a, axis):
    a = _as_tensor(a)
    out_data = a.data.max(axis=axis)
    idx = a.data.argmax(axis=axis)

    def bw(g):
        grad = np.zeros_like(a.data)
        np.put_along_axis(grad, np.expand_dims(idx, axis),
                          np.expand_dims(g, axis), axis)
        a._accum(grad)

    return _wrap(out_data, (a,), bw)


def min_(a, axis):
    a = _as_tensor(a)
    out_data = a.data.min(axis=axis)
    idx = a.data.argmin(axis=axis)

    def bw(g):
        grad = np.zeros_like(a.data)
        np.put_along_axis(grad, np.expand_dims(idx, axis),
                          np.expand_dims(g, axis), axis)
        a._accum(grad)

    return _wrap(out_data, (a,), bw)


# ---------------------------------------------------------------------------
# shape ops


def reshape(a, shape):
    a = _as_tensor(a)
    out_data = a.data.reshape(shape)
    return _wrap(out_data, (a,), lambda g: a._accum(g.reshape(a.data.shape)))


def transpose(a, axes=None):
    a = _as_tensor(a)
    out_data = np.transpose(a.data, axes)
    inv = None if axes is None else np.argsort(axes)

    def bw(g):
        a._accum(np.transpose(g, inv))

    return _wrap(out_data, (a,), bw)


def concat(tensors, axis=0):
    tensors = [_as_tensor(t) for t in tensors]
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bw(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(lo, hi)
            t._accum(g[tuple(sl)])

    return _wrap(out_data, tuple(tensors), bw)


def gather(a, indices, axis=0):
    """Select rows/slices by integer index; duplicates allowed."""
    a = _as_tensor(a)
    idx = np.asarray(indices, dtype=np.int64)
    if idx.ndim != 1:
        raise ShapeError("gather expects a flat index list")
    if idx.size and (idx.min() < 0 or idx.max() >= a.data.shape[axis]):
        raise ShapeError("gather: index out of range")
    out_data = np.take(a.data, idx, axis=axis)

    def bw(g):
        grad = np.zeros_like(a.data)
        if axis == 0:
            np.add.at(grad, idx, g)
        else:
            moved = np.moveaxis(grad, axis, 0)
            np.add.at(moved, idx, np.moveaxis(g, axis, 0))
        a._accum(grad)

    return _wrap(out_data, (a,), bw)


def expand(a, axis, copies):
    """Tile a size-1 axis to `copies`; the explicit stand-in for broadcasting."""
    a = _as_tensor(a)
    if a.data.shape[axis] != 1:
        raise ShapeError(f"expand: axis {axis} has size {a.data.shape[axis]}, expected 1")
    reps = [1] * a.data.ndim
    reps[axis] = copies
    out_data = np.tile(a.data, reps)

    def bw(g):
        a._accum(g.sum(axis=axis, keepdims=True))

    return _wrap(out_data, (a,), bw)


# ---------------------------------------------------------------------------
# convolution (depth-image backbone)


def conv2d(x, w, b=None, stride=1):
    """Strided 2D convolution on a single image x [Cin,H,W] with w [Cout,Cin,kh,kw]."""
    x, w = _as_tensor(x), _as_tensor(w)
    if x.data.ndim != 3 or w.data.ndim != 4:
        raise ShapeError("conv2d expects x [C,H,W] and w [Co,Ci,kh,kw]")
    cin, h, wd = x.data.shape
    cout, cin_w, kh, kw = w.data.shape
    if cin != cin_w:
        raise ShapeError("conv2d: channel mismatch")
    oh = (h - kh) // stride + 1
    ow = (wd - kw) // stride + 1
    if oh <= 0 or ow <= 0:
        raise ShapeError("conv2d: kernel larger than input")

    # im2col: [oh*ow, cin*kh*kw]
    s0, s1, s2 = x.data.strides
    windows = np.lib.stride_tricks.as_strided(
        x.data,
        shape=(cin, oh, ow, kh, kw),
        strides=(s0, s1 * stride, s2 * stride, s1, s2),
    )
    cols = windows.transpose(1, 2, 0, 3, 4).reshape(oh * ow, cin * kh * kw)
    wmat = w.data.reshape(cout, -1)
    out_mat = cols @ wmat.T  # [oh*ow, cout]
    out_data = out_mat.T.reshape(cout, oh, ow)
    if b is not None:
        b = _as_tensor(b)
        out_data = out_data + b.data[:, None, None]

    parents = (x, w) if b is None else (x, w, b)

    def bw(g):
        gmat = g.reshape(cout, -1).T  # [oh*ow, cout]
        if w.requires_grad or w._parents:
            w._accum((gmat.T @ cols).reshape(w.data.shape))
        if b is not None and (b.requires_grad or b._parents):
            b._accum(g.sum(axis=(1, 2)))
        if x.requires_grad or x._parents:
            gcols = gmat @ wmat  # [oh*ow, cin*kh*kw]
            gx = np.zeros_like(x.data)
            gwin = gcols.reshape(oh, ow, cin, kh, kw)
            for i in range(kh):
                for j in range(kw):
                    gx[:, i:i + oh * stride:stride, j:j + ow * stride:stride] += \
                        gwin[:, :, :, i, j].transpose(2, 0, 1)
            x._accum(gx)

    return _wrap(out_data, parents, bw)


def avg_pool2d(x, k):
    """Non-overlapping k x k average pooling on x [C,H,W]; H,W divisible by k."""
    x = _as_tensor(x)
    c, h, w = x.data.shape
    if h % k or w % k:
        raise ShapeError("avg_pool2d: size not divisible by window")
    out_data = x.data.reshape(c, h // k, k, w // k, k).mean(axis=(2, 4))

    def bw(g):
        gx = np.repeat(np.repeat(g, k, axis=1), k, axis=2) / (k * k)
        x._accum(gx.astype(np.float32))

    return _wrap(out_data, (x,), bw)


# ---------------------------------------------------------------------------
# parameter store + checkpoint format

_MAGIC = b"PCDK1"


class CheckpointError(IOError):
    pass


class ParamStore:
    """Named parameter map with deterministic enumeration order."""

    def __init__(self, rng_seed=0):
        self.rng_seed = int(rng_seed)
        self._rng = np.random.default_rng(self.rng_seed)
        self._params: dict[str, Tensor] = {}

    def param(self, path, shape, init="fanin", fan_in=None):
        """Create (or return existing) parameter at `path`."""
        if path in self._params:
            return self._params[path]
        shape = tuple(int(s) for s in shape)
        if init == "zeros":
            data = np.zeros(shape, dtype=np.float32)
        elif init == "fanin":
            fi = fan_in if fan_in is not None else (shape[0] if shape else 1)
            bound = 1.0 / np.sqrt(max(fi, 1))
            data = self._rng.uniform(-bound, bound, size=shape).astype(np.float32)
        else:
            raise ValueError(f"unknown init {init!r}")
        t = Tensor(data, requires_grad=True)
        self._params[path] = t
        return t

    def __getitem__(self, path):
        return self._params[path]

    def __contains__(self, path):
        return path in self._params

    def __len__(self):
        return len(self._params)

    def items(self):
        return self._params.items()

    def paths(self):
        return list(self._params.keys())

    def zero_grad(self):
        for t in self._params.values():
            t.grad = None

    def save(self, path):
        with open(path, "wb") as f:
            f.write(_MAGIC)
            f.write(struct.pack("<I", len(self._params)))
            for name, t in self._params.items():
                raw = name.encode("utf-8")
                f.write(struct.pack("<I", len(raw)))
                f.write(raw)
                f.write(struct.pack("<I", t.data.ndim))
                for d in t.data.shape:
                    f.write(struct.pack("<I", d))
                f.write(t.data.astype("<f4").tobytes())

    @classmethod
    def load(cls, path, rng_seed=0):
        store = cls(rng_seed)
        with open(path, "rb") as f:
            magic = f.read(5)
            if magic != _MAGIC:
                raise CheckpointError(f"{path}: bad magic {magic!r}")
            (count,) = struct.unpack("<I", f.read(4))
            for _ in range(count):
                (plen,) = struct.unpack("<I", f.read(4))
                name = f.read(plen).decode("utf-8")
                (rank,) = struct.unpack("<I", f.read(4))
                dims = struct.unpack(f"<{rank}I", f.read(4 * rank))
                n = int(np.prod(dims)) if dims else 1
                buf = f.read(4 * n)
                if len(buf) != 4 * n:
                    raise CheckpointError(f"{path}: truncated payload for {name}")
                data = np.frombuffer(buf, dtype="<f4").reshape(dims).copy()
                store._params[name] = Tensor(data, requires_grad=True)
        return store

    def load_state_from(self, other):
        """Copy data buffers from another store with identical paths."""
        if self.paths() != other.paths():
            raise CheckpointError("parameter path mismatch on state load")
        for name, t in self._params.items():
            src = other[name]
            if src.data.shape != t.data.shape:
                raise CheckpointError(f"shape mismatch for {name}")
            t.data = src.data.astype(np.float32).copy()


def check_finite(t, context=""):
    data = t.data if isinstance(t, Tensor) else np.asarray(t)
    if not np.all(np.isfinite(data)):
        raise FloatingPointError(f"non-finite values {('in ' + context) if context else ''}")
