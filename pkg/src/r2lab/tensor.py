"""Dense 64-bit tensors with a small reverse-mode tape.

Only the operations the lab needs are provided: matmul, conv2d, relu,
softmax cross-entropy, same-shape elementwise add/mul, scalar scaling,
bias addition and reductions. There is no general broadcasting.

Every op records a :class:`Node` carrying a global sequence number, so
sorting the nodes reachable from a loss by that number reproduces the
exact execution order; :class:`Tape` replays adjoints in reverse of it.
Custom ops with hand-written adjoints (regularizers, quantizers, DKM) are
recorded through :func:`record`.
"""

from __future__ import annotations

import itertools

import numpy as np

from .errors import DimensionError, DomainError, LabelIndexError, NumericError

_seq = itertools.count()


class Node:
    __slots__ = ("seq", "inputs", "backward", "op")

    def __init__(self, inputs, backward, op):
        self.seq = next(_seq)
        self.inputs = inputs
        self.backward = backward
        self.op = op


class Tensor:
    """n-d float64 array with an optional gradient slot."""

    __slots__ = ("data", "grad", "requires_grad", "name", "_node")

    def __init__(self, data, requires_grad=False, name=None):
        arr = np.array(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise NumericError(f"non-finite values in tensor {name or ''}".strip())
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self.name = name
        self._node = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    @property
    def ndim(self):
        return self.data.ndim

    def numpy(self):
        return self.data

    def item(self):
        if self.data.size != 1:
            raise DimensionError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return Tensor(self.data.copy())

    def backward(self):
        backward(self)

    def __repr__(self):
        label = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return add(self, scale(other, -1.0))

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _check_finite(arr, op):
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"{op} produced non-finite values")


def _needs_grad(inputs):
    return any(t.requires_grad or t._node is not None for t in inputs)


def record(data, inputs, backward_fn, op="custom"):
    """Wrap ``data`` as the output of an op on ``inputs``.

    ``backward_fn(g)`` receives the output adjoint and returns one adjoint
    (or None) per input, in order.
    """
    data = np.asarray(data, dtype=np.float64)
    _check_finite(data, op)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.requires_grad = False
    out.name = None
    out._node = None
    inputs = tuple(inputs)
    if _needs_grad(inputs):
        out._node = Node(inputs, backward_fn, op)
    return out


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


# -- elementwise and reductions ------------------------------------------------

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise DimensionError(f"add: shapes {a.shape} and {b.shape} differ")
    return record(a.data + b.data, (a, b), lambda g: (g, g), "add")


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise DimensionError(f"mul: shapes {a.shape} and {b.shape} differ")
    ad, bd = a.data, b.data
    return record(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


def scale(a, c):
    a = as_tensor(a)
    c = float(c)
    return record(a.data * c, (a,), lambda g: (g * c,), "scale")


def tsum(a):
    a = as_tensor(a)
    shape = a.shape
    return record(a.data.sum(), (a,), lambda g: (np.full(shape, float(g)),), "sum")


def mean(a):
    a = as_tensor(a)
    shape, n = a.shape, a.size
    return record(a.data.mean(), (a,), lambda g: (np.full(shape, float(g) / n),), "mean")


def add_bias(x, b):
    """x[N, F, ...] + b[F] along axis 1."""
    x, b = as_tensor(x), as_tensor(b)
    if b.ndim != 1 or x.ndim < 2 or x.shape[1] != b.shape[0]:
        raise DimensionError(f"add_bias: {x.shape} vs bias {b.shape}")
    view = (1, -1) + (1,) * (x.ndim - 2)
    axes = (0,) + tuple(range(2, x.ndim))
    return record(x.data + b.data.reshape(view), (x, b),
                  lambda g: (g, g.sum(axis=axes)), "add_bias")


def reshape(x, shape):
    x = as_tensor(x)
    old = x.shape
    return record(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),), "reshape")


def flatten(x):
    """Collapse all but the leading (batch) axis."""
    return reshape(x, (x.shape[0], -1))


# -- linear algebra ------------------------------------------------------------

def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: {a.shape} x {b.shape}")
    ad, bd = a.data, b.data
    return record(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g), "matmul")


def _im2col(xp, kh, kw, stride):
    # xp: (N, C, Hp, Wp) -> (N, C, Ho, Wo, kh, kw), a strided view
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    return win[:, :, ::stride, ::stride]


def conv2d(x, w, stride=1, pad=0):
    """Zero-padded cross-correlation, x[N,C,H,W] * w[F,C,kh,kw]."""
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
        raise DimensionError(f"conv2d: input {x.shape} vs kernel {w.shape}")
    if stride < 1 or pad < 0:
        raise DomainError("conv2d: stride must be >= 1 and pad >= 0")
    n, c, h, wd = x.shape
    f, _, kh, kw = w.shape
    if kh > h + 2 * pad or kw > wd + 2 * pad:
        raise DimensionError(f"conv2d: kernel {kh}x{kw} larger than padded input")
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    cols = _im2col(xp, kh, kw, stride)
    ho, wo = cols.shape[2], cols.shape[3]
    wdata = w.data
    out = np.einsum("ncpqij,fcij->nfpq", cols, wdata, optimize=True)

    def backward(g):
        dw = np.einsum("nfpq,ncpqij->fcij", g, cols, optimize=True)
        dcols = np.einsum("nfpq,fcij->ncijpq", g, wdata, optimize=True)
        dxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                dxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += dcols[:, :, i, j]
        dx = dxp[:, :, pad:pad + h, pad:pad + wd]
        return dx, dw

    return record(out, (x, w), backward, "conv2d")


# -- nonlinearities and losses ---------------------------------------------------

def relu(x):
    x = as_tensor(x)
    mask = x.data > 0
    return record(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,), "relu")


def softmax_ce(logits, labels):
    """Mean softmax cross-entropy over the batch."""
    logits = as_tensor(logits)
    labels = np.asarray(labels)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise DimensionError(f"softmax_ce: logits {logits.shape}, labels {labels.shape}")
    n, k = logits.shape
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise LabelIndexError(f"labels must lie in [0, {k})")
    labels = labels.astype(np.int64)
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(n)
    loss = float(np.mean(logsum - z[rows, labels]))

    def backward(g):
        p = np.exp(z - logsum[:, None])
        p[rows, labels] -= 1.0
        return (p * (float(g) / n),)

    return record(loss, (logits,), backward, "softmax_ce")


# -- reverse pass ------------------------------------------------------------------

class Tape:
    """Ordered record of the ops that produced a tensor."""

    def __init__(self, nodes, outputs):
        self.nodes = nodes
        self.outputs = outputs

    @classmethod
    def from_loss(cls, loss):
        found = {}
        stack = [loss]
        seen = set()
        while stack:
            t = stack.pop()
            if id(t) in seen:
                continue
            seen.add(id(t))
            if t._node is not None:
                found[t._node.seq] = t
                stack.extend(t._node.inputs)
        order = sorted(found)
        return cls([found[s]._node for s in order], [found[s] for s in order])

    def backward(self, loss):
        adj = {id(loss): np.ones_like(loss.data)}
        leaves = {}
        for node, out in zip(reversed(self.nodes), reversed(self.outputs)):
            g = adj.pop(id(out), None)
            if g is None:
                continue
            grads = node.backward(g)
            for inp, gi in zip(node.inputs, grads):
                if gi is None:
                    continue
                gi = np.asarray(gi, dtype=np.float64).reshape(inp.shape)
                if inp._node is not None:
                    key = id(inp)
                    adj[key] = adj[key] + gi if key in adj else gi
                elif inp.requires_grad:
                    leaves.setdefault(id(inp), [inp, None])
                    acc = leaves[id(inp)]
                    acc[1] = gi if acc[1] is None else acc[1] + gi
        if loss._node is None and loss.requires_grad:
            leaves[id(loss)] = [loss, np.ones_like(loss.data)]
        for t, g in leaves.values():
            _check_finite(g, "backward")
            t.grad = g.copy() if t.grad is None else t.grad + g


def backward(loss):
    """Populate ``.grad`` on every leaf reachable from a scalar ``loss``.

    Gradients accumulate across calls until zeroed.
    """
    if loss.size != 1:
        raise DimensionError(f"backward needs a scalar loss, got shape {loss.shape}")
    Tape.from_loss(loss).backward(loss)


def finite_diff(f, x, eps=1e-5):
    """Central-difference gradient of scalar ``f`` at ``x``.

    ``f`` takes an ndarray shaped like ``x`` and returns a float (or a
    scalar Tensor).
    """
    if eps <= 0:
        raise DomainError("eps must be positive")
    x = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    grad = np.empty_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)

    def call(arr):
        v = f(arr)
        v = v.item() if isinstance(v, Tensor) else float(v)
        if not np.isfinite(v):
            raise NumericError("finite_diff: objective returned a non-finite value")
        return v

    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = call(x.copy())
        flat[i] = orig - eps
        fm = call(x.copy())
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * eps)
    return grad
