"""Dense float64 tensors with reverse-mode automatic differentiation.

Every differentiable operation records its parent tensors and a closure
that routes the output gradient back to them; ``backward()`` walks the
implicit tape once in reverse topological order.  Gradients accumulate
across calls until ``zero_grad()``.

Reductions use numpy's pairwise summation, which is deterministic for a
fixed shape and memory layout, so repeated forward passes on identical
inputs are bit-identical.
"""
from __future__ import annotations

import struct

import numpy as np

__all__ = [
    "Tensor",
    "ShapeError",
    "no_grad",
    "concat",
    "stack",
    "gather_axis1",
    "take_per_row",
    "permute_time",
    "softmax",
    "log_softmax",
]


class ShapeError(ValueError):
    """Operand shapes are invalid for the requested operation."""


_grad_enabled = True


class no_grad:
    """Context manager that disables tape construction (evaluation mode)."""

    def __enter__(self):
        global _grad_enabled
        self._saved = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._saved
        return False


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a broadcast gradient back to the original operand shape."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_prev", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._prev: tuple = ()
        self._backward = None

    # -- basic introspection -------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self):
        self.grad = None

    def detach(self) -> "Tensor":
        """Same data, cut off from the tape."""
        return Tensor(self.data)

    # -- graph machinery -----------------------------------------------------

    def _accumulate(self, g: np.ndarray):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self):
        """Populate gradients of every reachable requires_grad tensor.

        The loss must be scalar.  Each tape node is visited exactly once;
        repeated calls without ``zero_grad()`` accumulate.
        """
        if self.data.size != 1:
            raise ShapeError(f"backward() requires a scalar loss, got shape {self.shape}")
        topo = []
        visited = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._prev:
                if id(parent) not in visited:
                    stack.append((parent, False))
        self._accumulate(np.ones_like(self.data))
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -- arithmetic ----------------------------------------------------------

    def __add__(self, other):
        other = _as_tensor(other)
        data = _broadcast_op(np.add, self, other)
        def backward(g):
            if self.requires_grad:
                self._accumulate(_unbroadcast(g, self.data.shape))
            if other.requires_grad:
                other._accumulate(_unbroadcast(g, other.data.shape))
        return _node(data, (self, other), backward)

    __radd__ = __add__

    def __sub__(self, other):
        other = _as_tensor(other)
        data = _broadcast_op(np.subtract, self, other)
        def backward(g):
            if self.requires_grad:
                self._accumulate(_unbroadcast(g, self.data.shape))
            if other.requires_grad:
                other._accumulate(_unbroadcast(-g, other.data.shape))
        return _node(data, (self, other), backward)

    def __rsub__(self, other):
        return _as_tensor(other) - self

    def __mul__(self, other):
        other = _as_tensor(other)
        data = _broadcast_op(np.multiply, self, other)
        def backward(g):
            if self.requires_grad:
                self._accumulate(_unbroadcast(g * other.data, self.data.shape))
            if other.requires_grad:
                other._accumulate(_unbroadcast(g * self.data, other.data.shape))
        return _node(data, (self, other), backward)

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = _as_tensor(other)
        data = _broadcast_op(np.divide, self, other)
        def backward(g):
            if self.requires_grad:
                self._accumulate(_unbroadcast(g / other.data, self.data.shape))
            if other.requires_grad:
                other._accumulate(_unbroadcast(-g * self.data / (other.data * other.data),
                                               other.data.shape))
        return _node(data, (self, other), backward)

    def __neg__(self):
        def backward(g):
            self._accumulate(-g)
        return _node(-self.data, (self,), backward)

    def __pow__(self, exponent):
        if not isinstance(exponent, (int, float)):
            raise TypeError("only scalar exponents are supported")
        data = self.data ** exponent
        def backward(g):
            self._accumulate(g * exponent * self.data ** (exponent - 1))
        return _node(data, (self,), backward)

    def __matmul__(self, other):
        other = _as_tensor(other)
        if self.data.ndim != 2 or other.data.ndim != 2:
            raise ShapeError(f"matmul expects 2-D operands, got {self.shape} @ {other.shape}")
        if self.data.shape[1] != other.data.shape[0]:
            raise ShapeError(f"matmul inner dimensions differ: {self.shape} @ {other.shape}")
        data = self.data @ other.data
        def backward(g):
            if self.requires_grad:
                self._accumulate(g @ other.data.T)
            if other.requires_grad:
                other._accumulate(self.data.T @ g)
        return _node(data, (self, other), backward)

    # -- pointwise nonlinearities ---------------------------------------------

    def exp(self):
        data = np.exp(self.data)
        def backward(g):
            self._accumulate(g * data)
        return _node(data, (self,), backward)

    def log(self):
        data = np.log(self.data)
        def backward(g):
            self._accumulate(g / self.data)
        return _node(data, (self,), backward)

    def sqrt(self):
        data = np.sqrt(self.data)
        def backward(g):
            self._accumulate(g * 0.5 / data)
        return _node(data, (self,), backward)

    def tanh(self):
        data = np.tanh(self.data)
        def backward(g):
            self._accumulate(g * (1.0 - data * data))
        return _node(data, (self,), backward)

    def sigmoid(self):
        data = 1.0 / (1.0 + np.exp(-self.data))
        def backward(g):
            self._accumulate(g * data * (1.0 - data))
        return _node(data, (self,), backward)

    def relu(self):
        data = np.maximum(self.data, 0.0)
        def backward(g):
            self._accumulate(g * (self.data > 0.0))
        return _node(data, (self,), backward)

    # -- reductions and reshaping ---------------------------------------------

    def sum(self, axis=None, keepdims: bool = False):
        data = self.data.sum(axis=axis, keepdims=keepdims)
        shape = self.data.shape
        def backward(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            self._accumulate(np.broadcast_to(g, shape))
        return _node(data, (self,), backward)

    def mean(self, axis=None, keepdims: bool = False):
        if axis is None:
            count = self.data.size
        else:
            axes = axis if isinstance(axis, tuple) else (axis,)
            count = 1
            for a in axes:
                count *= self.data.shape[a]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / count)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        data = self.data.reshape(shape)
        old = self.data.shape
        def backward(g):
            self._accumulate(g.reshape(old))
        return _node(data, (self,), backward)

    def transpose(self, axes):
        axes = tuple(a % self.data.ndim for a in axes)
        inverse = tuple(np.argsort(axes))
        data = self.data.transpose(axes)
        def backward(g):
            self._accumulate(g.transpose(inverse))
        return _node(data, (self,), backward)

    def __getitem__(self, key):
        data = self.data[key]
        def backward(g):
            gx = np.zeros_like(self.data)
            gx[key] += g
            self._accumulate(gx)
        return _node(data, (self,), backward)


def _as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _broadcast_op(fn, a: Tensor, b: Tensor) -> np.ndarray:
    try:
        return fn(a.data, b.data)
    except ValueError as exc:
        raise ShapeError(f"operands not broadcastable: {a.shape} vs {b.shape}") from exc


def _node(data: np.ndarray, parents: tuple, backward) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._prev = parents
        out._backward = backward
    return out


# -- structural ops -----------------------------------------------------------

def concat(tensors, axis: int = 0) -> Tensor:
    tensors = list(tensors)
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)
    def backward(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                t._accumulate(g[tuple(idx)])
    return _node(data, tuple(tensors), backward)


def stack(tensors, axis: int = 0) -> Tensor:
    tensors = list(tensors)
    data = np.stack([t.data for t in tensors], axis=axis)
    def backward(g):
        pieces = np.moveaxis(g, axis, 0)
        for t, piece in zip(tensors, pieces):
            if t.requires_grad:
                t._accumulate(piece)
    return _node(data, tuple(tensors), backward)


def gather_axis1(x: Tensor, idx: np.ndarray) -> Tensor:
    """``out[b] = x[b, idx]`` with a shared integer index array; duplicates allowed."""
    data = x.data[:, idx]
    def backward(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, (slice(None), idx), g)
        x._accumulate(gx)
    return _node(data, (x,), backward)


def take_per_row(x: Tensor, idx: np.ndarray) -> Tensor:
    """``out[b] = x[b, idx[b]]`` for ``x`` of shape [B, T, ...] and one index per row."""
    idx = np.asarray(idx, dtype=np.intp)
    expand = idx.reshape(idx.shape[0], 1, *([1] * (x.data.ndim - 2)))
    data = np.take_along_axis(x.data, expand, axis=1)[:, 0]
    def backward(g):
        gx = np.zeros_like(x.data)
        np.put_along_axis(gx, expand, np.expand_dims(g, 1), axis=1)
        x._accumulate(gx)
    return _node(data, (x,), backward)


def permute_time(x: Tensor, perm: np.ndarray) -> Tensor:
    """Per-row time permutation: ``out[b, t] = x[b, perm[b, t]]``."""
    perm = np.asarray(perm, dtype=np.intp)
    expand = perm.reshape(*perm.shape, *([1] * (x.data.ndim - 2)))
    data = np.take_along_axis(x.data, expand, axis=1)
    def backward(g):
        gx = np.zeros_like(x.data)
        np.put_along_axis(gx, expand, g, axis=1)
        x._accumulate(gx)
    return _node(data, (x,), backward)


# -- stabilized softmax family -------------------------------------------------

def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=axis, keepdims=True)
    def backward(g):
        dot = (g * data).sum(axis=axis, keepdims=True)
        x._accumulate(data * (g - dot))
    return _node(data, (x,), backward)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    data = shifted - logz
    def backward(g):
        x._accumulate(g - np.exp(data) * g.sum(axis=axis, keepdims=True))
    return _node(data, (x,), backward)


# -- serialization --------------------------------------------------------------

def array_to_bytes(arr: np.ndarray) -> bytes:
    """Little-endian blob: u64 rank, u64 extents, then raw float64 values."""
    arr = np.asarray(arr, dtype="<f8", order="C")
    header = struct.pack("<Q", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return header + arr.tobytes()


def array_from_bytes(buf: bytes, offset: int = 0):
    """Inverse of :func:`array_to_bytes`; returns (array, next_offset)."""
    (rank,) = struct.unpack_from("<Q", buf, offset)
    offset += 8
    shape = struct.unpack_from(f"<{rank}Q", buf, offset)
    offset += 8 * rank
    count = int(np.prod(shape)) if rank else 1
    data = np.frombuffer(buf, dtype="<f8", count=count, offset=offset)
    offset += 8 * count
    return data.reshape(shape).astype(np.float64), offset
