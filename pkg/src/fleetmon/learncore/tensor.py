"""Reverse-mode autodiff over numpy arrays.

Tensors are float32 by default; float64 is supported so the finite-difference
checker can run at high precision. All reductions use numpy's sequential
accumulation, so repeated runs on the same machine are bitwise identical.
"""

from __future__ import annotations

import numpy as np

Arrayish = "np.ndarray | float | int | list"


def _as_array(value, dtype=np.float32) -> np.ndarray:
    if isinstance(value, np.ndarray):
        if value.dtype == dtype:
            return value
        return value.astype(dtype)
    return np.asarray(value, dtype=dtype)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum `grad` down to `shape` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    ndiff = grad.ndim - len(shape)
    if ndiff > 0:
        grad = grad.sum(axis=tuple(range(ndiff)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


_GRAD_ENABLED = True


class no_grad:
    """Context manager: skip tape construction (inference paths)."""

    def __enter__(self):
        global _GRAD_ENABLED
        self._prev = _GRAD_ENABLED
        _GRAD_ENABLED = False
        return self

    def __exit__(self, *exc):
        global _GRAD_ENABLED
        _GRAD_ENABLED = self._prev
        return False


class Tensor:
    """A numpy array plus a backward closure on the tape."""

    __slots__ = ("data", "grad", "requires_grad", "_backward", "_parents")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if dtype is None:
            dtype = data.dtype if isinstance(data, np.ndarray) and data.dtype in (np.float32, np.float64) else np.float32
        self.data = _as_array(data, dtype)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._backward = None
        self._parents: tuple = ()

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

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, grad={'yes' if self.requires_grad else 'no'})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    # -- graph construction --------------------------------------------------

    @staticmethod
    def _make(data, parents, backward) -> "Tensor":
        track = _GRAD_ENABLED and any(p.requires_grad for p in parents)
        out = Tensor(data, requires_grad=track, dtype=data.dtype)
        if track:
            out._parents = tuple(parents)
            out._backward = backward
        return out

    def _accumulate(self, grad: np.ndarray):
        if self.grad is None:
            # always copy: closures may hand us views of other grad buffers
            self.grad = np.array(grad, dtype=self.data.dtype, copy=True)
        else:
            self.grad += grad

    def backward(self, grad=None):
        """Backpropagate from this tensor; `grad` defaults to ones."""
        if grad is None:
            grad = np.ones_like(self.data)
        else:
            grad = _as_array(grad, self.data.dtype)
            if grad.shape != self.data.shape:
                raise ValueError(f"upstream grad shape {grad.shape} != output shape {self.data.shape}")

        topo: list[Tensor] = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                topo.append(node)
                continue
            if id(node) in seen or not node.requires_grad:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                stack.append((p, False))

        self._accumulate(grad)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
                # free the tape as we go; a fresh forward rebuilds it
                node._backward = None
                node._parents = ()

    # -- arithmetic ----------------------------------------------------------

    def _coerce(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            return other
        return Tensor(np.asarray(other, dtype=self.data.dtype))

    def __add__(self, other):
        other = self._coerce(other)
        a, b = self, other
        out = Tensor._make(a.data + b.data, (a, b), None)
        if out.requires_grad:
            def bwd(g):
                if a.requires_grad:
                    a._accumulate(_unbroadcast(g, a.data.shape))
                if b.requires_grad:
                    b._accumulate(_unbroadcast(g, b.data.shape))
            out._backward = bwd
        return out

    __radd__ = __add__

    def __neg__(self):
        a = self
        out = Tensor._make(-a.data, (a,), None)
        if out.requires_grad:
            out._backward = lambda g: a._accumulate(-g)
        return out

    def __sub__(self, other):
        return self + (-self._coerce(other))

    def __rsub__(self, other):
        return self._coerce(other) + (-self)

    def __mul__(self, other):
        other = self._coerce(other)
        a, b = self, other
        out = Tensor._make(a.data * b.data, (a, b), None)
        if out.requires_grad:
            def bwd(g):
                if a.requires_grad:
                    a._accumulate(_unbroadcast(g * b.data, a.data.shape))
                if b.requires_grad:
                    b._accumulate(_unbroadcast(g * a.data, b.data.shape))
            out._backward = bwd
        return out

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = self._coerce(other)
        a, b = self, other
        out = Tensor._make(a.data / b.data, (a, b), None)
        if out.requires_grad:
            def bwd(g):
                if a.requires_grad:
                    a._accumulate(_unbroadcast(g / b.data, a.data.shape))
                if b.requires_grad:
                    b._accumulate(_unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))
            out._backward = bwd
        return out

    def __rtruediv__(self, other):
        return self._coerce(other) / self

    def __pow__(self, exponent: float):
        a = self
        out = Tensor._make(a.data ** exponent, (a,), None)
        if out.requires_grad:
            out._backward = lambda g: a._accumulate(g * exponent * a.data ** (exponent - 1))
        return out

    def __matmul__(self, other):
        other = self._coerce(other)
        a, b = self, other
        out = Tensor._make(a.data @ b.data, (a, b), None)
        if out.requires_grad:
            def bwd(g):
                if a.requires_grad:
                    if b.data.ndim == 1:
                        ga = np.multiply.outer(g, b.data) if a.data.ndim > 1 else np.outer(g, b.data).reshape(a.data.shape)
                    else:
                        ga = g @ np.swapaxes(b.data, -1, -2)
                    a._accumulate(_unbroadcast(ga, a.data.shape))
                if b.requires_grad:
                    if a.data.ndim == 1:
                        gb = np.outer(a.data, g)
                    else:
                        gb = np.swapaxes(a.data, -1, -2) @ g
                    b._accumulate(_unbroadcast(gb, b.data.shape))
            out._backward = bwd
        return out

    # -- shape ops -----------------------------------------------------------

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        a = self
        out = Tensor._make(a.data.reshape(shape), (a,), None)
        if out.requires_grad:
            out._backward = lambda g: a._accumulate(g.reshape(a.data.shape))
        return out

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        a = self
        inv = np.argsort(axes)
        out = Tensor._make(a.data.transpose(axes), (a,), None)
        if out.requires_grad:
            out._backward = lambda g: a._accumulate(g.transpose(inv))
        return out

    def __getitem__(self, idx):
        a = self
        out = Tensor._make(a.data[idx], (a,), None)
        if out.requires_grad:
            parts = idx if isinstance(idx, tuple) else (idx,)
            basic = all(isinstance(p, (slice, int)) or p is None or p is Ellipsis for p in parts)

            def bwd(g):
                full = np.zeros_like(a.data)
                if basic:
                    full[idx] += g
                else:
                    np.add.at(full, idx, g)
                a._accumulate(full)
            out._backward = bwd
        return out

    # -- reductions ----------------------------------------------------------

    def sum(self, axis=None, keepdims=False):
        a = self
        out_data = a.data.sum(axis=axis, keepdims=keepdims)
        out = Tensor._make(np.asarray(out_data, dtype=a.data.dtype), (a,), None)
        if out.requires_grad:
            def bwd(g):
                g = np.asarray(g, dtype=a.data.dtype)
                if axis is not None and not keepdims:
                    g = np.expand_dims(g, axis=axis)
                a._accumulate(np.broadcast_to(g, a.data.shape).copy())
            out._backward = bwd
        return out

    def mean(self, axis=None, keepdims=False):
        n = self.data.size if axis is None else np.prod([self.data.shape[i] for i in np.atleast_1d(axis)])
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / float(n))

    # -- elementwise nonlinearities --------------------------------------------

    def exp(self):
        a = self
        out_data = np.exp(a.data)
        out = Tensor._make(out_data, (a,), None)
        if out.requires_grad:
            out._backward = lambda g: a._accumulate(g * out_data)
        return out

    def log(self):
        a = self
        out = Tensor._make(np.log(a.data), (a,), None)
        if out.requires_grad:
            out._backward = lambda g: a._accumulate(g / a.data)
        return out

    def sqrt(self):
        a = self
        out_data = np.sqrt(a.data)
        out = Tensor._make(out_data, (a,), None)
        if out.requires_grad:
            out._backward = lambda g: a._accumulate(g * (0.5 / out_data))
        return out

    def tanh(self):
        a = self
        out_data = np.tanh(a.data)
        out = Tensor._make(out_data, (a,), None)
        if out.requires_grad:
            out._backward = lambda g: a._accumulate(g * (1.0 - out_data * out_data))
        return out

    def sigmoid(self):
        a = self
        out_data = 1.0 / (1.0 + np.exp(-a.data))
        out = Tensor._make(out_data.astype(a.data.dtype), (a,), None)
        if out.requires_grad:
            out._backward = lambda g: a._accumulate(g * out_data * (1.0 - out_data))
        return out

    def silu(self):
        a = self
        sig = 1.0 / (1.0 + np.exp(-a.data))
        out = Tensor._make((a.data * sig).astype(a.data.dtype), (a,), None)
        if out.requires_grad:
            out._backward = lambda g: a._accumulate(g * (sig * (1.0 + a.data * (1.0 - sig))))
        return out

    def gelu(self):
        # tanh approximation; exact-erf form is unnecessary at these scales
        a = self
        x = a.data
        c = x.dtype.type(np.sqrt(2.0 / np.pi))
        x2 = x * x
        t = np.tanh(c * (x + 0.044715 * (x2 * x)))
        out = Tensor._make(0.5 * x * (1.0 + t), (a,), None)
        if out.requires_grad:
            def bwd(g):
                dt = (1.0 - t * t) * c * (1.0 + 0.134145 * x2)
                a._accumulate(g * (0.5 * (1.0 + t) + 0.5 * x * dt))
            out._backward = bwd
        return out

    def softplus(self):
        a = self
        out = Tensor._make(np.logaddexp(0.0, a.data).astype(a.data.dtype), (a,), None)
        if out.requires_grad:
            sig = 1.0 / (1.0 + np.exp(-a.data))
            out._backward = lambda g: a._accumulate(g * sig)
        return out

    def relu(self):
        a = self
        mask = a.data > 0
        out = Tensor._make(np.where(mask, a.data, 0.0).astype(a.data.dtype), (a,), None)
        if out.requires_grad:
            out._backward = lambda g: a._accumulate(g * mask)
        return out


def concat(tensors, axis: int = 0) -> Tensor:
    datas = [t.data for t in tensors]
    out = Tensor._make(np.concatenate(datas, axis=axis), tuple(tensors), None)
    if out.requires_grad:
        sizes = [d.shape[axis] for d in datas]
        offsets = np.cumsum([0] + sizes)

        def bwd(g):
            for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
                if t.requires_grad:
                    idx = [slice(None)] * g.ndim
                    idx[axis] = slice(lo, hi)
                    t._accumulate(g[tuple(idx)])
        out._backward = bwd
    return out


def stack(tensors, axis: int = 0) -> Tensor:
    expanded = []
    for t in tensors:
        shape = list(t.shape)
        shape.insert(axis if axis >= 0 else t.ndim + 1 + axis, 1)
        expanded.append(t.reshape(*shape))
    return concat(expanded, axis=axis)


def where_const(mask: np.ndarray, a: Tensor, b: Tensor) -> Tensor:
    """Select by a constant boolean mask (no gradient through the mask)."""
    out = Tensor._make(np.where(mask, a.data, b.data), (a, b), None)
    if out.requires_grad:
        def bwd(g):
            if a.requires_grad:
                a._accumulate(_unbroadcast(np.where(mask, g, 0.0), a.data.shape))
            if b.requires_grad:
                b._accumulate(_unbroadcast(np.where(mask, 0.0, g), b.data.shape))
        out._backward = bwd
    return out


def logsumexp(x: Tensor, axis: int = -1, keepdims: bool = False) -> Tensor:
    m = np.max(x.data, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    shifted = x - Tensor(m)
    out = shifted.exp().sum(axis=axis, keepdims=True).log() + Tensor(m)
    if not keepdims:
        shape = list(out.shape)
        del shape[axis if axis >= 0 else len(shape) + axis]
        out = out.reshape(*shape)
    return out


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    return x - logsumexp(x, axis=axis, keepdims=True)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    return log_softmax(x, axis=axis).exp()
