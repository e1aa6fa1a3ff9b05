"""Minimal reverse-mode automatic differentiation over numpy arrays.

A `Tensor` wraps an ndarray (float32 or float64) plus an optional gradient
buffer and a backward closure. Operations record parents on a tape; calling
`backward()` on a scalar loss topologically sorts the tape and accumulates
gradients. Elementwise GELU, LayerNorm, and row softmax defer to the kernel
backends in `sttm.kernels`; everything else is plain numpy.

Only what the models need is implemented. Shapes follow numpy broadcasting;
gradients of broadcast operands are reduced back to the operand shape.
"""

from __future__ import annotations

from contextlib import contextmanager

import numpy as np

from . import kernels

__all__ = ["Tensor", "no_grad", "is_grad_enabled", "concat"]

_FLOAT_DTYPES = (np.float32, np.float64)

_grad_enabled = True


@contextmanager
def no_grad():
    """Disable tape recording inside the block (evaluation, sampling)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data)
        if arr.dtype not in _FLOAT_DTYPES:
            raise TypeError(f"Tensor data must be float32 or float64, got {arr.dtype}")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None

    # -- bookkeeping --------------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self) -> str:  # pragma: no cover - debugging aid
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self, grad: np.ndarray | None = None) -> None:
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without an explicit gradient requires a scalar")
            grad = np.ones_like(self.data)
        topo: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in visited:
                    stack.append((parent, False))
        self._accumulate(np.asarray(grad, dtype=self.data.dtype))
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward()

    # -- construction helpers ------------------------------------------------

    def _wrap(self, data: np.ndarray, parents: tuple["Tensor", ...]) -> "Tensor":
        out = Tensor(data)
        if _grad_enabled and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = parents
        return out

    def _coerce(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            return other
        return Tensor(np.asarray(other, dtype=self.data.dtype))

    # -- arithmetic ----------------------------------------------------------

    def __add__(self, other) -> "Tensor":
        other = self._coerce(other)
        out = self._wrap(self.data + other.data, (self, other))
        if out.requires_grad:

            def bw():
                if self.requires_grad:
                    self._accumulate(_unbroadcast(out.grad, self.data.shape))
                if other.requires_grad:
                    other._accumulate(_unbroadcast(out.grad, other.data.shape))

            out._backward = bw
        return out

    __radd__ = __add__

    def __sub__(self, other) -> "Tensor":
        other = self._coerce(other)
        out = self._wrap(self.data - other.data, (self, other))
        if out.requires_grad:

            def bw():
                if self.requires_grad:
                    self._accumulate(_unbroadcast(out.grad, self.data.shape))
                if other.requires_grad:
                    other._accumulate(_unbroadcast(-out.grad, other.data.shape))

            out._backward = bw
        return out

    def __rsub__(self, other) -> "Tensor":
        return self._coerce(other) - self

    def __neg__(self) -> "Tensor":
        out = self._wrap(-self.data, (self,))
        if out.requires_grad:

            def bw():
                self._accumulate(-out.grad)

            out._backward = bw
        return out

    def __mul__(self, other) -> "Tensor":
        other = self._coerce(other)
        out = self._wrap(self.data * other.data, (self, other))
        if out.requires_grad:

            def bw():
                if self.requires_grad:
                    self._accumulate(_unbroadcast(out.grad * other.data, self.data.shape))
                if other.requires_grad:
                    other._accumulate(_unbroadcast(out.grad * self.data, other.data.shape))

            out._backward = bw
        return out

    __rmul__ = __mul__

    def __truediv__(self, other) -> "Tensor":
        other = self._coerce(other)
        out = self._wrap(self.data / other.data, (self, other))
        if out.requires_grad:

            def bw():
                if self.requires_grad:
                    self._accumulate(_unbroadcast(out.grad / other.data, self.data.shape))
                if other.requires_grad:
                    other._accumulate(
                        _unbroadcast(-out.grad * self.data / (other.data * other.data), other.data.shape)
                    )

            out._backward = bw
        return out

    def __rtruediv__(self, other) -> "Tensor":
        return self._coerce(other) / self

    def __pow__(self, exponent: float) -> "Tensor":
        if not isinstance(exponent, (int, float)):
            raise TypeError("only scalar exponents are supported")
        out = self._wrap(self.data**exponent, (self,))
        if out.requires_grad:

            def bw():
                self._accumulate(out.grad * exponent * self.data ** (exponent - 1))

            out._backward = bw
        return out

    def __matmul__(self, other: "Tensor") -> "Tensor":
        if self.data.ndim < 2 or other.data.ndim < 2:
            raise ValueError("matmul requires operands with at least 2 dimensions")
        out = self._wrap(self.data @ other.data, (self, other))
        if out.requires_grad:

            def bw():
                if self.requires_grad:
                    g = out.grad @ np.swapaxes(other.data, -1, -2)
                    self._accumulate(_unbroadcast(g, self.data.shape))
                if other.requires_grad:
                    g = np.swapaxes(self.data, -1, -2) @ out.grad
                    other._accumulate(_unbroadcast(g, other.data.shape))

            out._backward = bw
        return out

    # -- shape ops -----------------------------------------------------------

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        out = self._wrap(self.data.reshape(shape), (self,))
        if out.requires_grad:

            def bw():
                self._accumulate(out.grad.reshape(self.data.shape))

            out._backward = bw
        return out

    def transpose(self, axes: tuple[int, ...]) -> "Tensor":
        out = self._wrap(np.transpose(self.data, axes), (self,))
        if out.requires_grad:
            inverse = np.argsort(axes)

            def bw():
                self._accumulate(np.transpose(out.grad, inverse))

            out._backward = bw
        return out

    def broadcast_to(self, shape: tuple[int, ...]) -> "Tensor":
        out = self._wrap(np.broadcast_to(self.data, shape).copy(), (self,))
        if out.requires_grad:

            def bw():
                self._accumulate(_unbroadcast(out.grad, self.data.shape))

            out._backward = bw
        return out

    def __getitem__(self, idx) -> "Tensor":
        out = self._wrap(self.data[idx], (self,))
        if out.requires_grad:

            def bw():
                if self.grad is None:
                    self.grad = np.zeros_like(self.data)
                np.add.at(self.grad, idx, out.grad)

            out._backward = bw
        return out

    # -- elementwise ---------------------------------------------------------

    def exp(self) -> "Tensor":
        out = self._wrap(np.exp(self.data), (self,))
        if out.requires_grad:

            def bw():
                self._accumulate(out.grad * out.data)

            out._backward = bw
        return out

    def log(self) -> "Tensor":
        out = self._wrap(np.log(self.data), (self,))
        if out.requires_grad:

            def bw():
                self._accumulate(out.grad / self.data)

            out._backward = bw
        return out

    def sqrt(self) -> "Tensor":
        out = self._wrap(np.sqrt(self.data), (self,))
        if out.requires_grad:

            def bw():
                self._accumulate(out.grad * 0.5 / out.data)

            out._backward = bw
        return out

    def square(self) -> "Tensor":
        out = self._wrap(self.data * self.data, (self,))
        if out.requires_grad:

            def bw():
                self._accumulate(out.grad * 2.0 * self.data)

            out._backward = bw
        return out

    def abs(self) -> "Tensor":
        out = self._wrap(np.abs(self.data), (self,))
        if out.requires_grad:

            def bw():
                self._accumulate(out.grad * np.sign(self.data))

            out._backward = bw
        return out

    def gelu(self) -> "Tensor":
        out = self._wrap(kernels.gelu_fwd(self.data), (self,))
        if out.requires_grad:

            def bw():
                self._accumulate(kernels.gelu_bwd(self.data, out.grad))

            out._backward = bw
        return out

    def dropout(self, p: float, rng: np.random.Generator | None) -> "Tensor":
        """Inverted dropout; identity when `rng` is None (evaluation) or p == 0."""
        if not 0.0 <= p < 1.0:
            raise ValueError(f"dropout probability must be in [0, 1), got {p}")
        if rng is None or p == 0.0:
            return self
        keep = (rng.random(self.data.shape) >= p).astype(self.data.dtype)
        scale = np.asarray(1.0 / (1.0 - p), dtype=self.data.dtype)
        mask = keep * scale
        out = self._wrap(self.data * mask, (self,))
        if out.requires_grad:

            def bw():
                self._accumulate(out.grad * mask)

            out._backward = bw
        return out

    # -- reductions ----------------------------------------------------------

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        out = self._wrap(self.data.sum(axis=axis, keepdims=keepdims), (self,))
        if out.requires_grad:

            def bw():
                g = out.grad
                if axis is not None and not keepdims:
                    g = np.expand_dims(g, axis)
                self._accumulate(np.broadcast_to(g, self.data.shape).copy())

            out._backward = bw
        return out

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        out = self._wrap(self.data.mean(axis=axis, keepdims=keepdims), (self,))
        if out.requires_grad:
            scale = out.data.size / self.data.size

            def bw():
                g = out.grad
                if axis is not None and not keepdims:
                    g = np.expand_dims(g, axis)
                self._accumulate(np.broadcast_to(g, self.data.shape) * scale)

            out._backward = bw
        return out

    # -- fused normalizations --------------------------------------------------

    def softmax(self) -> "Tensor":
        """Softmax over the last axis (kernel-backed)."""
        flat = np.ascontiguousarray(self.data.reshape(-1, self.data.shape[-1]))
        y = kernels.softmax_fwd(flat).reshape(self.data.shape)
        out = self._wrap(y, (self,))
        if out.requires_grad:

            def bw():
                d = self.data.shape[-1]
                dx = kernels.softmax_bwd(out.data.reshape(-1, d), out.grad.reshape(-1, d))
                self._accumulate(dx.reshape(self.data.shape))

            out._backward = bw
        return out

    def log_softmax(self) -> "Tensor":
        """Log-softmax over the last axis, computed stably as one tape node."""
        shifted = self.data - self.data.max(axis=-1, keepdims=True)
        lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
        out = self._wrap(shifted - lse, (self,))
        if out.requires_grad:

            def bw():
                soft = np.exp(out.data)
                self._accumulate(out.grad - soft * out.grad.sum(axis=-1, keepdims=True))

            out._backward = bw
        return out

    def layer_norm(self, gamma: "Tensor", beta: "Tensor", eps: float = 1e-5) -> "Tensor":
        """LayerNorm over the last axis with affine parameters (kernel-backed)."""
        d = self.data.shape[-1]
        if gamma.data.shape != (d,) or beta.data.shape != (d,):
            raise ValueError("layer_norm affine parameters must match the last axis")
        flat = np.ascontiguousarray(self.data.reshape(-1, d))
        y, xhat, rstd = kernels.layernorm_fwd(flat, gamma.data, beta.data, eps)
        out = self._wrap(y.reshape(self.data.shape), (self, gamma, beta))
        if out.requires_grad:

            def bw():
                g = out.grad.reshape(-1, d)
                dx, dgamma, dbeta = kernels.layernorm_bwd(xhat, gamma.data, rstd, g)
                if self.requires_grad:
                    self._accumulate(dx.reshape(self.data.shape))
                if gamma.requires_grad:
                    gamma._accumulate(dgamma)
                if beta.requires_grad:
                    beta._accumulate(dbeta)

            out._backward = bw
        return out


def concat(tensors: list[Tensor], axis: int = -1) -> Tensor:
    """Concatenate tensors along `axis`; gradient splits back to each operand."""
    if not tensors:
        raise ValueError("concat needs at least one tensor")
    data = np.concatenate([t.data for t in tensors], axis=axis)
    out = tensors[0]._wrap(data, tuple(tensors))
    if out.requires_grad:
        sizes = [t.data.shape[axis] for t in tensors]
        offsets = np.cumsum([0] + sizes)
        ax = axis % data.ndim

        def bw():
            for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
                if t.requires_grad:
                    index = [slice(None)] * data.ndim
                    index[ax] = slice(lo, hi)
                    t._accumulate(out.grad[tuple(index)])

        out._backward = bw
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce a broadcast gradient back to the original operand shape."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)
