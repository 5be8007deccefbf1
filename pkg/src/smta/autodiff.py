"""Dense float64 tensors with a recorded computation graph and reverse-mode gradients.

The graph is rebuilt on every forward pass: each operation returns a fresh
Tensor node holding references to its inputs and a closure that propagates
the adjoint. `backward` walks the recorded nodes once, in reverse
topological order, and returns the gradient for every requires_grad leaf.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

__all__ = [
    "Tensor",
    "backward",
    "linear",
    "conv2d",
    "channel_broadcast",
    "softmax_channel",
    "finite_difference_gradient",
]


class Tensor:
    """A dense float64 array plus its position in the recorded graph."""

    __slots__ = ("data", "requires_grad", "_prev", "_backward", "_op")

    def __init__(self, data, requires_grad: bool = False, _prev=(), _op: str = "leaf"):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad) or any(t.requires_grad for t in _prev)
        self._prev = _prev
        self._backward = None
        self._op = _op

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() on tensor of shape {self.data.shape}")
        return float(self.data.reshape(()))

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, op={self._op!r}, requires_grad={self.requires_grad})"

    # -- elementwise arithmetic (same shape, or python scalar) --

    def __add__(self, other):
        if isinstance(other, Tensor):
            _check_same_shape("add", self, other)
            out = Tensor(self.data + other.data, _prev=(self, other), _op="add")

            def bwd(g, acc):
                acc(self, g)
                acc(other, g)

        else:
            out = Tensor(self.data + float(other), _prev=(self,), _op="add")

            def bwd(g, acc):
                acc(self, g)

        out._backward = bwd
        return out

    def __radd__(self, other):
        return self + other

    def __neg__(self):
        return self * -1.0

    def __sub__(self, other):
        return self + (-other if isinstance(other, Tensor) else -float(other))

    def __rsub__(self, other):
        return (-self) + other

    def __mul__(self, other):
        if isinstance(other, Tensor):
            _check_same_shape("mul", self, other)
            out = Tensor(self.data * other.data, _prev=(self, other), _op="mul")

            def bwd(g, acc):
                acc(self, g * other.data)
                acc(other, g * self.data)

        else:
            c = float(other)
            out = Tensor(self.data * c, _prev=(self,), _op="scale")

            def bwd(g, acc):
                acc(self, g * c)

        out._backward = bwd
        return out

    def __rmul__(self, other):
        return self * other

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            _check_same_shape("div", self, other)
            out = Tensor(self.data / other.data, _prev=(self, other), _op="div")

            def bwd(g, acc):
                acc(self, g / other.data)
                acc(other, -g * self.data / (other.data * other.data))

            out._backward = bwd
            return out
        return self * (1.0 / float(other))

    # -- reductions --

    def sum(self, axis: int | None = None) -> "Tensor":
        if axis is None:
            out = Tensor(self.data.sum(), _prev=(self,), _op="sum")
            shape = self.data.shape

            def bwd(g, acc):
                acc(self, np.broadcast_to(g, shape))

        elif axis == 0:
            out = Tensor(self.data.sum(axis=0), _prev=(self,), _op="sum0")
            shape = self.data.shape

            def bwd(g, acc):
                acc(self, np.broadcast_to(g, shape))

        else:
            raise ValueError(f"sum supports axis None or 0, got {axis}")
        out._backward = bwd
        return out

    def mean(self) -> "Tensor":
        n = self.data.size
        out = Tensor(self.data.mean(), _prev=(self,), _op="mean")
        shape = self.data.shape

        def bwd(g, acc):
            acc(self, np.broadcast_to(g / n, shape))

        out._backward = bwd
        return out

    # -- elementwise nonlinearities --

    def relu(self) -> "Tensor":
        out = Tensor(np.maximum(self.data, 0.0), _prev=(self,), _op="relu")
        mask = self.data > 0  # subgradient at exactly 0 is 0

        def bwd(g, acc):
            acc(self, g * mask)

        out._backward = bwd
        return out

    def log(self) -> "Tensor":
        out = Tensor(np.log(self.data), _prev=(self,), _op="log")
        x = self.data

        def bwd(g, acc):
            acc(self, g / x)

        out._backward = bwd
        return out

    def exp(self) -> "Tensor":
        out = Tensor(np.exp(self.data), _prev=(self,), _op="exp")
        y = out.data

        def bwd(g, acc):
            acc(self, g * y)

        out._backward = bwd
        return out

    def sqrt(self) -> "Tensor":
        out = Tensor(np.sqrt(self.data), _prev=(self,), _op="sqrt")
        # guarded at 0 so a flat zero input yields a zero (not NaN) gradient
        denom = np.maximum(out.data, 1e-12)

        def bwd(g, acc):
            acc(self, g * 0.5 / denom)

        out._backward = bwd
        return out

    def abs(self) -> "Tensor":
        # |x| = relu(x) + relu(-x); subgradient at 0 is 0 under the relu convention
        return self.relu() + (-self).relu()


def _check_same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.data.shape != b.data.shape:
        raise ValueError(f"{op}: shape mismatch, expected {a.data.shape}, got {b.data.shape}")


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """y = x @ w + b for x [n, in], w [in, out], b [out]."""
    if x.data.ndim != 2 or w.data.ndim != 2:
        raise ValueError(f"linear: expected 2-d operands, got {x.data.shape} and {w.data.shape}")
    if x.data.shape[1] != w.data.shape[0]:
        raise ValueError(
            f"linear: shape mismatch, expected x[*,{w.data.shape[0]}], got x{list(x.data.shape)}"
        )
    if b.data.shape != (w.data.shape[1],):
        raise ValueError(
            f"linear: bias shape mismatch, expected ({w.data.shape[1]},), got {b.data.shape}"
        )
    out = Tensor(x.data @ w.data + b.data, _prev=(x, w, b), _op="linear")
    xd, wd = x.data, w.data

    def bwd(g, acc):
        acc(x, g @ wd.T)
        acc(w, xd.T @ g)
        acc(b, g.sum(axis=0))

    out._backward = bwd
    return out


def _conv2d_raw(x: np.ndarray, k: np.ndarray):
    """Stride-1, zero same-padded 3x3 cross-correlation; returns (out, im2col matrix)."""
    c, h, w = x.shape
    f = k.shape[0]
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (3, 3), axis=(1, 2))
    cols = win.transpose(1, 2, 0, 3, 4).reshape(h * w, c * 9)
    out = cols @ k.reshape(f, c * 9).T
    return out.T.reshape(f, h, w), cols


def conv2d(x: Tensor, k: Tensor, b: Tensor) -> Tensor:
    """Cross-correlate x [C,H,W] with k [F,C,3,3] (same padding, stride 1), add b [F]."""
    if x.data.ndim != 3 or k.data.ndim != 4:
        raise ValueError(f"conv2d: expected x [C,H,W] and k [F,C,3,3], got {x.data.shape}, {k.data.shape}")
    if k.data.shape[2:] != (3, 3):
        raise ValueError(f"conv2d: kernel must be 3x3, got {k.data.shape[2:]}")
    if x.data.shape[0] != k.data.shape[1]:
        raise ValueError(
            f"conv2d: channel mismatch, expected {k.data.shape[1]} input channels, got {x.data.shape[0]}"
        )
    if b.data.shape != (k.data.shape[0],):
        raise ValueError(f"conv2d: bias shape mismatch, expected ({k.data.shape[0]},), got {b.data.shape}")

    raw, cols = _conv2d_raw(x.data, k.data)
    out = Tensor(raw + b.data[:, None, None], _prev=(x, k, b), _op="conv2d")
    kd = k.data
    f = kd.shape[0]

    def bwd(g, acc):
        if x.requires_grad:
            # dx is the same correlation of g with the channel-transposed, spatially
            # flipped kernel
            kt = kd.transpose(1, 0, 2, 3)[:, :, ::-1, ::-1]
            acc(x, _conv2d_raw(np.ascontiguousarray(g), np.ascontiguousarray(kt))[0])
        if k.requires_grad:
            gf = g.reshape(f, -1)
            acc(k, (gf @ cols).reshape(kd.shape))
        if b.requires_grad:
            acc(b, g.sum(axis=(1, 2)))

    out._backward = bwd
    return out


def channel_broadcast(t: Tensor, channels: int) -> Tensor:
    """Repeat a [H,W] map along a new leading channel axis, differentiably."""
    out = Tensor(np.broadcast_to(t.data, (channels,) + t.data.shape), _prev=(t,), _op="bcast")

    def bwd(g, acc):
        acc(t, g.sum(axis=0))

    out._backward = bwd
    return out


def softmax_channel(x: Tensor) -> Tensor:
    """Softmax over axis 0 (the channel axis) of x [C,...]."""
    shifted = x.data - x.data.max(axis=0, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=0, keepdims=True)
    out = Tensor(s, _prev=(x,), _op="softmax")

    def bwd(g, acc):
        acc(x, s * (g - (g * s).sum(axis=0, keepdims=True)))

    out._backward = bwd
    return out


def backward(root: Tensor) -> dict[Tensor, np.ndarray]:
    """Reverse-accumulate d(root)/d(leaf) for every requires_grad leaf under root.

    root must be scalar. Pure: neither the graph nor any tensor is mutated,
    so repeated calls on the same graph return identical gradients.
    """
    if root.data.shape != ():
        raise ValueError(f"backward root must be scalar, got shape {root.data.shape}")

    # iterative topological order over the requires_grad subgraph
    topo: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for child in node._prev:
            if child.requires_grad and id(child) not in visited:
                stack.append((child, False))

    grads: dict[Tensor, np.ndarray] = {root: np.ones(())}

    def acc(t: Tensor, g: np.ndarray) -> None:
        if t.requires_grad:
            ex = grads.get(t)
            grads[t] = g if ex is None else ex + g

    for node in reversed(topo):
        if node._backward is not None and node in grads:
            node._backward(grads[node], acc)

    return {t: g for t, g in grads.items() if not t._prev and t.requires_grad}


def finite_difference_gradient(f: Callable[[Tensor], object], x: Tensor, h: float = 1e-4) -> np.ndarray:
    """Central-difference gradient of a scalar function, one coordinate at a time."""
    if h <= 0:
        raise ValueError(f"h must be positive, got {h}")

    def evaluate() -> float:
        y = f(x)
        return y.item() if isinstance(y, Tensor) else float(y)

    flat = x.data.reshape(-1)
    grad = np.empty_like(flat)
    for j in range(flat.size):
        orig = flat[j]
        flat[j] = orig + h
        fp = evaluate()
        flat[j] = orig - h
        fm = evaluate()
        flat[j] = orig
        grad[j] = (fp - fm) / (2.0 * h)
    return grad.reshape(x.data.shape)
