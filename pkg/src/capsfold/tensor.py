"""Minimal reverse-mode autodiff over numpy arrays.

Operations are recorded on the innermost active :class:`Tape` whenever one
of their inputs requires a gradient. ``Tape.backward`` walks the recorded
nodes in reverse order and accumulates gradients additively, so a tensor
feeding several consumers receives the sum of their contributions.

    >>> w = Tensor(np.ones(3), requires_grad=True)
    >>> with Tape() as tape:
    ...     loss = reduce_sum(w * w)
    >>> tape.backward(loss)
    >>> w.grad
    array([2., 2., 2.])
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ShapeMismatch, TapeMissing

DEFAULT_DTYPE = np.float64

_active: list["Tape"] = []


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_node")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype)
        if dtype is None and not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self._node = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __getitem__(self, index):
        return take(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype or DEFAULT_DTYPE))


class _Node:
    __slots__ = ("output", "inputs", "backward", "name")

    def __init__(self, output, inputs, backward, name):
        self.output = output
        self.inputs = inputs
        self.backward = backward
        self.name = name


class Tape:
    """Ordered record of differentiable operations."""

    def __init__(self):
        self.nodes: list[_Node] = []
        self.visit_order: list[int] = []
        self._pos: dict[_Node, int] = {}

    def _append(self, node: _Node):
        self._pos[node] = len(self.nodes)
        self.nodes.append(node)

    def __enter__(self):
        _active.append(self)
        return self

    def __exit__(self, *exc):
        _active.remove(self)
        return False

    def __len__(self):
        return len(self.nodes)

    def backward(self, root: Tensor, grad=None) -> None:
        """Accumulate d(root)/d(leaf) into ``leaf.grad`` for every leaf
        that requires a gradient."""
        node = root._node
        if node is None or node not in self._pos:
            raise TapeMissing("tensor was not produced by an operation on this tape")
        if grad is None:
            grad = np.ones_like(root.data)
        grads = {id(root): np.asarray(grad, dtype=root.dtype)}
        leaves = {}
        self.visit_order = []
        for i in range(self._pos[node], -1, -1):
            n = self.nodes[i]
            g = grads.pop(id(n.output), None)
            if g is None:
                continue
            self.visit_order.append(i)
            in_grads = n.backward(g)
            for t, gi in zip(n.inputs, in_grads):
                if gi is None or not t.requires_grad:
                    continue
                if t._node is None:
                    leaves[id(t)] = t
                key = id(t)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
        for key, t in leaves.items():
            g = grads.get(key)
            if g is None:
                continue
            t.grad = g.copy() if t.grad is None else t.grad + g


def record(data: np.ndarray, inputs: Sequence[Tensor], backward: Callable, name: str = "") -> Tensor:
    """Wrap ``data`` as the output of an operation on ``inputs``.

    ``backward(upstream)`` must return one gradient (or None) per input.
    Exposed so model code can register fused operations with exact rules.
    """
    out = Tensor(data)
    if _active and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._node = _Node(out, tuple(inputs), backward, name)
        _active[-1]._append(out._node)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# -- elementwise -----------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return record(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
        "add",
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return record(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
        "sub",
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return record(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
        "mul",
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return record(
        a.data / b.data,
        (a, b),
        lambda g: (
            _unbroadcast(g / b.data, a.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.shape),
        ),
        "div",
    )


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return record(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,), "relu")


# -- shape -----------------------------------------------------------------


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeMismatch(f"cannot reshape {x.shape} to {shape}") from None
    return record(out, (x,), lambda g: (g.reshape(x.shape),), "reshape")


def flatten(x: Tensor) -> Tensor:
    return reshape(x, (-1,))


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return record(x.data.transpose(axes), (x,), lambda g: (g.transpose(inverse),), "transpose")


def take(x: Tensor, index) -> Tensor:
    def backward(g):
        full = np.zeros_like(x.data)
        np.add.at(full, index, g)
        return (full,)

    return record(np.asarray(x.data[index]), (x,), backward, "take")


# -- reductions ------------------------------------------------------------


def reduce_sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return record(np.asarray(out), (x,), backward, "sum")


def norm_along_axis(x: Tensor, axis: int = -1, keepdims: bool = False) -> Tensor:
    """Euclidean norm; the gradient at a zero vector is taken as zero."""
    n = np.sqrt(np.sum(x.data * x.data, axis=axis, keepdims=True))

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        safe = np.where(n > 0, n, 1.0)
        return (np.where(n > 0, g * x.data / safe, 0.0),)

    out = n if keepdims else np.squeeze(n, axis=axis)
    return record(out, (x,), backward, "norm")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (y * (g - np.sum(g * y, axis=axis, keepdims=True)),)

    return record(y, (x,), backward, "softmax")


# -- batched affine maps ---------------------------------------------------


def _parse_einsum(subscripts: str, n_ops: int):
    if "->" not in subscripts or "." in subscripts:
        raise ValueError("einsum needs explicit output subscripts and no ellipsis")
    lhs, out = subscripts.replace(" ", "").split("->")
    ins = lhs.split(",")
    if len(ins) != n_ops:
        raise ShapeMismatch(f"{len(ins)} subscripts for {n_ops} operands")
    for s in ins + [out]:
        if len(set(s)) != len(s):
            raise ValueError("repeated subscripts within one operand are not supported")
    return ins, out


def einsum(subscripts: str, *operands) -> Tensor:
    """Differentiable einsum with explicit output, e.g. 'ijdp,ip->ijd'."""
    ops = [as_tensor(o) for o in operands]
    ins, out = _parse_einsum(subscripts, len(ops))
    try:
        value = np.einsum(subscripts, *(o.data for o in ops), optimize=True)
    except ValueError as exc:
        raise ShapeMismatch(str(exc)) from None

    def backward(g):
        grads = []
        for k, t in enumerate(ops):
            if not t.requires_grad:
                grads.append(None)
                continue
            others = [s for j, s in enumerate(ins) if j != k]
            avail = set(out).union(*others) if others else set(out)
            target = "".join(ch for ch in ins[k] if ch in avail)
            expr = ",".join([out] + others) + "->" + target
            gk = np.einsum(expr, g, *(o.data for j, o in enumerate(ops) if j != k), optimize=True)
            if target != ins[k]:
                for ax, ch in enumerate(ins[k]):
                    if ch not in avail:
                        gk = np.expand_dims(gk, ax)
                gk = np.broadcast_to(gk, t.shape).copy()
            grads.append(gk)
        return grads

    return record(np.asarray(value), ops, backward, "einsum")


# -- convolution -----------------------------------------------------------


@dataclass(frozen=True)
class ConvSpec:
    kernel_size: int
    stride: int
    in_channels: int
    out_channels: int

    def __post_init__(self):
        if min(self.kernel_size, self.stride, self.in_channels, self.out_channels) < 1:
            raise ValueError(f"all ConvSpec fields must be positive: {self}")

    def output_shape(self, spatial: Sequence[int]) -> tuple[int, ...]:
        return conv_output_shape(spatial, self.kernel_size, self.stride)

    def weight_shape(self, ndim: int) -> tuple[int, ...]:
        return (self.out_channels, self.in_channels) + (self.kernel_size,) * ndim


def conv_output_shape(spatial: Sequence[int], kernel_size: int, stride: int) -> tuple[int, ...]:
    if any(n < kernel_size for n in spatial):
        raise ShapeMismatch(f"spatial extent {tuple(spatial)} smaller than kernel {kernel_size}")
    return tuple((n - kernel_size) // stride + 1 for n in spatial)


def _windows(x: np.ndarray, k: int, stride: int, out: tuple[int, ...]) -> np.ndarray:
    nd = len(out)
    win = sliding_window_view(x, (k,) * nd, axis=tuple(range(1, nd + 1)))
    sl = (slice(None),) + tuple(slice(0, stride * (o - 1) + 1, stride) for o in out)
    return win[sl]


def conv_forward(x: Tensor, weights: Tensor, bias: Tensor | None = None, stride: int = 1) -> Tensor:
    """Valid (unpadded) strided cross-correlation over 2 or 3 spatial dims.

    x: (C_in, *spatial); weights: (C_out, C_in, k, ..., k); bias: (C_out,).
    Output: (C_out, *[(n - k) // stride + 1 for n in spatial]).
    """
    x, weights = as_tensor(x), as_tensor(weights)
    nd = x.ndim - 1
    if nd not in (2, 3) or weights.ndim != nd + 2:
        raise ShapeMismatch(f"conv expects 2 or 3 spatial dims, got input {x.shape}, weights {weights.shape}")
    c_out, c_in = weights.shape[:2]
    k = weights.shape[2]
    if c_in != x.shape[0] or any(s != k for s in weights.shape[2:]):
        raise ShapeMismatch(f"weights {weights.shape} incompatible with input {x.shape}")
    if stride < 1:
        raise ValueError("stride must be positive")
    out_sp = conv_output_shape(x.shape[1:], k, stride)
    win = _windows(x.data, k, stride, out_sp)  # (C, *out, *k)
    k_axes = list(range(nd + 1, 2 * nd + 1))
    y = np.tensordot(weights.data, win, axes=([1] + list(range(2, nd + 2)), [0] + k_axes))
    inputs = [x, weights]
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (c_out,):
            raise ShapeMismatch(f"bias shape {bias.shape} != ({c_out},)")
        y = y + bias.data.reshape((c_out,) + (1,) * nd)
        inputs.append(bias)

    def backward(g):
        gx = gw = gb = None
        sp_axes = list(range(1, nd + 1))
        if weights.requires_grad:
            gw = np.tensordot(g, win, axes=(sp_axes, sp_axes))  # (F, C, *k)
        if bias is not None and bias.requires_grad:
            gb = g.sum(axis=tuple(sp_axes))
        if x.requires_grad:
            gx = np.zeros_like(x.data)
            # (C, *k, *out): every kernel offset scatters back a strided slab
            cols = np.tensordot(weights.data, g, axes=([0], [0]))
            for off in np.ndindex(*(k,) * nd):
                dst = (slice(None),) + tuple(
                    slice(o, o + stride * (n - 1) + 1, stride) for o, n in zip(off, out_sp)
                )
                gx[dst] += cols[(slice(None),) + off]
        grads = [gx, gw]
        if bias is not None:
            grads.append(gb)
        return grads

    return record(y, inputs, backward, "conv")
