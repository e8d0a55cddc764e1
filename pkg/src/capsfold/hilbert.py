"""N-dimensional Hilbert curve encode/decode.

Uses Skilling's transpose construction (Gray-code decode followed by
per-bit rotations), vectorized over arrays of indices. The orientation is
frozen: in 2D at order 1 the curve visits (0,0), (0,1), (1,1), (1,0).

Reference: J. Skilling, "Programming the Hilbert curve", AIP Conf. Proc.
707 (2004).
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .errors import IndexOutOfRange


def _check(order: int, dimension: int):
    if order < 1 or dimension < 1:
        raise ValueError("order and dimension must be positive")
    if order * dimension > 62:
        raise ValueError("curve too large for 64-bit indices")


def _transpose_to_axes(x: np.ndarray, order: int) -> np.ndarray:
    # x: (n, N) transposed index -> axes, in place
    n = x.shape[0]
    big = 2 << (order - 1)
    t = x[n - 1] >> 1
    for i in range(n - 1, 0, -1):
        x[i] ^= x[i - 1]
    x[0] ^= t
    q = 2
    while q != big:
        p = q - 1
        for i in range(n - 1, -1, -1):
            hit = (x[i] & q) != 0
            x[0] ^= np.where(hit, p, 0)
            t = np.where(hit, 0, (x[0] ^ x[i]) & p)
            x[0] ^= t
            x[i] ^= t
        q <<= 1
    return x


def _axes_to_transpose(x: np.ndarray, order: int) -> np.ndarray:
    n = x.shape[0]
    m = 1 << (order - 1)
    q = m
    while q > 1:
        p = q - 1
        for i in range(n):
            hit = (x[i] & q) != 0
            x[0] ^= np.where(hit, p, 0)
            t = np.where(hit, 0, (x[0] ^ x[i]) & p)
            x[0] ^= t
            x[i] ^= t
        q >>= 1
    for i in range(1, n):
        x[i] ^= x[i - 1]
    t = np.zeros_like(x[0])
    q = m
    while q > 1:
        t ^= np.where((x[n - 1] & q) != 0, q - 1, 0)
        q >>= 1
    x ^= t
    return x


def _index_to_transpose(h: np.ndarray, order: int, dimension: int) -> np.ndarray:
    x = np.zeros((dimension, h.size), dtype=np.int64)
    bit = order * dimension - 1
    for b in range(order - 1, -1, -1):
        for i in range(dimension):
            x[i] |= ((h >> bit) & 1) << b
            bit -= 1
    return x


def _transpose_to_index(x: np.ndarray, order: int, dimension: int) -> np.ndarray:
    h = np.zeros(x.shape[1], dtype=np.int64)
    for b in range(order - 1, -1, -1):
        for i in range(dimension):
            h = (h << 1) | ((x[i] >> b) & 1)
    return h


def d2xyz_array(order: int, dimension: int, indices) -> np.ndarray:
    """Cells visited at the given curve positions, shape (N, dimension)."""
    _check(order, dimension)
    h = np.atleast_1d(np.asarray(indices, dtype=np.int64))
    if h.size and (h.min() < 0 or h.max() >= 1 << (order * dimension)):
        raise IndexOutOfRange(
            f"Hilbert index outside [0, 2^{order * dimension}) for order {order}, dim {dimension}"
        )
    x = _index_to_transpose(h, order, dimension)
    return _transpose_to_axes(x, order).T.copy()


def xyz2d_array(order: int, dimension: int, cells) -> np.ndarray:
    """Curve positions of the given cells (N, dimension) -> (N,)."""
    _check(order, dimension)
    c = np.asarray(cells, dtype=np.int64).reshape(-1, dimension)
    if c.size and (c.min() < 0 or c.max() >= 1 << order):
        raise IndexOutOfRange(f"cell coordinate outside [0, {1 << order})")
    x = np.ascontiguousarray(c.T)
    return _transpose_to_index(_axes_to_transpose(x, order), order, dimension)


def hilbert_d2xyz(order: int, dimension: int, index: int) -> tuple[int, ...]:
    return tuple(int(v) for v in d2xyz_array(order, dimension, [index])[0])


def hilbert_xyz2d(order: int, dimension: int, cell) -> int:
    return int(xyz2d_array(order, dimension, [tuple(cell)])[0])


@lru_cache(maxsize=16)
def curve(order: int, dimension: int) -> np.ndarray:
    """Full traversal, (2**(order*dimension), dimension), read-only."""
    cells = d2xyz_array(order, dimension, np.arange(1 << (order * dimension)))
    cells.setflags(write=False)
    return cells


@dataclass(frozen=True)
class HilbertIndex:
    order: int
    dimension: int

    def __post_init__(self):
        _check(self.order, self.dimension)

    @property
    def side(self) -> int:
        return 1 << self.order

    def __len__(self) -> int:
        return 1 << (self.order * self.dimension)

    def d2xyz(self, index: int) -> tuple[int, ...]:
        return hilbert_d2xyz(self.order, self.dimension, index)

    def xyz2d(self, cell) -> int:
        return hilbert_xyz2d(self.order, self.dimension, cell)

    def cells(self) -> np.ndarray:
        return curve(self.order, self.dimension)
