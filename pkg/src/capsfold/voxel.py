"""Voxel encodings of a ProteinStructure.

The 3D encoding is a binary 8 x S x S x S occupancy cube (S = 64 by
default, 1 A voxels) centred on the atom centroid. The 2D encoding reads
each channel of the cube along a 3D Hilbert curve and lays the resulting
sequence along a 2D Hilbert curve, e.g. 64^3 = 262144 = 512^2.

Array axes are (channel, x, y, z) for cubes and (channel, x, y) for planes.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import hilbert
from ._io import atomic_write
from .errors import EmptyStructure, FormatError, ShapeMismatch
from .pdb import N_CHANNELS, ChannelClass, ProteinStructure, classify_residue

GRID_SIZE = 64
PLANE_SIZE = 512

# coordinates are quantized to the PDB column precision before binning
_MILLI = 1000


@dataclass(frozen=True, eq=False)
class VoxelGrid3D:
    data: np.ndarray
    voxel_size: float = 1.0
    origin: tuple[float, float, float] | None = None
    dropped_atoms: int = 0

    def __post_init__(self):
        if self.data.ndim != 4 or self.data.shape[0] != N_CHANNELS:
            raise ShapeMismatch(f"expected (8, S, S, S) cube, got {self.data.shape}")
        if len(set(self.data.shape[1:])) != 1:
            raise ShapeMismatch(f"cube must have equal extents, got {self.data.shape}")

    @property
    def size(self) -> int:
        return self.data.shape[1]

    @property
    def dimension(self) -> int:
        return 3

    def popcount(self) -> np.ndarray:
        return self.data.reshape(N_CHANNELS, -1).sum(axis=1, dtype=np.int64)


@dataclass(frozen=True, eq=False)
class VoxelGrid2D:
    data: np.ndarray
    source_size: int = GRID_SIZE
    voxel_size: float = 1.0

    def __post_init__(self):
        if self.data.ndim != 3 or self.data.shape[0] != N_CHANNELS:
            raise ShapeMismatch(f"expected (8, P, P) plane, got {self.data.shape}")

    @property
    def size(self) -> int:
        return self.data.shape[1]

    @property
    def dimension(self) -> int:
        return 2

    def popcount(self) -> np.ndarray:
        return self.data.reshape(N_CHANNELS, -1).sum(axis=1, dtype=np.int64)


def atom_channels(structure: ProteinStructure) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-atom (side-chain class or -1, is_CA, is_CB) in file order."""
    side, ca, cb = [], [], []
    for r in structure.residues:
        cls = classify_residue(r.residue_name)
        c = -1 if cls is None else int(cls)
        for a in r.atoms:
            side.append(c)
            ca.append(a.name == "CA")
            cb.append(a.name == "CB")
    return np.array(side, dtype=np.int64), np.array(ca, bool), np.array(cb, bool)


def voxelize3d(
    structure: ProteinStructure,
    size: int = GRID_SIZE,
    voxel_size: float = 1.0,
    counts: bool = False,
) -> VoxelGrid3D:
    """Bin atoms into an 8-channel cube centred on the atom centroid.

    Cell of an atom = floor((p - centroid) / voxel_size) + size / 2, computed
    exactly on milli-angstrom integers so rigid translations by any amount
    representable in PDB columns give bit-identical grids. Atoms outside
    [0, size)^3 are dropped and counted. With ``counts`` the cube holds atom
    counts instead of binary presence.
    """
    if structure.n_atoms == 0:
        raise EmptyStructure(f"{structure.source_id or 'structure'} has no atoms")
    if size % 2:
        raise ValueError("grid size must be even")
    step = int(round(voxel_size * _MILLI))
    if step <= 0:
        raise ValueError("voxel_size must be positive")

    q = np.rint(structure.coordinates * _MILLI).astype(np.int64)
    n = q.shape[0]
    total = q.sum(axis=0)
    cells = (n * q - total) // (n * step) + size // 2
    inside = np.all((cells >= 0) & (cells < size), axis=1)

    side, is_ca, is_cb = atom_channels(structure)
    dtype = np.int32 if counts else np.uint8
    data = np.zeros((N_CHANNELS, size, size, size), dtype=dtype)
    for channel, mask in _channel_masks(side, is_ca, is_cb):
        sel = cells[mask & inside]
        if counts:
            np.add.at(data[channel], (sel[:, 0], sel[:, 1], sel[:, 2]), 1)
        else:
            data[channel, sel[:, 0], sel[:, 1], sel[:, 2]] = 1

    centroid = total / (n * _MILLI)
    origin = tuple(float(c) for c in centroid - (size // 2) * step / _MILLI)
    data.setflags(write=False)
    return VoxelGrid3D(data, voxel_size, origin, int(n - inside.sum()))


def _channel_masks(side, is_ca, is_cb):
    for c in range(6):
        yield c, side == c
    yield int(ChannelClass.ALPHA_CARBON), is_ca
    yield int(ChannelClass.BETA_CARBON), is_cb


@lru_cache(maxsize=8)
def _fold_maps(size: int) -> tuple[np.ndarray, np.ndarray, int]:
    """Flat cube indices and flat plane indices paired along the curves."""
    order3 = size.bit_length() - 1
    if size < 2 or 1 << order3 != size or (3 * order3) % 2:
        raise ShapeMismatch(
            f"cube side {size} must be 2^k with 3k even to fold into a square plane"
        )
    order2 = 3 * order3 // 2
    c3 = hilbert.curve(order3, 3)
    c2 = hilbert.curve(order2, 2)
    flat3 = (c3[:, 0] * size + c3[:, 1]) * size + c3[:, 2]
    side2 = 1 << order2
    flat2 = c2[:, 0] * side2 + c2[:, 1]
    return flat3, flat2, side2


def fold_to_2d(grid: VoxelGrid3D) -> VoxelGrid2D:
    """Lay each channel's 3D Hilbert traversal along a 2D Hilbert curve."""
    if not isinstance(grid, VoxelGrid3D):
        raise ShapeMismatch("fold_to_2d expects a VoxelGrid3D")
    flat3, flat2, side2 = _fold_maps(grid.size)
    src = grid.data.reshape(N_CHANNELS, -1)
    plane = np.zeros((N_CHANNELS, side2 * side2), dtype=grid.data.dtype)
    plane[:, flat2] = src[:, flat3]
    plane = plane.reshape(N_CHANNELS, side2, side2)
    plane.setflags(write=False)
    return VoxelGrid2D(plane, grid.size, grid.voxel_size)


def unfold_to_3d(grid: VoxelGrid2D) -> VoxelGrid3D:
    """Inverse of fold_to_2d."""
    size = grid.source_size
    flat3, flat2, side2 = _fold_maps(size)
    if grid.data.shape[1:] != (side2, side2):
        raise ShapeMismatch(f"plane {grid.data.shape[1:]} does not match cube side {size}")
    src = grid.data.reshape(N_CHANNELS, -1)
    cube = np.zeros((N_CHANNELS, size**3), dtype=grid.data.dtype)
    cube[:, flat3] = src[:, flat2]
    cube = cube.reshape(N_CHANNELS, size, size, size)
    cube.setflags(write=False)
    return VoxelGrid3D(cube, grid.voxel_size)


def encode(structure: ProteinStructure, mode: str, size: int = GRID_SIZE):
    """Voxelize in '3d' mode or voxelize and fold in '2d' mode."""
    cube = voxelize3d(structure, size=size)
    if mode == "3d":
        return cube
    if mode == "2d":
        return fold_to_2d(cube)
    raise ValueError(f"mode must be '2d' or '3d', got {mode!r}")


# -- CVOX binary format ----------------------------------------------------
# magic "CVOX", u8 version, u8 dimension, u8 channels, u8 dtype (0 = u8),
# little-endian u32 extent per spatial dimension, then the C-order payload.

CVOX_MAGIC = b"CVOX"
CVOX_VERSION = 1


def cvox_bytes(grid: VoxelGrid3D | VoxelGrid2D) -> bytes:
    data = grid.data
    if data.min(initial=0) < 0 or data.max(initial=0) > 255:
        raise FormatError("CVOX stores u8 occupancy only")
    dim = data.ndim - 1
    head = CVOX_MAGIC + struct.pack("<BBBB", CVOX_VERSION, dim, data.shape[0], 0)
    head += struct.pack(f"<{dim}I", *data.shape[1:])
    return head + np.ascontiguousarray(data, dtype=np.uint8).tobytes()


def write_cvox(path, grid) -> None:
    atomic_write(path, cvox_bytes(grid))


def parse_cvox(buf: bytes):
    if len(buf) < 8 or buf[:4] != CVOX_MAGIC:
        raise FormatError("not a CVOX file (bad magic)")
    version, dim, channels, dtype = struct.unpack_from("<BBBB", buf, 4)
    if version != CVOX_VERSION:
        raise FormatError(f"unsupported CVOX version {version}")
    if dim not in (2, 3) or channels != N_CHANNELS or dtype != 0:
        raise FormatError(f"unsupported CVOX layout dim={dim} channels={channels} dtype={dtype}")
    extents = struct.unpack_from(f"<{dim}I", buf, 8)
    offset = 8 + 4 * dim
    n = channels * int(np.prod(extents))
    if len(buf) - offset != n:
        raise FormatError(f"CVOX payload has {len(buf) - offset} bytes, expected {n}")
    data = np.frombuffer(buf, dtype=np.uint8, offset=offset).reshape(channels, *extents)
    if dim == 3:
        return VoxelGrid3D(data)
    # source cube side is implied by 3k = 2 * order of the plane
    order2 = extents[0].bit_length() - 1
    source = 1 << (2 * order2 // 3) if (2 * order2) % 3 == 0 else 0
    return VoxelGrid2D(data, source)


def read_cvox(path):
    with open(path, "rb") as fh:
        return parse_cvox(fh.read())
