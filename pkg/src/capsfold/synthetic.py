"""Seeded synthetic protein-like structures for toy datasets.

Two classes: 'rod' builds a straight alpha-helix-like backbone rich in
aliphatic and aromatic residues; 'globule' builds a compact random coil
rich in charged residues. Both carry N, CA, C, O and (except GLY) CB atoms,
so every voxel channel can be populated.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from ._io import atomic_write
from .pdb import Atom, ProteinStructure, Residue, format_pdb

_ROD_RESIDUES = ("ALA", "LEU", "VAL", "ILE", "PHE", "TRP", "MET", "GLY", "SER")
_ROD_WEIGHTS = (0.2, 0.2, 0.12, 0.12, 0.1, 0.06, 0.08, 0.06, 0.06)
_GLOB_RESIDUES = ("ASP", "GLU", "LYS", "ARG", "HIS", "GLY", "ASN", "GLN", "THR")
_GLOB_WEIGHTS = (0.16, 0.16, 0.16, 0.14, 0.08, 0.12, 0.08, 0.05, 0.05)

CLASS_KINDS = ("rod", "globule")


def _random_rotation(rng) -> np.ndarray:
    q, r = np.linalg.qr(rng.normal(size=(3, 3)))
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


def _rod_trace(n: int, rng) -> np.ndarray:
    t = np.arange(n)
    phase = rng.uniform(0, 2 * np.pi)
    ang = np.deg2rad(100.0) * t + phase
    return np.stack([2.3 * np.cos(ang), 2.3 * np.sin(ang), 1.5 * (t - n / 2)], axis=1)


def _globule_trace(n: int, rng, radius: float) -> np.ndarray:
    pts = [np.zeros(3)]
    while len(pts) < n:
        step = rng.normal(size=3)
        step *= 3.8 / np.linalg.norm(step)
        cand = pts[-1] + step
        if np.linalg.norm(cand) <= radius:
            pts.append(cand)
    return np.array(pts)


def make_structure(kind: str, rng, n_residues: int | None = None, scale: float = 1.0,
                   source_id: str = "SYN") -> ProteinStructure:
    """One synthetic structure; ``scale`` shrinks geometry for small grids."""
    if kind == "rod":
        n = n_residues or int(rng.integers(9, 13))
        trace = _rod_trace(n, rng)
        names = rng.choice(_ROD_RESIDUES, size=n, p=_ROD_WEIGHTS)
    elif kind == "globule":
        n = n_residues or int(rng.integers(12, 18))
        trace = _globule_trace(n, rng, radius=5.0)
        names = rng.choice(_GLOB_RESIDUES, size=n, p=_GLOB_WEIGHTS)
    else:
        raise ValueError(f"unknown kind {kind!r}; expected one of {CLASS_KINDS}")
    trace = (trace @ _random_rotation(rng).T) * scale + rng.normal(scale=2.0, size=3)

    residues = []
    serial = 1
    for i, (ca, res) in enumerate(zip(trace, names), start=1):
        offsets = {"N": (-1.2, 0.6, 0.0), "CA": (0, 0, 0), "C": (1.2, 0.6, 0.0), "O": (1.4, 1.8, 0.0)}
        if res != "GLY":
            offsets["CB"] = (0.0, -1.0, 1.2)
        atoms = []
        for name, off in offsets.items():
            pos = ca + np.asarray(off) * scale + rng.normal(scale=0.1 * scale, size=3)
            pos = tuple(float(round(c, 3)) for c in pos)
            atoms.append(Atom(serial, name, str(res), "A", i, pos, name[0]))
            serial += 1
        residues.append(Residue("A", i, str(res), tuple(atoms)))
    return ProteinStructure(source_id, tuple(residues))


def write_dataset(root, n_per_class: int, seed: int = 0, class_names=("HRAS", "KRAS"),
                  scale: float = 1.0) -> list[Path]:
    """Write ``<root>/<class>/<id>.pdb`` files; class k uses CLASS_KINDS[k]."""
    rng = np.random.default_rng(seed)
    root = Path(root)
    paths = []
    for k, cname in enumerate(class_names):
        for i in range(n_per_class):
            sid = f"{cname[:1]}{k}{i:03d}"
            st = make_structure(CLASS_KINDS[k % 2], rng, scale=scale, source_id=sid)
            path = root / cname / f"{sid}.pdb"
            atomic_write(path, format_pdb(st))
            paths.append(path)
    return paths
