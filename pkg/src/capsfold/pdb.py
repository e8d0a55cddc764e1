"""PDB ingestion: fixed-column ATOM parsing, residue channel classes and
structural edits used by the perturbation studies.

Only ATOM records of the first model are read. HETATM (ligands, waters,
modified residues such as MSE) are skipped so that channel semantics stay
residue-based.
"""

from __future__ import annotations

import enum
import logging
import math
from dataclasses import dataclass, field, replace
from functools import cached_property
from typing import Union

import numpy as np

from .errors import EmptyStructure, MalformedRecord

log = logging.getLogger(__name__)


class ChannelClass(enum.IntEnum):
    """The 8 voxel channels, with stable indices."""

    ALIPHATIC = 0
    AROMATIC = 1
    NEUTRAL = 2
    ACID = 3
    BASIC = 4
    GLYCINE = 5
    ALPHA_CARBON = 6
    BETA_CARBON = 7

    @property
    def label(self) -> str:
        return self.name.replace("_", " ").title().replace(" ", "")


N_CHANNELS = len(ChannelClass)

_RESIDUE_CLASSES = {
    ChannelClass.ALIPHATIC: ("ALA", "VAL", "LEU", "ILE", "MET", "PRO"),
    ChannelClass.AROMATIC: ("PHE", "TRP", "TYR"),
    ChannelClass.NEUTRAL: ("SER", "THR", "ASN", "GLN", "CYS"),
    ChannelClass.ACID: ("ASP", "GLU"),
    ChannelClass.BASIC: ("LYS", "ARG", "HIS"),
    ChannelClass.GLYCINE: ("GLY",),
}
RESIDUE_TO_CLASS = {
    code: cls for cls, codes in _RESIDUE_CLASSES.items() for code in codes
}


def classify_residue(residue_name: str) -> ChannelClass | None:
    """Side-chain class of a 3-letter residue code, or None if unknown."""
    return RESIDUE_TO_CLASS.get(residue_name.strip().upper())


@dataclass(frozen=True)
class Atom:
    serial: int
    name: str
    residue_name: str
    chain_id: str
    residue_seq: int
    position: tuple[float, float, float]
    element: str = ""

    def __post_init__(self):
        if not all(math.isfinite(c) for c in self.position):
            raise ValueError(f"non-finite position {self.position}")
        if not self.name.strip() or not self.residue_name.strip():
            raise ValueError("atom and residue names must be non-empty")


@dataclass(frozen=True)
class Residue:
    chain_id: str
    residue_seq: int
    residue_name: str
    atoms: tuple[Atom, ...]

    def __post_init__(self):
        if not self.atoms:
            raise ValueError("a residue needs at least one atom")
        key = (self.chain_id, self.residue_seq, self.residue_name)
        for a in self.atoms:
            if (a.chain_id, a.residue_seq, a.residue_name) != key:
                raise ValueError(f"atom {a.serial} does not belong to residue {key}")

    @property
    def key(self) -> tuple[str, int]:
        return (self.chain_id, self.residue_seq)


@dataclass(frozen=True)
class ProteinStructure:
    source_id: str
    residues: tuple[Residue, ...]

    def __post_init__(self):
        keys = [r.key for r in self.residues]
        if len(set(keys)) != len(keys):
            raise ValueError("duplicate (chain_id, residue_seq) in structure")

    @property
    def atoms(self) -> list[Atom]:
        return [a for r in self.residues for a in r.atoms]

    @property
    def n_atoms(self) -> int:
        return sum(len(r.atoms) for r in self.residues)

    @cached_property
    def coordinates(self) -> np.ndarray:
        """(n_atoms, 3) float64 array in file order."""
        pos = [a.position for r in self.residues for a in r.atoms]
        return np.array(pos, dtype=np.float64).reshape(-1, 3)

    def residue(self, chain_id: str, residue_seq: int) -> Residue | None:
        for r in self.residues:
            if r.chain_id == chain_id and r.residue_seq == residue_seq:
                return r
        return None

    def channel_tally(self) -> dict[str, int]:
        """Residue counts per side-chain class, plus 'Unknown'."""
        tally = {c.label: 0 for c in list(ChannelClass)[:6]}
        tally["Unknown"] = 0
        for r in self.residues:
            cls = classify_residue(r.residue_name)
            tally[cls.label if cls is not None else "Unknown"] += 1
        return tally


# -- parsing ---------------------------------------------------------------


def _guess_element(name: str) -> str:
    letters = "".join(ch for ch in name if ch.isalpha())
    return letters[:1]


def parse_pdb(content: Union[bytes, str], source_id: str = "") -> ProteinStructure:
    """Parse ATOM records of the first model into a ProteinStructure.

    Alternate locations other than blank/'A' are dropped, as are atoms
    carrying an insertion code (they would collide on (chain, seq)).
    """
    if isinstance(content, bytes):
        content = content.decode("ascii", errors="replace")

    groups: dict[tuple[str, int], list] = {}
    seen_model = False
    skipped_icode = 0
    for line_no, line in enumerate(content.splitlines(), start=1):
        record = line[:6]
        if record.startswith("MODEL"):
            if seen_model:
                break
            seen_model = True
            continue
        if record.startswith("ENDMDL"):
            break
        if record != "ATOM  ":
            continue
        if len(line) < 54:
            raise MalformedRecord(line_no, "line shorter than 54 columns")
        if line[16] not in (" ", "A"):
            continue
        if line[26:27].strip():
            skipped_icode += 1
            continue
        try:
            seq = int(line[22:26])
            pos = (float(line[30:38]), float(line[38:46]), float(line[46:54]))
        except ValueError as exc:
            raise MalformedRecord(line_no, str(exc)) from None
        if not all(math.isfinite(c) for c in pos):
            raise MalformedRecord(line_no, "non-finite coordinate")
        name = line[12:16].strip()
        res_name = line[17:20].strip()
        if not name or not res_name:
            raise MalformedRecord(line_no, "blank atom or residue name")
        try:
            serial = int(line[6:11])
        except ValueError:
            serial = 0
        element = line[76:78].strip() or _guess_element(name)
        atom = Atom(serial, name, res_name, line[21], seq, pos, element)

        key = (atom.chain_id, seq)
        group = groups.get(key)
        if group is None:
            groups[key] = [res_name, [atom]]
        elif group[0] != res_name:
            raise MalformedRecord(
                line_no, f"residue {key} named both {group[0]} and {res_name}"
            )
        else:
            group[1].append(atom)

    if skipped_icode:
        log.debug("%s: skipped %d atoms with insertion codes", source_id, skipped_icode)
    if not groups:
        raise EmptyStructure(f"no ATOM records in {source_id or 'input'}")
    residues = tuple(
        Residue(chain, seq, res_name, tuple(atoms))
        for (chain, seq), (res_name, atoms) in groups.items()
    )
    return ProteinStructure(source_id, residues)


def read_pdb(path, source_id: str | None = None) -> ProteinStructure:
    from pathlib import Path

    path = Path(path)
    return parse_pdb(path.read_bytes(), source_id or path.stem.upper())


def _format_atom_name(name: str, element: str) -> str:
    # 4-char names and two-letter elements start in column 13, others in 14
    if len(name) >= 4 or len(element) == 2:
        return f"{name:<4s}"
    return f" {name:<3s}"


def format_pdb(structure: ProteinStructure) -> str:
    """Emit ATOM records (plus END) that parse back to an equal structure."""
    lines = []
    for r in structure.residues:
        for a in r.atoms:
            x, y, z = a.position
            lines.append(
                f"ATOM  {a.serial % 100000:5d} {_format_atom_name(a.name, a.element)}"
                f" {a.residue_name:>3s} {a.chain_id[:1]}{a.residue_seq:4d}    "
                f"{x:8.3f}{y:8.3f}{z:8.3f}{1.0:6.2f}{0.0:6.2f}          "
                f"{a.element:>2s}"
            )
    lines.append("END")
    return "\n".join(lines) + "\n"


# -- edits -----------------------------------------------------------------


@dataclass(frozen=True)
class RemoveResidueRange:
    chain_id: str
    seq_start: int
    seq_end: int

    def __post_init__(self):
        if self.seq_start > self.seq_end:
            raise ValueError("seq_start must not exceed seq_end")

    def describe(self) -> str:
        return f"Removed residues {self.chain_id}:{self.seq_start}-{self.seq_end}"


@dataclass(frozen=True)
class RemoveAtomsByName:
    name: str

    def describe(self) -> str:
        return f"Removed atoms named {self.name}"


@dataclass(frozen=True)
class TranslateAtoms:
    chain_id: str
    seq_start: int
    seq_end: int
    offset: tuple[float, float, float] = field(default=(0.0, 0.0, 0.0))

    def __post_init__(self):
        if self.seq_start > self.seq_end:
            raise ValueError("seq_start must not exceed seq_end")

    def describe(self) -> str:
        dx, dy, dz = self.offset
        return (
            f"Translated {self.chain_id}:{self.seq_start}-{self.seq_end}"
            f" by ({dx:g}, {dy:g}, {dz:g})"
        )


StructureEdit = Union[RemoveResidueRange, RemoveAtomsByName, TranslateAtoms]


def _in_range(r: Residue, chain_id: str, start: int, end: int) -> bool:
    return r.chain_id == chain_id and start <= r.residue_seq <= end


def apply_edit(structure: ProteinStructure, edit: StructureEdit) -> ProteinStructure:
    """Return an edited copy; the input structure is never modified."""
    if isinstance(edit, RemoveResidueRange):
        kept = tuple(
            r
            for r in structure.residues
            if not _in_range(r, edit.chain_id, edit.seq_start, edit.seq_end)
        )
    elif isinstance(edit, RemoveAtomsByName):
        kept = []
        for r in structure.residues:
            atoms = tuple(a for a in r.atoms if a.name != edit.name)
            if len(atoms) == len(r.atoms):
                kept.append(r)
            elif atoms:
                kept.append(replace(r, atoms=atoms))
        kept = tuple(kept)
    elif isinstance(edit, TranslateAtoms):
        dx, dy, dz = edit.offset
        kept = []
        for r in structure.residues:
            if _in_range(r, edit.chain_id, edit.seq_start, edit.seq_end) and (dx, dy, dz) != (0, 0, 0):
                atoms = tuple(
                    replace(a, position=(a.position[0] + dx, a.position[1] + dy, a.position[2] + dz))
                    for a in r.atoms
                )
                r = replace(r, atoms=atoms)
            kept.append(r)
        kept = tuple(kept)
    else:
        raise TypeError(f"unsupported edit {edit!r}")
    return ProteinStructure(structure.source_id, kept)


def parse_range(text: str) -> RemoveResidueRange:
    """Parse 'A:152-166' into a RemoveResidueRange."""
    try:
        chain, span = text.split(":", 1)
        start, end = span.split("-", 1)
        return RemoveResidueRange(chain.strip() or " ", int(start), int(end))
    except ValueError:
        raise ValueError(f"expected CHAIN:START-END, got {text!r}") from None

