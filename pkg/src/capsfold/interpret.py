"""Activation-vector analysis of structural edits and per-channel scores."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .capsnet import ActivationVectors, CapsNet
from .pdb import ChannelClass, ProteinStructure, StructureEdit, apply_edit
from .voxel import encode

CHANNEL_SCORE_DEFINITION = (
    "retain-one: every channel except c is zeroed and the length of the "
    "target class capsule is reported"
)


def cube_side(model: CapsNet) -> int:
    """Side of the 3D cube that encodes to the model's input shape."""
    side = model.input_shape[1]
    if model.mode == "3d":
        return side
    order2 = side.bit_length() - 1
    return 1 << (2 * order2 // 3)


def encode_for(model: CapsNet, structure: ProteinStructure):
    return encode(structure, model.mode, size=cube_side(model))


@dataclass(frozen=True)
class PerturbationReport:
    edit: str
    class_names: list[str]
    original: ActivationVectors
    modified: ActivationVectors
    norms: np.ndarray

    @property
    def original_class(self) -> int:
        return self.original.predicted

    @property
    def modified_class(self) -> int:
        return self.modified.predicted

    def as_dict(self) -> dict:
        """Summary row (change, classes, per-class norms) plus the raw activation vectors."""
        row = {
            "change": self.edit,
            "original": self.class_names[self.original_class],
            "modified": self.class_names[self.modified_class],
        }
        for name, n in zip(self.class_names, self.norms):
            row[f"{name} norm"] = float(n)
        row["norm"] = "L2 of element-wise difference between class capsule vectors"
        row["original_lengths"] = self.original.lengths.tolist()
        row["modified_lengths"] = self.modified.lengths.tolist()
        row["original_vectors"] = self.original.vectors.tolist()
        row["modified_vectors"] = self.modified.vectors.tolist()
        return row


def compare_activations(a: ActivationVectors, b: ActivationVectors) -> np.ndarray:
    """Per-class ||a_k - b_k||_2."""
    return np.linalg.norm(a.vectors - b.vectors, axis=1)


def perturb_and_compare(
    model: CapsNet, structure: ProteinStructure, edit: StructureEdit, mode: str | None = None
) -> PerturbationReport:
    if mode is not None and mode != model.mode:
        raise ValueError(f"model was built for {model.mode} input, not {mode}")
    modified = apply_edit(structure, edit)
    a = model.activations(encode_for(model, structure))
    b = model.activations(encode_for(model, modified))
    return PerturbationReport(edit.describe(), list(model.class_names), a, b, compare_activations(a, b))


@dataclass(frozen=True)
class ChannelScoreReport:
    scores: np.ndarray  # (8,)
    target_class: int
    class_name: str
    definition: str = CHANNEL_SCORE_DEFINITION

    def rows(self) -> list[tuple[int, str, float]]:
        return [(int(c), c.label, float(self.scores[c])) for c in ChannelClass]


def channel_scores(model: CapsNet, sample, label: int | None = None) -> ChannelScoreReport:
    """Retain-one channel scores for a structure or an already encoded grid.

    The target capsule is ``label`` when given, else the class predicted on
    the unmasked input.
    """
    if isinstance(sample, ProteinStructure):
        sample = encode_for(model, sample)
    data = np.asarray(getattr(sample, "data", sample))
    target = model.activations(data).predicted if label is None else int(label)
    scores = np.empty(len(ChannelClass))
    for c in ChannelClass:
        masked = np.zeros_like(data)
        masked[c] = data[c]
        scores[c] = model.activations(masked).lengths[target]
    return ChannelScoreReport(scores, target, model.class_names[target])
