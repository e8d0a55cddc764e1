"""Capsule networks for classifying voxelized protein structures."""

__version__ = "0.1.0"

from .capsnet import (
    PRESETS,
    ActivationVectors,
    CapsNet,
    Hyperparameters,
    RMSProp,
    build_model,
    categorical_hinge_loss,
    dynamic_routing,
    load_model,
    logcosh_loss,
    save_model,
    squash,
)
from .interpret import channel_scores, perturb_and_compare
from .pdb import (
    ChannelClass,
    ProteinStructure,
    RemoveAtomsByName,
    RemoveResidueRange,
    TranslateAtoms,
    apply_edit,
    classify_residue,
    parse_pdb,
    read_pdb,
)
from .training import predict, prediction_accuracy, split, train
from .voxel import fold_to_2d, unfold_to_3d, voxelize3d

__all__ = [
    "PRESETS", "ActivationVectors", "CapsNet", "Hyperparameters", "RMSProp",
    "build_model", "categorical_hinge_loss", "dynamic_routing", "load_model",
    "logcosh_loss", "save_model", "squash", "channel_scores", "perturb_and_compare",
    "ChannelClass", "ProteinStructure", "RemoveAtomsByName", "RemoveResidueRange",
    "TranslateAtoms", "apply_edit", "classify_residue", "parse_pdb", "read_pdb",
    "predict", "prediction_accuracy", "split", "train", "fold_to_2d",
    "unfold_to_3d", "voxelize3d",
]


def fixture_path(name: str = "1a8o.pdb"):
    """Path of a PDB file bundled with the package."""
    from importlib.resources import files

    return files(__name__) / "data" / name
