"""Depth-aware dichotomous image segmentation: data, model, losses, metrics and training harness."""

from .data import DepthTriplet, PatchGrid, load_triplet, make_synthetic_dataset, partition_patches, reassemble_patches
from .errors import PdfnetError
from .losses import LossConfig, LossReport, total_loss
from .network import ModelConfig, PDFNet, PdfnetOutputs

__version__ = "0.1.0"

__all__ = [
    "DepthTriplet",
    "LossConfig",
    "LossReport",
    "ModelConfig",
    "PDFNet",
    "PatchGrid",
    "PdfnetError",
    "PdfnetOutputs",
    "load_triplet",
    "make_synthetic_dataset",
    "partition_patches",
    "reassemble_patches",
    "total_loss",
]
