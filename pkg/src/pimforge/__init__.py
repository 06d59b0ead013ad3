"""Structured-sparse, quantized CNNs mapped onto a simulated SOT-MRAM PIM engine."""
from .admm import AdmmSchedule, AdmmState, compress
from .bitserial import BitConvTrace, bitwise_conv2d, decompose
from .cost import CostParams, CostReport, compare, estimate
from .estimators import ADMMCompressor, PimSimulator, TinyCNNClassifier
from .mapper import PimLayout, build_layout, propagate_pruning, simulate
from .model import Model, QuantSpec, load_model, save_model, sparsity_report
from .sparsity import SparsityConstraint, project

__version__ = "0.1.0"

__all__ = [
    "ADMMCompressor",
    "AdmmSchedule",
    "AdmmState",
    "BitConvTrace",
    "CostParams",
    "CostReport",
    "Model",
    "PimLayout",
    "PimSimulator",
    "QuantSpec",
    "SparsityConstraint",
    "TinyCNNClassifier",
    "bitwise_conv2d",
    "build_layout",
    "compare",
    "compress",
    "decompose",
    "estimate",
    "load_model",
    "project",
    "propagate_pruning",
    "save_model",
    "simulate",
    "sparsity_report",
]
