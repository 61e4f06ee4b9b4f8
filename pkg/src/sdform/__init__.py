"""Re-model neural-network weights as ``W ~ C_e @ B``.

``C_e`` is a sparse matrix of signed powers of two and ``B`` a small 8-bit
basis, so weights can be rebuilt with shifts and adds. The package covers
decomposition, a compact file format, rebuild-on-the-fly inference, training
that keeps ``C_e`` discrete, and a first-order storage/energy model.
"""
from .codec import SizeReport, decode_model, encode_model, size_report
from .cost import CostReport, UnitEnergy, estimate_layer, estimate_model, memory_compute_ratio
from .decompose import SDConfig, SDForm, SDLayer, SDModel, decompose_model, sd_decompose
from .errors import (
    AssemblyError,
    CorruptionError,
    FeasibilityError,
    FormatError,
    InvariantError,
    NumericalError,
    ParameterError,
    SDError,
    UnsupportedShapeError,
    ValidationError,
)
from .quant import ExponentSet, Pow2Matrix, nearest_pow2, quantize_basis, quantize_pow2
from .rebuild import LayerDims, count_flops, rebuild, rebuild_layer
from .tensor_io import WeightTensor, load_container, save_container

__version__ = "0.1.0"

__all__ = [
    "AssemblyError", "CorruptionError", "CostReport", "ExponentSet", "FeasibilityError", "FormatError",
    "InvariantError", "LayerDims", "NumericalError", "ParameterError", "Pow2Matrix", "SDConfig",
    "SDError", "SDForm", "SDLayer", "SDModel", "SizeReport", "UnitEnergy", "UnsupportedShapeError",
    "ValidationError", "WeightTensor", "count_flops", "decode_model", "decompose_model", "encode_model",
    "estimate_layer", "estimate_model", "load_container", "memory_compute_ratio", "nearest_pow2",
    "quantize_basis", "quantize_pow2", "rebuild", "rebuild_layer", "save_container", "sd_decompose",
    "size_report",
]
