"""Detector checkpoint to onnx conversion with parity checking."""

from .errors import ExportError, ParityError
from .export import ExportSpec, export, load_checkpoint, read_normalization, sha256_of
from .parity import ParityReport, checkpoint_runner, onnx_runner, parity_check, torch_runner

__all__ = [
    "ExportError",
    "ParityError",
    "ExportSpec",
    "export",
    "load_checkpoint",
    "read_normalization",
    "sha256_of",
    "ParityReport",
    "parity_check",
    "torch_runner",
    "checkpoint_runner",
    "onnx_runner",
]

__version__ = "0.1.0"
