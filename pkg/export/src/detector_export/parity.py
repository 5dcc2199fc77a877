"""Numerical parity between two detector runtimes.

Both sides are plain callables mapping a (1, 3, H, W) float32 batch to a
numpy array of raw detection logits. That keeps the comparison symmetric
and lets any pairing be checked: checkpoint vs onnx, onnx vs onnx, or a
model against itself as a sanity floor.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .errors import ExportError, ParityError

Runner = Callable[[np.ndarray], np.ndarray]


@dataclass
class ParityReport:
    n_samples: int
    tolerance: float
    per_sample_max_diff: list = field(default_factory=list)
    max_abs_diff: float = 0.0
    passed: bool = False

    def to_dict(self) -> dict:
        return {
            "n_samples": self.n_samples,
            "tolerance": self.tolerance,
            "per_sample_max_diff": [float(d) for d in self.per_sample_max_diff],
            "max_abs_diff": float(self.max_abs_diff),
            "passed": bool(self.passed),
        }

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as f:
            json.dump(self.to_dict(), f, indent=2, sort_keys=True)
            f.write("\n")


def parity_check(
    reference: Runner,
    candidate: Runner,
    n_samples: int = 16,
    tolerance: float = 1e-4,
    input_size: int = 512,
    seed: int = 0,
) -> ParityReport:
    """Feed both runtimes the same random batches and compare raw outputs.

    The diff is |a - b| elementwise, so swapping the operands cannot change
    the verdict. A shape mismatch is a structural break, not a numeric one,
    and raises ParityError instead of scoring.
    """
    if n_samples < 1:
        raise ValueError("need at least one sample")
    if not tolerance > 0:
        raise ValueError("tolerance must be positive")
    rng = np.random.default_rng(seed)
    report = ParityReport(n_samples=n_samples, tolerance=tolerance)
    for _ in range(n_samples):
        batch = rng.random((1, 3, input_size, input_size), dtype=np.float32)
        out_a = np.asarray(reference(batch), dtype=np.float64)
        out_b = np.asarray(candidate(batch), dtype=np.float64)
        if out_a.shape != out_b.shape:
            raise ParityError(
                f"output shapes disagree: {out_a.shape} vs {out_b.shape}"
            )
        report.per_sample_max_diff.append(float(np.max(np.abs(out_a - out_b))) if out_a.size else 0.0)
    report.max_abs_diff = max(report.per_sample_max_diff)
    report.passed = report.max_abs_diff <= tolerance
    return report


def torch_runner(module) -> Runner:
    """Wrap an eval-mode torch module as a parity runner."""
    import torch

    module = module.float().eval()

    def run(batch: np.ndarray) -> np.ndarray:
        with torch.no_grad():
            out = module(torch.from_numpy(np.ascontiguousarray(batch)))
        if isinstance(out, (tuple, list)):
            out = out[0]
        return out.numpy()

    return run


def checkpoint_runner(path) -> Runner:
    from .export import load_checkpoint

    return torch_runner(load_checkpoint(path))


def onnx_runner(path) -> Runner:
    """Wrap an exported model as a parity runner; needs the onnxruntime package."""
    try:
        import onnxruntime as ort
    except ImportError as e:
        raise ExportError("onnxruntime is not installed, cannot run exported models") from e
    if not Path(path).is_file():
        raise ExportError(f"exported model not found: {path}")
    session = ort.InferenceSession(str(path), providers=["CPUExecutionProvider"])
    input_name = session.get_inputs()[0].name

    def run(batch: np.ndarray) -> np.ndarray:
        return session.run(None, {input_name: np.ascontiguousarray(batch)})[0]

    return run
