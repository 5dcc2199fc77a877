"""Checkpoint loading and ONNX conversion.

The converter accepts three checkpoint layouts: a bare nn.Module pickle, the
trainer-style dict holding one under "model" (or "ema"), and a TorchScript
archive. A bare state_dict is rejected: it carries no architecture, so there
is nothing to trace.

Conversion itself goes through torch.onnx with a fixed (1, 3, size, size)
input and raw detection tensor output; NMS and thresholding stay in the
consumer. Alongside the model a JSON sidecar records the source checksum,
export settings, and whatever input normalization the training config
declares, so downstream code reads the convention instead of assuming one.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass
from pathlib import Path

import torch

from .errors import ExportError

MODEL_INPUT_SIZE = 512


@dataclass(frozen=True)
class ExportSpec:
    """Everything one conversion needs; input size is pinned to the model contract."""

    checkpoint: str
    out_path: str
    input_size: int = MODEL_INPUT_SIZE
    opset: int = 17
    version_tag: str = "v1"
    tolerance: float = 1e-4

    def __post_init__(self):
        if self.input_size != MODEL_INPUT_SIZE:
            raise ExportError(
                f"input size is fixed at {MODEL_INPUT_SIZE}, got {self.input_size}"
            )
        if not self.tolerance > 0:
            raise ExportError(f"tolerance must be positive, got {self.tolerance}")
        if self.opset < 11:
            raise ExportError(f"opset {self.opset} is too old for the used operators")


def sha256_of(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _as_module(obj) -> torch.nn.Module | None:
    if isinstance(obj, torch.nn.Module):
        return obj
    if isinstance(obj, dict):
        for key in ("ema", "model"):
            inner = obj.get(key)
            if isinstance(inner, torch.nn.Module):
                return inner
    return None


def load_checkpoint(path) -> torch.nn.Module:
    """Unpickle a checkpoint into an inference-ready float32 eval module."""
    path = Path(path)
    if not path.is_file():
        raise ExportError(f"checkpoint not found: {path}")
    try:
        obj = torch.load(path, map_location="cpu", weights_only=False)
    except Exception as unpickle_err:
        # jit archives are not pickles; try that before giving up. When both
        # fail, the unpickle error is the informative one for a .pt file.
        try:
            obj = torch.jit.load(str(path), map_location="cpu")
        except Exception:
            raise ExportError(
                f"cannot load checkpoint {path}: {unpickle_err}"
            ) from unpickle_err
    module = _as_module(obj)
    if module is None:
        if isinstance(obj, dict):
            raise ExportError(
                f"{path} holds no module (bare state_dict?); export needs the full model object"
            )
        raise ExportError(f"{path} does not contain a torch module, got {type(obj).__name__}")
    return module.float().eval()


def read_normalization(checkpoint_path) -> dict | None:
    """Input-scaling convention from the training config next to the checkpoint.

    Returns None when no config is found; the sidecar then says so explicitly
    rather than inventing a default.
    """
    import yaml

    cfg = Path(checkpoint_path).parent / "args.yaml"
    if not cfg.is_file():
        return None
    try:
        with open(cfg, encoding="utf-8") as f:
            args = yaml.safe_load(f) or {}
    except (OSError, yaml.YAMLError) as e:
        raise ExportError(f"unreadable training config {cfg}: {e}") from e
    keys = ("mean", "std", "scale", "normalize", "imgsz")
    found = {k: args[k] for k in keys if k in args}
    return found or {"declared": "none"}


def export(spec: ExportSpec) -> Path:
    """Convert the checkpoint and write the metadata sidecar; returns the model path."""
    module = load_checkpoint(spec.checkpoint)
    checksum = sha256_of(spec.checkpoint)
    out = Path(spec.out_path)
    out.parent.mkdir(parents=True, exist_ok=True)
    dummy = torch.zeros(1, 3, spec.input_size, spec.input_size, dtype=torch.float32)
    try:
        torch.onnx.export(
            module,
            (dummy,),
            str(out),
            input_names=["images"],
            output_names=["predictions"],
            opset_version=spec.opset,
            do_constant_folding=True,
            dynamo=False,
        )
    except Exception as e:
        raise ExportError(f"onnx conversion failed: {e}") from e

    metadata = {
        "source_checkpoint": str(spec.checkpoint),
        "source_sha256": checksum,
        "input_size": spec.input_size,
        "opset": spec.opset,
        "version_tag": spec.version_tag,
        "normalization": read_normalization(spec.checkpoint),
        "torch_version": torch.__version__,
    }
    _embed_metadata(out, metadata)
    sidecar = out.with_suffix(out.suffix + ".json")
    with open(sidecar, "w", encoding="utf-8") as f:
        json.dump(metadata, f, indent=2, sort_keys=True)
        f.write("\n")
    return out


def _embed_metadata(model_path: Path, metadata: dict) -> None:
    """Stamp metadata into the model file itself when the onnx package is around."""
    try:
        import onnx
    except ImportError:
        return
    model = onnx.load(str(model_path))
    del model.metadata_props[:]
    for key in sorted(metadata):
        prop = model.metadata_props.add()
        prop.key = key
        prop.value = json.dumps(metadata[key]) if not isinstance(metadata[key], str) else metadata[key]
    onnx.save(model, str(model_path))


def spec_to_dict(spec: ExportSpec) -> dict:
    return asdict(spec)
