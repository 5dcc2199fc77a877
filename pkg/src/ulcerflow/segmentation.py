"""Segmentation over the 512x512 ROI: backend protocol, flip TTA, binarization, mask refinement."""

from __future__ import annotations

from abc import ABC, abstractmethod
from dataclasses import dataclass

import numpy as np
from PIL import Image
from scipy import ndimage

from .errors import BackendError, InputShapeError, ShapeError, WriteError
from .imaging import MODEL_INPUT_SIZE, BinaryMask, RasterImage


class SegmenterBackend(ABC):
    """Produces a wound probability map for a model-frame RGB image."""

    shareable: bool = True

    @abstractmethod
    def predict(self, img: RasterImage) -> np.ndarray:
        """Return a (512, 512) float map in [0, 1]."""


def run_segmenter(backend: SegmenterBackend, img: RasterImage) -> np.ndarray:
    """Backend call with input/output shape enforcement; failures become BackendError."""
    if img.width != MODEL_INPUT_SIZE or img.height != MODEL_INPUT_SIZE:
        raise InputShapeError(
            f"segmenter expects {MODEL_INPUT_SIZE}x{MODEL_INPUT_SIZE} RGB, got {img.width}x{img.height}"
        )
    try:
        prob = backend.predict(img)
    except BackendError:
        raise
    except Exception as e:
        raise BackendError(f"segmenter failed: {e}") from e
    prob = np.asarray(prob, dtype=np.float32)
    if prob.shape != (MODEL_INPUT_SIZE, MODEL_INPUT_SIZE):
        raise BackendError(f"segmenter returned shape {prob.shape}")
    if float(prob.min()) < 0.0 or float(prob.max()) > 1.0:
        raise BackendError("segmenter probabilities fell outside [0, 1]")
    return prob


def tta_segment(
    backend: SegmenterBackend,
    img: RasterImage,
    flips: tuple[str, ...] = ("horizontal",),
) -> np.ndarray:
    """Average the probability map over identity plus the requested flips.

    Each flipped prediction is flipped back before the mean, so the result
    stays in the original frame. Duplicate flip names collapse to one pass.
    """
    seen: list[str] = []
    for f in ("identity",) + tuple(flips):
        if f not in ("identity", "horizontal", "vertical"):
            raise ValueError(f"unknown flip {f!r}")
        if f not in seen:
            seen.append(f)
    acc = np.zeros((MODEL_INPUT_SIZE, MODEL_INPUT_SIZE), dtype=np.float64)
    for f in seen:
        if f == "identity":
            acc += run_segmenter(backend, img)
        elif f == "horizontal":
            flipped = RasterImage(img.data[:, ::-1].copy())
            acc += run_segmenter(backend, flipped)[:, ::-1]
        else:
            flipped = RasterImage(img.data[::-1].copy())
            acc += run_segmenter(backend, flipped)[::-1]
    return (acc / len(seen)).astype(np.float32)


def save_probmap_png(prob: np.ndarray, path) -> None:
    """Debug dump of a probability map as 16-bit grayscale PNG."""
    arr = np.asarray(prob, dtype=np.float64)
    q = np.floor(arr * 65535.0 + 0.5).astype(np.uint16)
    try:
        Image.fromarray(q).save(path, format="PNG")
    except OSError as e:
        raise WriteError(f"could not write {path}: {e}") from e


def binarize(prob: np.ndarray, thresh: float = 0.5) -> BinaryMask:
    """Threshold a probability map; values equal to ``thresh`` count as wound."""
    prob = np.asarray(prob)
    if prob.ndim != 2:
        raise ShapeError(f"expected 2-d probability map, got shape {prob.shape}")
    if not 0.0 < thresh <= 1.0:
        raise ValueError(f"thresh must be in (0, 1], got {thresh}")
    return BinaryMask((prob >= thresh).astype(np.uint8))


@dataclass(frozen=True)
class RefineOptions:
    """Mask cleanup switches; defaults match the production pipeline."""

    fill_holes: bool = True
    min_area_px: int = 16
    keep_largest: bool = True

    def __post_init__(self):
        if self.min_area_px < 0:
            raise ValueError("min_area_px must be >= 0")


_FOUR_CONNECTED = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]], dtype=np.uint8)


def refine_mask(mask: BinaryMask, opts: RefineOptions = RefineOptions()) -> BinaryMask:
    """Clean a binary mask: fill enclosed holes, drop specks, keep the largest blob.

    Steps run in that fixed order over 4-connected components; the composite
    is idempotent. Holes are background regions with no path to the border.
    """
    m = mask.data.astype(bool)

    if opts.fill_holes and m.any():
        bg_labels, n_bg = ndimage.label(~m, structure=_FOUR_CONNECTED)
        if n_bg:
            border = np.zeros(n_bg + 1, dtype=bool)
            for edge in (bg_labels[0], bg_labels[-1], bg_labels[:, 0], bg_labels[:, -1]):
                border[np.unique(edge)] = True
            border[0] = True  # label 0 is foreground here, not a hole
            m = m | ~border[bg_labels]

    if (opts.min_area_px > 1 or opts.keep_largest) and m.any():
        labels, n = ndimage.label(m, structure=_FOUR_CONNECTED)
        if n:
            sizes = np.bincount(labels.ravel())
            sizes[0] = 0
            keep = sizes >= opts.min_area_px if opts.min_area_px > 1 else sizes > 0
            if opts.keep_largest and keep.any():
                only = np.zeros_like(keep)
                # np.argmax takes the lowest label on ties: first in raster order
                only[int(np.argmax(sizes * keep))] = True
                keep = only
            m = keep[labels]

    return BinaryMask(m.astype(np.uint8))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 1.0 / (1.0 + np.exp(-x))


def fallback_threshold_segmenter(img: RasterImage, steepness: float = 4.0) -> np.ndarray:
    """Color-heuristic wound probability: how much red exceeds the green/blue mean.

    redness = (R - (G+B)/2) / 255 in [-1, 1]; p = sigmoid(steepness * redness).
    Neutral grays land exactly at 0.5, saturated red approaches sigmoid(steepness).
    """
    rgb = img.data.astype(np.float64)
    redness = (rgb[:, :, 0] - (rgb[:, :, 1] + rgb[:, :, 2]) / 2.0) / 255.0
    return _sigmoid(steepness * redness).astype(np.float32)


class FallbackSegmenter(SegmenterBackend):
    """Model-free backend wrapping the redness heuristic, for degraded operation."""

    def __init__(self, steepness: float = 4.0):
        if steepness <= 0:
            raise ValueError("steepness must be positive")
        self.steepness = steepness

    def predict(self, img: RasterImage) -> np.ndarray:
        return fallback_threshold_segmenter(img, self.steepness)


class OnnxSegmenter(SegmenterBackend):
    """Runs an exported encoder-decoder segmenter through onnxruntime (lazy import)."""

    shareable = False

    def __init__(self, model_path: str):
        try:
            import onnxruntime  # noqa: PLC0415
        except ImportError as e:
            raise BackendError(
                "onnxruntime is required for OnnxSegmenter; install the onnx extra"
            ) from e
        try:
            self.session = onnxruntime.InferenceSession(
                model_path, providers=["CPUExecutionProvider"]
            )
        except Exception as e:
            raise BackendError(f"could not load segmenter model {model_path}: {e}") from e
        self.input_name = self.session.get_inputs()[0].name

    def predict(self, img: RasterImage) -> np.ndarray:
        x = img.data.astype(np.float32).transpose(2, 0, 1)[None] / 255.0
        try:
            (out,) = self.session.run(None, {self.input_name: x})
        except Exception as e:
            raise BackendError(f"segmenter inference failed: {e}") from e
        out = np.asarray(out, dtype=np.float32)
        out = out.reshape(out.shape[-2], out.shape[-1])
        # logits and probabilities both appear in the wild; squash only logits
        if float(out.min()) < 0.0 or float(out.max()) > 1.0:
            out = _sigmoid(out)
        return out
