"""Raster types and ROI geometry: margin crops, 512x512 letterboxing, inverse mask projection.

All geometry is recorded in :class:`RoiTransform` so that masks predicted in the
512x512 model frame can be mapped back to exact full-frame pixel coordinates.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import TYPE_CHECKING

import cv2
import numpy as np
from PIL import Image

from .errors import InvalidBox, InvalidTransform, ShapeError, WriteError

if TYPE_CHECKING:
    from .detection import BBoxDetection

MODEL_INPUT_SIZE = 512
PAD_FILL = 114  # letterbox padding gray, detector-training convention


def _round_half_away(x: float) -> int:
    # round-half-away-from-zero; inputs here are always >= 0
    return int(math.floor(x + 0.5))


@dataclass
class RasterImage:
    """8-bit RGB raster; ``data`` is (height, width, 3) uint8."""

    data: np.ndarray

    def __post_init__(self):
        d = np.asarray(self.data)
        if d.ndim != 3 or d.shape[2] != 3:
            raise ShapeError(f"expected (h, w, 3) RGB array, got shape {d.shape}")
        if d.shape[0] < 1 or d.shape[1] < 1:
            raise ShapeError("image must be at least 1x1")
        if d.dtype != np.uint8:
            raise ShapeError(f"expected uint8 samples, got {d.dtype}")
        self.data = d

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def channels(self) -> int:
        return 3


@dataclass
class BinaryMask:
    """Single-channel mask; ``data`` is (height, width) uint8 with wound=1, background=0."""

    data: np.ndarray

    def __post_init__(self):
        d = np.asarray(self.data)
        if d.ndim != 2:
            raise ShapeError(f"expected (h, w) mask array, got shape {d.shape}")
        if d.dtype == bool:
            d = d.astype(np.uint8)
        if d.dtype != np.uint8:
            raise ShapeError(f"expected uint8 or bool mask, got {d.dtype}")
        if d.size and int(d.max()) > 1:
            raise ShapeError("mask values must be 0 or 1")
        self.data = d

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def height(self) -> int:
        return self.data.shape[0]

    def foreground_px(self) -> int:
        return int(np.count_nonzero(self.data))


@dataclass(frozen=True)
class RoiTransform:
    """Invertible crop/scale/pad mapping between full-frame and 512x512 ROI coordinates.

    ``scale`` is ROI pixels per crop pixel along x; ``scale_y`` differs only in
    stretch mode. ``pad`` is (left, top) inside the model frame.
    """

    crop_origin: tuple[int, int]
    crop_size: tuple[int, int]
    scale: float
    pad: tuple[int, int]
    scale_y: float | None = None
    roi_size: int = MODEL_INPUT_SIZE

    @property
    def scale_x_(self) -> float:
        return self.scale

    @property
    def scale_y_(self) -> float:
        return self.scale if self.scale_y is None else self.scale_y

    def scaled_size(self) -> tuple[int, int]:
        """Content size inside the model frame, recomputed with the recorded rounding rule."""
        w, h = self.crop_size
        # extreme slivers must keep at least one pixel per axis
        return (
            max(1, _round_half_away(w * self.scale_x_)),
            max(1, _round_half_away(h * self.scale_y_)),
        )

    def validate(self, full_w: int | None = None, full_h: int | None = None) -> None:
        ox, oy = self.crop_origin
        cw, ch = self.crop_size
        if self.scale_x_ <= 0 or self.scale_y_ <= 0:
            raise InvalidTransform("scale must be positive")
        if self.pad[0] < 0 or self.pad[1] < 0:
            raise InvalidTransform("padding must be non-negative")
        if cw < 1 or ch < 1:
            raise InvalidTransform("crop size must be at least 1x1")
        sw, sh = self.scaled_size()
        # 1 px rounding slack on either side of the model frame
        if not (self.roi_size - 1 <= sw + 2 * self.pad[0] <= self.roi_size + 1):
            raise InvalidTransform(
                f"scaled width {sw} + pads {self.pad[0]} inconsistent with {self.roi_size} frame"
            )
        if not (self.roi_size - 1 <= sh + 2 * self.pad[1] <= self.roi_size + 1):
            raise InvalidTransform(
                f"scaled height {sh} + pads {self.pad[1]} inconsistent with {self.roi_size} frame"
            )
        if full_w is not None and full_h is not None:
            if ox < 0 or oy < 0 or ox + cw > full_w or oy + ch > full_h:
                raise InvalidTransform(
                    f"crop ({ox},{oy},{cw},{ch}) falls outside {full_w}x{full_h} frame"
                )


# ---------------------------------------------------------------------------
# File IO
# ---------------------------------------------------------------------------

def load_image(path) -> RasterImage:
    """Read a PNG or JPEG file as RGB."""
    with Image.open(path) as im:
        return RasterImage(np.asarray(im.convert("RGB"), dtype=np.uint8))


def save_image_png(img: RasterImage, path) -> None:
    try:
        Image.fromarray(img.data, mode="RGB").save(path, format="PNG")
    except OSError as e:
        raise WriteError(f"could not write {path}: {e}") from e


def save_mask_png(mask: BinaryMask, path) -> None:
    """Write a mask as single-channel PNG with values {0, 255} (255 = wound)."""
    try:
        Image.fromarray(mask.data * 255, mode="L").save(path, format="PNG")
    except OSError as e:
        raise WriteError(f"could not write {path}: {e}") from e


def load_mask_png(path) -> BinaryMask:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("L"), dtype=np.uint8)
    return BinaryMask((arr > 127).astype(np.uint8))


# ---------------------------------------------------------------------------
# Geometry
# ---------------------------------------------------------------------------

def crop_with_margin(
    img: RasterImage, box: "BBoxDetection", margin: float
) -> tuple[RasterImage, tuple[int, int], tuple[int, int]]:
    """Extract the detection box dilated by ``margin * max(box_w, box_h)`` per side.

    The dilated rectangle is clamped to the image bounds; returns the crop plus
    the clamped origin and size in full-frame pixels.
    """
    if not 0.0 <= margin <= 1.0:
        raise InvalidBox(f"margin must be in [0, 1], got {margin}")
    m = margin * max(box.w, box.h)
    x0 = math.floor(box.x - m)
    y0 = math.floor(box.y - m)
    x1 = math.ceil(box.x + box.w + m)
    y1 = math.ceil(box.y + box.h + m)
    x0c, y0c = max(0, x0), max(0, y0)
    x1c, y1c = min(img.width, x1), min(img.height, y1)
    if x1c <= x0c or y1c <= y0c:
        raise InvalidBox(
            f"box ({box.x},{box.y},{box.w},{box.h}) does not intersect {img.width}x{img.height} image"
        )
    crop = RasterImage(img.data[y0c:y1c, x0c:x1c].copy())
    return crop, (x0c, y0c), (x1c - x0c, y1c - y0c)


def letterbox_to_512(
    crop: RasterImage,
    crop_origin: tuple[int, int] = (0, 0),
    *,
    size: int = MODEL_INPUT_SIZE,
    mode: str = "letterbox",
    pad_fill: int = PAD_FILL,
) -> tuple[RasterImage, RoiTransform]:
    """Resize a crop to the square model input.

    ``mode="letterbox"`` preserves aspect ratio with centered constant padding
    (scale = min(size/w, size/h)); ``mode="stretch"`` resizes each axis
    independently for bit-compat experiments.
    """
    w, h = crop.width, crop.height
    if mode == "letterbox":
        scale = min(size / w, size / h)
        sw = max(1, _round_half_away(w * scale))
        sh = max(1, _round_half_away(h * scale))
        t = RoiTransform(
            crop_origin=tuple(crop_origin),
            crop_size=(w, h),
            scale=scale,
            pad=((size - sw) // 2, (size - sh) // 2),
            roi_size=size,
        )
    elif mode == "stretch":
        t = RoiTransform(
            crop_origin=tuple(crop_origin),
            crop_size=(w, h),
            scale=size / w,
            scale_y=size / h,
            pad=(0, 0),
            roi_size=size,
        )
        sw, sh = size, size
    else:
        raise ValueError(f"unknown resize mode {mode!r}")

    resized = cv2.resize(crop.data, (sw, sh), interpolation=cv2.INTER_LINEAR)
    canvas = np.full((size, size, 3), pad_fill, dtype=np.uint8)
    canvas[t.pad[1] : t.pad[1] + sh, t.pad[0] : t.pad[0] + sw] = resized
    return RasterImage(canvas), t


def _nn_indices(dst_n: int, src_n: int) -> np.ndarray:
    # dst pixel centers mapped onto the src grid (nearest neighbor);
    # multiply before dividing so exact boundary hits stay exact
    idx = np.floor((np.arange(dst_n) + 0.5) * src_n / dst_n).astype(np.int64)
    return np.clip(idx, 0, src_n - 1)


def warp_mask_to_roi(mask: BinaryMask, t: RoiTransform) -> BinaryMask:
    """Forward-map a full-frame mask into the model frame with nearest-neighbor sampling."""
    t.validate(mask.width, mask.height)
    ox, oy = t.crop_origin
    cw, ch = t.crop_size
    sw, sh = t.scaled_size()
    crop = mask.data[oy : oy + ch, ox : ox + cw]
    scaled = crop[np.ix_(_nn_indices(sh, ch), _nn_indices(sw, cw))]
    canvas = np.zeros((t.roi_size, t.roi_size), dtype=np.uint8)
    canvas[t.pad[1] : t.pad[1] + sh, t.pad[0] : t.pad[0] + sw] = scaled
    return BinaryMask(canvas)


def project_mask_to_full(
    mask512: BinaryMask, t: RoiTransform, full_w: int, full_h: int
) -> BinaryMask:
    """Map a model-frame mask back to full-frame coordinates.

    Inverts the letterbox and crop with nearest-neighbor resampling; pixels
    outside the crop rectangle are 0.
    """
    if mask512.width != t.roi_size or mask512.height != t.roi_size:
        raise ShapeError(
            f"expected {t.roi_size}x{t.roi_size} mask, got {mask512.width}x{mask512.height}"
        )
    t.validate(full_w, full_h)
    ox, oy = t.crop_origin
    cw, ch = t.crop_size
    sw, sh = t.scaled_size()
    content = mask512.data[t.pad[1] : t.pad[1] + sh, t.pad[0] : t.pad[0] + sw]
    crop_mask = content[np.ix_(_nn_indices(ch, sh), _nn_indices(cw, sw))]
    out = np.zeros((full_h, full_w), dtype=np.uint8)
    out[oy : oy + ch, ox : ox + cw] = crop_mask
    return BinaryMask(out)
