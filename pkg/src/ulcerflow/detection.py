"""Wound ROI detection: backend protocol, confidence filter, greedy NMS, primary-ROI pick."""

from __future__ import annotations

from abc import ABC, abstractmethod
from dataclasses import dataclass

import numpy as np

from .errors import BackendError, InvalidBox
from .imaging import RasterImage, RoiTransform


@dataclass(frozen=True)
class BBoxDetection:
    """Axis-aligned detection in full-frame pixels, (x, y) top-left."""

    x: float
    y: float
    w: float
    h: float
    confidence: float

    def __post_init__(self):
        if self.w <= 0 or self.h <= 0:
            raise InvalidBox(f"box size must be positive, got {self.w}x{self.h}")
        if not 0.0 <= self.confidence <= 1.0:
            raise InvalidBox(f"confidence must be in [0, 1], got {self.confidence}")

    @property
    def area(self) -> float:
        return self.w * self.h

    def as_xyxy(self) -> tuple[float, float, float, float]:
        return self.x, self.y, self.x + self.w, self.y + self.h


def box_iou(a: BBoxDetection, b: BBoxDetection) -> float:
    # everything in corner space so iou(a, a) is exactly 1.0
    ax0, ay0, ax1, ay1 = a.as_xyxy()
    bx0, by0, bx1, by1 = b.as_xyxy()
    iw = min(ax1, bx1) - max(ax0, bx0)
    ih = min(ay1, by1) - max(ay0, by0)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    area_a = (ax1 - ax0) * (ay1 - ay0)
    area_b = (bx1 - bx0) * (by1 - by0)
    return inter / (area_a + area_b - inter)


def canonical_order(dets: list[BBoxDetection]) -> list[BBoxDetection]:
    """Deterministic ordering: confidence desc, then area desc, then x, then y."""
    return sorted(dets, key=lambda d: (-d.confidence, -d.area, d.x, d.y))


def nms(dets: list[BBoxDetection], iou_thresh: float) -> list[BBoxDetection]:
    """Greedy non-maximum suppression.

    Boxes are visited in canonical order; a box is kept unless its IoU with an
    already-kept box exceeds ``iou_thresh`` (ties at the threshold survive).
    """
    if not 0.0 <= iou_thresh <= 1.0:
        raise ValueError(f"iou_thresh must be in [0, 1], got {iou_thresh}")
    ordered = canonical_order(dets)
    if len(ordered) <= 1:
        return ordered

    coords = np.array([d.as_xyxy() for d in ordered], dtype=np.float64)
    x0, y0, x1, y1 = coords.T
    areas = (x1 - x0) * (y1 - y0)
    keep: list[int] = []
    idx = np.arange(len(ordered))
    while idx.size:
        i = idx[0]
        keep.append(int(i))
        rest = idx[1:]
        iw = np.minimum(x1[i], x1[rest]) - np.maximum(x0[i], x0[rest])
        ih = np.minimum(y1[i], y1[rest]) - np.maximum(y0[i], y0[rest])
        inter = np.clip(iw, 0, None) * np.clip(ih, 0, None)
        iou = inter / (areas[i] + areas[rest] - inter)
        idx = rest[iou <= iou_thresh]
    return [ordered[i] for i in keep]


def select_primary_roi(dets: list[BBoxDetection]) -> BBoxDetection | None:
    """Pick the single box the rest of the pipeline runs on, or None when empty."""
    if not dets:
        return None
    return canonical_order(dets)[0]


class DetectorBackend(ABC):
    """Produces candidate wound boxes for a full frame.

    ``shareable`` declares whether one instance may be called concurrently
    from several worker threads.
    """

    shareable: bool = True

    @abstractmethod
    def detect(self, img: RasterImage, image_id: str | None = None) -> list[BBoxDetection]:
        ...


def run_detector(
    backend: DetectorBackend,
    img: RasterImage,
    conf_thresh: float,
    iou_thresh: float,
    image_id: str | None = None,
) -> list[BBoxDetection]:
    """Backend call + confidence filter + NMS, any backend exception surfaced as BackendError."""
    try:
        raw = backend.detect(img, image_id)
    except BackendError:
        raise
    except Exception as e:
        raise BackendError(f"detector failed on {image_id or 'image'}: {e}") from e
    kept = [d for d in raw if d.confidence >= conf_thresh]
    return nms(kept, iou_thresh)


class MockDetector(DetectorBackend):
    """Scripted detector for tests and dry runs.

    ``script`` maps image_id to a list of boxes; unscripted ids fall back to
    ``default``: "full_frame" emits one box covering the image, "none" emits
    nothing.
    """

    def __init__(
        self,
        script: dict[str, list] | None = None,
        default: str = "full_frame",
        confidence: float = 0.9,
    ):
        if default not in ("full_frame", "none"):
            raise ValueError(f"unknown default behavior {default!r}")
        self.script = {
            k: [b if isinstance(b, BBoxDetection) else BBoxDetection(*b) for b in v]
            for k, v in (script or {}).items()
        }
        self.default = default
        self.confidence = confidence

    def detect(self, img: RasterImage, image_id: str | None = None) -> list[BBoxDetection]:
        if image_id is not None and image_id in self.script:
            return list(self.script[image_id])
        if self.default == "none":
            return []
        return [BBoxDetection(0.0, 0.0, float(img.width), float(img.height), self.confidence)]


def decode_yolo_detections(
    raw: np.ndarray, t: RoiTransform, conf_thresh: float
) -> list[BBoxDetection]:
    """Decode an (n, 5+) [cx, cy, w, h, conf, ...] array from the 512 frame to full-frame boxes."""
    raw = np.asarray(raw, dtype=np.float64)
    if raw.ndim != 2 or raw.shape[1] < 5:
        raise BackendError(f"expected (n, >=5) detection array, got shape {raw.shape}")
    out: list[BBoxDetection] = []
    ox, oy = t.crop_origin
    for cx, cy, w, h, conf in raw[:, :5]:
        if conf < conf_thresh or w <= 0 or h <= 0:
            continue
        fx = (cx - w / 2 - t.pad[0]) / t.scale_x_ + ox
        fy = (cy - h / 2 - t.pad[1]) / t.scale_y_ + oy
        out.append(
            BBoxDetection(fx, fy, w / t.scale_x_, h / t.scale_y_, float(min(max(conf, 0.0), 1.0)))
        )
    return out


class OnnxDetector(DetectorBackend):
    """Runs an exported one-class detector through onnxruntime.

    The runtime import happens lazily so environments without the extra can
    still use every other backend.
    """

    shareable = False

    def __init__(self, model_path: str, input_size: int = 512):
        try:
            import onnxruntime  # noqa: PLC0415
        except ImportError as e:
            raise BackendError(
                "onnxruntime is required for OnnxDetector; install the onnx extra"
            ) from e
        try:
            self.session = onnxruntime.InferenceSession(
                model_path, providers=["CPUExecutionProvider"]
            )
        except Exception as e:
            raise BackendError(f"could not load detector model {model_path}: {e}") from e
        self.input_size = input_size
        self.input_name = self.session.get_inputs()[0].name

    def detect(self, img: RasterImage, image_id: str | None = None) -> list[BBoxDetection]:
        from .imaging import letterbox_to_512  # noqa: PLC0415

        framed, t = letterbox_to_512(RasterImage(img.data), size=self.input_size)
        x = framed.data.astype(np.float32).transpose(2, 0, 1)[None] / 255.0
        try:
            (raw,) = self.session.run(None, {self.input_name: x})
        except Exception as e:
            raise BackendError(f"detector inference failed: {e}") from e
        raw = np.asarray(raw)
        if raw.ndim == 3:
            raw = raw[0]
        return decode_yolo_detections(raw, t, conf_thresh=0.0)
