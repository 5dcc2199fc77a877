"""End-to-end per-image pipeline and the deterministic batch runner.

Stage order per image: decode, detect, crop, letterbox, segment, binarize,
refine, project back to the full frame, measure and grade, persist. Every
per-image failure is folded into the record status; only storage failures
escape as exceptions.

Batch output layout under ``out_dir``:
    masks/<image_id>.png      full-frame binary mask (wound = 255)
    overlays/<image_id>.png   red blend for review
    records.jsonl             one record per manifest row, manifest order
    summary.json              status counts, success rate, per-site breakdown

Records reference masks by relative path and carry no host-specific strings,
so the jsonl is byte-identical for any worker count once timings are ignored.
"""

from __future__ import annotations

import csv
import json
import math
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import designr
from .detection import DetectorBackend, MockDetector, run_detector, select_primary_roi
from .errors import (
    BackendError,
    ConfigError,
    EmptyInput,
    InputShapeError,
    InvalidBox,
    InvalidCalibration,
    ManifestError,
    WriteError,
)
from .imaging import (
    PAD_FILL,
    BinaryMask,
    RasterImage,
    crop_with_margin,
    letterbox_to_512,
    load_image,
    project_mask_to_full,
    save_image_png,
    save_mask_png,
)
from .metrics import success_rate_from_records
from .segmentation import (
    FallbackSegmenter,
    RefineOptions,
    SegmenterBackend,
    binarize,
    refine_mask,
    run_segmenter,
    save_probmap_png,
    tta_segment,
)

SITES = ("foot", "sacrum", "trochanter", "other")

# Canonical review vocabulary for images the detector cannot handle
FAILURE_NOTE_VOCABULARY = (
    "Lack of clear wound feature",
    "Blurred boundary",
    "Unrecognizable structure",
    "No prominent characteristics",
    "No visual distinction",
)
DEFAULT_FAILURE_NOTE = FAILURE_NOTE_VOCABULARY[0]

STATUSES = ("success", "detection_failure", "decode_error", "backend_error")


@dataclass
class PipelineConfig:
    """Every knob of the per-image pipeline, JSON round-trippable."""

    conf_thresh: float = 0.25
    nms_iou_thresh: float = 0.45
    roi_margin: float = 0.10
    binarize_thresh: float = 0.5
    refine_fill_holes: bool = True
    refine_min_area_px: int = 16
    refine_keep_largest: bool = True
    pad_fill: int = PAD_FILL
    resize_mode: str = "letterbox"
    tta: bool = False
    tta_flips: tuple[str, ...] = ("horizontal",)
    scale_name: str = "official_major_minor"
    default_pixels_per_cm: float | None = None
    necrosis_lum_max: float = 60.0
    granulation_red_margin: float = 20.0
    exudate_yellow_margin: float = 40.0
    overlay_alpha: float = 0.4
    emit_overlays: bool = True
    dump_probmaps: bool = False
    detector_model: str | None = None
    segmenter_model: str | None = None

    def __post_init__(self):
        self.tta_flips = tuple(self.tta_flips)
        self.validate()

    def validate(self) -> None:
        if not 0.0 <= self.conf_thresh <= 1.0:
            raise ConfigError(f"conf_thresh out of [0, 1]: {self.conf_thresh}")
        if not 0.0 <= self.nms_iou_thresh <= 1.0:
            raise ConfigError(f"nms_iou_thresh out of [0, 1]: {self.nms_iou_thresh}")
        if not 0.0 <= self.roi_margin <= 1.0:
            raise ConfigError(f"roi_margin out of [0, 1]: {self.roi_margin}")
        if not 0.0 < self.binarize_thresh <= 1.0:
            raise ConfigError(f"binarize_thresh out of (0, 1]: {self.binarize_thresh}")
        if self.refine_min_area_px < 0:
            raise ConfigError("refine_min_area_px must be >= 0")
        if not 0 <= self.pad_fill <= 255:
            raise ConfigError(f"pad_fill out of [0, 255]: {self.pad_fill}")
        if self.resize_mode not in ("letterbox", "stretch"):
            raise ConfigError(f"unknown resize_mode {self.resize_mode!r}")
        if any(f not in ("horizontal", "vertical") for f in self.tta_flips):
            raise ConfigError(f"unknown tta flip in {self.tta_flips}")
        if self.scale_name not in designr.SCALES:
            raise ConfigError(
                f"unknown scale_name {self.scale_name!r}, have {sorted(designr.SCALES)}"
            )
        if self.default_pixels_per_cm is not None and not (
            math.isfinite(self.default_pixels_per_cm) and self.default_pixels_per_cm > 0
        ):
            raise ConfigError("default_pixels_per_cm must be positive")
        if not 0.0 <= self.overlay_alpha <= 1.0:
            raise ConfigError(f"overlay_alpha out of [0, 1]: {self.overlay_alpha}")

    def refine_options(self) -> RefineOptions:
        return RefineOptions(
            fill_holes=self.refine_fill_holes,
            min_area_px=self.refine_min_area_px,
            keep_largest=self.refine_keep_largest,
        )

    def proxy_thresholds(self) -> designr.ProxyThresholds:
        return designr.ProxyThresholds(
            necrosis_lum_max=self.necrosis_lum_max,
            granulation_red_margin=self.granulation_red_margin,
            exudate_yellow_margin=self.exudate_yellow_margin,
        )

    def to_dict(self) -> dict:
        d = asdict(self)
        d["tta_flips"] = list(self.tta_flips)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        try:
            return cls(**d)
        except TypeError as e:
            raise ConfigError(str(e)) from e

    @classmethod
    def from_json_file(cls, path) -> "PipelineConfig":
        try:
            with open(path, encoding="utf-8") as f:
                d = json.load(f)
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(f"could not read config {path}: {e}") from e
        if not isinstance(d, dict):
            raise ConfigError("config file must hold a JSON object")
        return cls.from_dict(d)


@dataclass(frozen=True)
class ManifestRow:
    """One input image as declared in the batch manifest CSV."""

    image_id: str
    path: str
    site: str
    source_path: str
    pixels_per_cm: float | None = None
    ruler: tuple[tuple[float, float], tuple[float, float], float] | None = None
    gt_mask_path: str | None = None


def _parse_ruler(text: str, where: str) -> tuple[tuple[float, float], tuple[float, float], float]:
    parts = text.split()
    if len(parts) != 5:
        raise ManifestError(
            f"{where}: ruler_points needs 'x1 y1 x2 y2 known_cm', got {text!r}"
        )
    try:
        x1, y1, x2, y2, known = (float(p) for p in parts)
    except ValueError as e:
        raise ManifestError(f"{where}: ruler_points not numeric: {text!r}") from e
    try:
        designr.calibration_from_ruler((x1, y1), (x2, y2), known)
    except InvalidCalibration as e:
        raise ManifestError(f"{where}: {e}") from e
    return (x1, y1), (x2, y2), known


def load_manifest(path) -> list[ManifestRow]:
    """Parse the batch CSV; malformed rows fail the whole load with a row reference."""
    base = Path(path).parent
    rows: list[ManifestRow] = []
    seen: set[str] = set()
    try:
        f = open(path, newline="", encoding="utf-8")
    except OSError as e:
        raise ManifestError(f"could not open manifest {path}: {e}") from e
    with f:
        reader = csv.DictReader(f)
        if reader.fieldnames is None:
            raise ManifestError(f"{path}: empty manifest")
        missing = {"image_id", "path", "site"} - set(reader.fieldnames)
        if missing:
            raise ManifestError(f"{path}: missing required columns {sorted(missing)}")
        for i, raw in enumerate(reader, start=2):  # header is line 1
            where = f"{path}:{i}"
            image_id = (raw.get("image_id") or "").strip()
            rel = (raw.get("path") or "").strip()
            site = (raw.get("site") or "").strip()
            if not image_id or not rel:
                raise ManifestError(f"{where}: image_id and path are required")
            if image_id in seen:
                raise ManifestError(f"{where}: duplicate image_id {image_id!r}")
            seen.add(image_id)
            if site not in SITES:
                raise ManifestError(f"{where}: site must be one of {SITES}, got {site!r}")
            ppcm = None
            if (raw.get("pixels_per_cm") or "").strip():
                try:
                    ppcm = float(raw["pixels_per_cm"])
                except ValueError as e:
                    raise ManifestError(f"{where}: bad pixels_per_cm") from e
                if not (math.isfinite(ppcm) and ppcm > 0):
                    raise ManifestError(f"{where}: pixels_per_cm must be positive")
            ruler = None
            if (raw.get("ruler_points") or "").strip():
                ruler = _parse_ruler(raw["ruler_points"].strip(), where)
            gt = (raw.get("gt_mask_path") or "").strip() or None
            rows.append(
                ManifestRow(
                    image_id=image_id,
                    path=str((base / rel) if not Path(rel).is_absolute() else Path(rel)),
                    site=site,
                    source_path=rel,
                    pixels_per_cm=ppcm,
                    ruler=ruler,
                    gt_mask_path=str(base / gt) if gt and not Path(gt).is_absolute() else gt,
                )
            )
    return rows


@dataclass
class PipelineRecord:
    """Everything persisted about one manifest row."""

    image_id: str
    status: str
    site: str
    n_detections: int = 0
    detection: dict | None = None
    detections: list[dict] | None = None
    transform: dict | None = None
    mask_path: str | None = None
    overlay_path: str | None = None
    measurements: dict | None = None
    size_grade: str | None = None
    scale_name: str | None = None
    assessment: list[dict] | None = None
    pixels_per_cm: float | None = None
    calibration_source: str | None = None
    failure_note: str | None = None
    error: str | None = None
    timings_ms: dict = field(default_factory=dict)

    def to_dict(self, include_timings: bool = True) -> dict:
        d = asdict(self)
        if not include_timings:
            d.pop("timings_ms")
        return d

    def to_json_line(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineRecord":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


def resolve_calibration(
    row: ManifestRow, default_pixels_per_cm: float | None = None
) -> designr.Calibration:
    """Pick the scale for one image: row value, then row ruler, then the default.

    Uncalibrated images fall back to 1 px/cm with the source marked, so a
    successful record always carries measurements and a grade; consumers
    filter on ``calibration_source`` before trusting centimeter figures.
    """
    if row.pixels_per_cm is not None:
        return designr.Calibration(row.pixels_per_cm, source="manifest")
    if row.ruler is not None:
        p1, p2, known = row.ruler
        return designr.calibration_from_ruler(p1, p2, known)
    if default_pixels_per_cm is not None:
        return designr.Calibration(default_pixels_per_cm, source="config_default")
    return designr.Calibration(1.0, source="uncalibrated_px")


def render_overlay(
    img: RasterImage,
    mask: BinaryMask,
    alpha: float = 0.4,
    color: tuple[int, int, int] = (255, 0, 0),
) -> RasterImage:
    """Blend the mask over the image: out = floor(alpha*color + (1-alpha)*pixel + 0.5)."""
    if mask.data.shape != img.data.shape[:2]:
        raise InputShapeError(
            f"mask {mask.data.shape} does not match image {img.data.shape[:2]}"
        )
    out = img.data.copy()
    sel = mask.data.astype(bool)
    if sel.any():
        mixed = alpha * np.asarray(color, dtype=np.float64) + (1.0 - alpha) * out[sel]
        out[sel] = np.floor(mixed + 0.5).astype(np.uint8)
    return RasterImage(out)


def emit_overlay(
    img: RasterImage,
    mask: BinaryMask,
    out_path,
    alpha: float = 0.4,
    color: tuple[int, int, int] = (255, 0, 0),
) -> None:
    """Render and write the review overlay PNG."""
    save_image_png(render_overlay(img, mask, alpha=alpha, color=color), out_path)


def run_single(
    row: ManifestRow,
    config: PipelineConfig,
    detector: DetectorBackend,
    segmenter: SegmenterBackend,
    out_dir: Path | None = None,
) -> PipelineRecord:
    """Run every stage for one image; failures come back as record statuses."""
    rec = PipelineRecord(image_id=row.image_id, status="success", site=row.site)
    timings: dict[str, float] = {}
    t_total = time.perf_counter()

    def clock(name: str, since: float) -> float:
        now = time.perf_counter()
        timings[name] = round((now - since) * 1000.0, 3)
        return now

    t = time.perf_counter()
    try:
        img = load_image(row.path)
    except Exception as e:
        rec.status = "decode_error"
        rec.error = f"{type(e).__name__}: {e}"
        rec.timings_ms = timings
        return rec
    t = clock("decode", t)

    cal = resolve_calibration(row, config.default_pixels_per_cm)
    rec.pixels_per_cm = cal.pixels_per_cm
    rec.calibration_source = cal.source

    try:
        dets = run_detector(
            detector, img, config.conf_thresh, config.nms_iou_thresh, image_id=row.image_id
        )
    except BackendError as e:
        rec.status = "backend_error"
        rec.error = str(e)
        rec.timings_ms = timings
        return rec
    t = clock("detect", t)
    rec.n_detections = len(dets)
    rec.detections = [
        {"x": d.x, "y": d.y, "w": d.w, "h": d.h, "confidence": d.confidence} for d in dets
    ]

    primary = select_primary_roi(dets)
    if primary is None:
        rec.status = "detection_failure"
        rec.failure_note = DEFAULT_FAILURE_NOTE
        rec.timings_ms = timings
        return rec
    rec.detection = {
        "x": primary.x,
        "y": primary.y,
        "w": primary.w,
        "h": primary.h,
        "confidence": primary.confidence,
    }

    try:
        crop, origin, size = crop_with_margin(img, primary, config.roi_margin)
    except InvalidBox:
        # detector box missed the frame entirely; treat like no detection
        rec.status = "detection_failure"
        rec.failure_note = DEFAULT_FAILURE_NOTE
        rec.timings_ms = timings
        return rec
    framed, transform = letterbox_to_512(
        crop, crop_origin=origin, mode=config.resize_mode, pad_fill=config.pad_fill
    )
    rec.transform = {
        "crop_origin": list(transform.crop_origin),
        "crop_size": list(transform.crop_size),
        "scale": transform.scale,
        "scale_y": transform.scale_y,
        "pad": list(transform.pad),
        "roi_size": transform.roi_size,
    }
    t = clock("preprocess", t)

    try:
        if config.tta:
            prob = tta_segment(segmenter, framed, flips=config.tta_flips)
        else:
            prob = run_segmenter(segmenter, framed)
    except (BackendError, InputShapeError) as e:
        rec.status = "backend_error"
        rec.error = str(e)
        rec.timings_ms = timings
        return rec
    t = clock("segment", t)

    raw_mask = binarize(prob, config.binarize_thresh)
    # padding is synthetic input, never wound evidence; drop it before the
    # largest-component rule can latch onto a pad bar
    sw, sh = transform.scaled_size()
    content = np.zeros_like(raw_mask.data)
    left, top = transform.pad
    content[top : top + sh, left : left + sw] = raw_mask.data[
        top : top + sh, left : left + sw
    ]
    mask512 = refine_mask(BinaryMask(content), config.refine_options())
    t = clock("postprocess", t)

    full_mask = project_mask_to_full(mask512, transform, img.width, img.height)
    t = clock("project", t)

    assessment = designr.assess(
        img,
        full_mask,
        cal,
        scale=designr.SCALES[config.scale_name],
        thresholds=config.proxy_thresholds(),
    )
    rec.measurements = asdict(assessment.measurements)
    rec.size_grade = assessment.size_grade
    rec.scale_name = assessment.scale_name
    rec.assessment = [asdict(item) for item in assessment.items]
    t = clock("grade", t)

    rec.mask_path = f"masks/{row.image_id}.png"
    if out_dir is not None:
        save_mask_png(full_mask, out_dir / rec.mask_path)
        if config.emit_overlays:
            rec.overlay_path = f"overlays/{row.image_id}.png"
            emit_overlay(
                img, full_mask, out_dir / rec.overlay_path, alpha=config.overlay_alpha
            )
        if config.dump_probmaps:
            save_probmap_png(prob, out_dir / "probmaps" / f"{row.image_id}.png")
        clock("persist", t)

    timings["total"] = round((time.perf_counter() - t_total) * 1000.0, 3)
    rec.timings_ms = timings
    return rec


class _PerThread:
    """Give each worker thread its own backend when a factory is supplied."""

    def __init__(self, factory):
        self.factory = factory
        self.local = threading.local()

    def get(self):
        if not hasattr(self.local, "obj"):
            self.local.obj = self.factory()
        return self.local.obj


def _resolve_backend(backend_or_factory, workers: int, kind: str):
    if callable(backend_or_factory) and not isinstance(
        backend_or_factory, (DetectorBackend, SegmenterBackend)
    ):
        holder = _PerThread(backend_or_factory)
        return holder.get
    if workers > 1 and not getattr(backend_or_factory, "shareable", True):
        raise ConfigError(
            f"{kind} instance is not thread-shareable; pass a factory for parallel runs"
        )
    return lambda: backend_or_factory


@dataclass
class BatchResult:
    records: list[PipelineRecord]
    summary: dict
    out_dir: Path

    @property
    def had_errors(self) -> bool:
        """True when any image hit a decode or backend error (drives the exit code)."""
        return any(r.status in ("decode_error", "backend_error") for r in self.records)


def summarize(records: list[PipelineRecord], config: PipelineConfig) -> dict:
    counts = {s: 0 for s in STATUSES}
    per_site: dict[str, dict[str, int]] = {}
    for r in records:
        counts[r.status] += 1
        site = per_site.setdefault(r.site, {"n": 0, "n_success": 0})
        site["n"] += 1
        site["n_success"] += int(r.status == "success")
    rate = success_rate_from_records(records)
    return {
        "n_images": len(records),
        "status_counts": counts,
        "n_success": rate.successes,
        "success_rate": rate.formatted(),
        "success_percent": rate.percent,
        "per_site": {k: per_site[k] for k in sorted(per_site)},
        "config": config.to_dict(),
    }


def run_batch(
    rows: list[ManifestRow],
    config: PipelineConfig,
    out_dir,
    detector: DetectorBackend | None = None,
    segmenter: SegmenterBackend | None = None,
    workers: int = 1,
) -> BatchResult:
    """Process a manifest and persist the artifact tree.

    ``detector``/``segmenter`` accept an instance or a zero-argument factory;
    factories get one instance per worker thread. Results keep manifest order
    for any worker count. Defaults are the scripted full-frame detector and
    the color-heuristic segmenter, which need no model files.
    """
    if not rows:
        raise EmptyInput("manifest has no rows")
    if workers < 1:
        raise ConfigError(f"workers must be >= 1, got {workers}")

    out_dir = Path(out_dir)
    try:
        (out_dir / "masks").mkdir(parents=True, exist_ok=True)
        if config.emit_overlays:
            (out_dir / "overlays").mkdir(parents=True, exist_ok=True)
        if config.dump_probmaps:
            (out_dir / "probmaps").mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise WriteError(f"could not create output tree under {out_dir}: {e}") from e

    get_detector = _resolve_backend(
        detector if detector is not None else MockDetector(), workers, "detector"
    )
    get_segmenter = _resolve_backend(
        segmenter if segmenter is not None else FallbackSegmenter(), workers, "segmenter"
    )

    def work(row: ManifestRow) -> PipelineRecord:
        return run_single(row, config, get_detector(), get_segmenter(), out_dir=out_dir)

    if workers == 1:
        records = [work(r) for r in rows]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            records = list(pool.map(work, rows))

    summary = summarize(records, config)
    try:
        with open(out_dir / "records.jsonl", "w", encoding="utf-8") as f:
            for r in records:
                f.write(r.to_json_line() + "\n")
        with open(out_dir / "summary.json", "w", encoding="utf-8") as f:
            json.dump(summary, f, indent=2, sort_keys=True)
            f.write("\n")
    except OSError as e:
        raise WriteError(f"could not write run outputs under {out_dir}: {e}") from e
    return BatchResult(records=records, summary=summary, out_dir=out_dir)


def load_records(path) -> list[PipelineRecord]:
    """Read back a finished run's records; accepts the jsonl path or its directory."""
    path = Path(path)
    if path.is_dir():
        path = path / "records.jsonl"
    try:
        with open(path, encoding="utf-8") as f:
            return [PipelineRecord.from_dict(json.loads(line)) for line in f if line.strip()]
    except OSError as e:
        raise ManifestError(f"could not read {path}: {e}") from e
    except json.JSONDecodeError as e:
        raise ManifestError(f"corrupt records file {path}: {e}") from e
