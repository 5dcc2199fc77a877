"""Wound photo analysis: detect, segment, measure, grade, evaluate."""

from .designr import (
    DIMENSIONS,
    OFFICIAL_SCALE,
    PAPER_S1_S5,
    SCALES,
    AssessmentItem,
    Calibration,
    ProxyThresholds,
    SizeGradeScale,
    WoundAssessment,
    WoundMeasurements,
    assess,
    calibration_from_ruler,
    measure,
)
from .detection import (
    BBoxDetection,
    DetectorBackend,
    MockDetector,
    OnnxDetector,
    box_iou,
    canonical_order,
    decode_yolo_detections,
    nms,
    run_detector,
    select_primary_roi,
)
from .errors import (
    BackendError,
    ConfigError,
    EmptyInput,
    InputShapeError,
    InvalidBox,
    InvalidCalibration,
    InvalidTransform,
    ManifestError,
    MissingGroundTruth,
    ShapeError,
    SiteMismatch,
    UlcerflowError,
    WriteError,
)
from .evalharness import (
    ImageScore,
    RandomRoiDetector,
    annotation_agreement,
    compare,
    evaluate,
    random_roi_baseline,
    render_text,
    report_from_scores,
    write_report,
)
from .imaging import (
    MODEL_INPUT_SIZE,
    PAD_FILL,
    BinaryMask,
    RasterImage,
    RoiTransform,
    crop_with_margin,
    letterbox_to_512,
    load_image,
    load_mask_png,
    project_mask_to_full,
    save_image_png,
    save_mask_png,
    warp_mask_to_roi,
)
from .metrics import (
    OverlapScores,
    SuccessRate,
    SummaryStat,
    dice,
    iou,
    mean_sd,
    overlap_scores,
    percent_agreement,
    success_rate_from_records,
)
from .pipeline import (
    FAILURE_NOTE_VOCABULARY,
    SITES,
    BatchResult,
    ManifestRow,
    PipelineConfig,
    PipelineRecord,
    emit_overlay,
    load_manifest,
    load_records,
    render_overlay,
    resolve_calibration,
    run_batch,
    run_single,
    summarize,
)
from .segmentation import (
    FallbackSegmenter,
    OnnxSegmenter,
    RefineOptions,
    SegmenterBackend,
    binarize,
    fallback_threshold_segmenter,
    refine_mask,
    run_segmenter,
    save_probmap_png,
    tta_segment,
)

__version__ = "0.1.0"

__all__ = [name for name in dir() if not name.startswith("_")]
