"""Exception types shared across the pipeline."""


class UlcerflowError(Exception):
    """Base class for all errors raised by this package."""


class InvalidBox(UlcerflowError):
    """Detection box does not intersect the image."""


class InvalidTransform(UlcerflowError):
    """ROI transform is inconsistent with the stated full-frame geometry."""


class ShapeError(UlcerflowError):
    """Operands have incompatible dimensions or lengths."""


class InputShapeError(UlcerflowError):
    """Model input does not match the required shape."""


class BackendError(UlcerflowError):
    """Inference backend failed to load or run (distinct from 'no detections')."""


class EmptyInput(UlcerflowError):
    """Operation requires at least one element."""


class InvalidCalibration(UlcerflowError):
    """Calibration inputs are degenerate or non-positive."""


class MissingGroundTruth(UlcerflowError):
    """A successful record has no ground-truth mask in the manifest."""


class SiteMismatch(UlcerflowError):
    """Reports being compared do not cover the same site set."""


class WriteError(UlcerflowError):
    """Failed to persist an output file."""


class ManifestError(UlcerflowError):
    """Manifest rows are malformed, duplicated, or reference missing files."""


class ConfigError(UlcerflowError):
    """Pipeline configuration violates its invariants."""
