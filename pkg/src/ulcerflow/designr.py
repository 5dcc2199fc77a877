"""Physical-scale wound measurement and DESIGN-R style size grading.

A pixels-per-centimeter calibration converts mask extents to centimeters.
Size grades come from configurable monotone scales over either the
major*minor product (official bedside rule) or the mask area itself.
Dimensions that need depth probing or a bedside exam are reported as
not computable from a single photograph rather than guessed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidCalibration, ShapeError
from .imaging import BinaryMask, RasterImage

DIMENSIONS = ("D", "E", "S", "I", "G", "N", "P")
ITEM_STATUSES = ("computable", "partial", "not_computable")


@dataclass(frozen=True)
class Calibration:
    """Physical scale of the image plane and where it came from."""

    pixels_per_cm: float
    source: str = "manifest"

    def __post_init__(self):
        if not math.isfinite(self.pixels_per_cm) or self.pixels_per_cm <= 0:
            raise InvalidCalibration(f"pixels_per_cm must be positive, got {self.pixels_per_cm}")


def calibration_from_ruler(
    p1: tuple[float, float], p2: tuple[float, float], known_cm: float
) -> Calibration:
    """Derive scale from two marked points a known distance apart on a ruler."""
    if known_cm <= 0:
        raise InvalidCalibration(f"known_cm must be positive, got {known_cm}")
    d = math.hypot(p2[0] - p1[0], p2[1] - p1[1])
    if d <= 0:
        raise InvalidCalibration("ruler points coincide")
    return Calibration(pixels_per_cm=d / known_cm, source="two-point-ruler")


@dataclass(frozen=True)
class WoundMeasurements:
    """Mask-derived geometry in pixels and centimeters."""

    area_px: int
    major_axis_px: float
    minor_axis_px: float
    area_cm2: float
    major_axis_cm: float
    minor_axis_cm: float
    major_minor_cm2: float


def measure(mask: BinaryMask, cal: Calibration) -> WoundMeasurements:
    """Area plus axis-aligned bounding extents of the wound pixels.

    Extents use the pixel-count convention (max - min + 1), so a single
    pixel is 1 px long. Major is the longer of the two. Empty masks
    measure zero everywhere.
    """
    ys, xs = np.nonzero(mask.data)
    if ys.size == 0:
        return WoundMeasurements(0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0)
    ext_x = float(xs.max() - xs.min() + 1)
    ext_y = float(ys.max() - ys.min() + 1)
    major, minor = max(ext_x, ext_y), min(ext_x, ext_y)
    ppcm = cal.pixels_per_cm
    major_cm = major / ppcm
    minor_cm = minor / ppcm
    return WoundMeasurements(
        area_px=int(ys.size),
        major_axis_px=major,
        minor_axis_px=minor,
        area_cm2=ys.size / (ppcm * ppcm),
        major_axis_cm=major_cm,
        minor_axis_cm=minor_cm,
        major_minor_cm2=major_cm * minor_cm,
    )


@dataclass(frozen=True)
class SizeGradeScale:
    """Monotone grading scale: label i applies while value < bounds[i] (half-open bins).

    ``quantity`` picks what gets graded: "major_minor_cm2" or "area_cm2".
    The last bound must be +inf so every value grades.
    """

    name: str
    quantity: str
    labels: tuple[str, ...]
    bounds: tuple[float, ...]

    def __post_init__(self):
        if self.quantity not in ("major_minor_cm2", "area_cm2"):
            raise ValueError(f"unknown grade quantity {self.quantity!r}")
        if len(self.labels) != len(self.bounds) or not self.labels:
            raise ValueError("labels and bounds must be non-empty and the same length")
        if any(b <= 0 for b in self.bounds):
            raise ValueError("bounds must be positive")
        if any(b2 <= b1 for b1, b2 in zip(self.bounds, self.bounds[1:])):
            raise ValueError("bounds must be strictly increasing")
        if not math.isinf(self.bounds[-1]):
            raise ValueError("last bound must be +inf so the scale is total")

    def grade(self, m: WoundMeasurements) -> str:
        """First label whose upper bound strictly exceeds the measured value."""
        v = getattr(m, self.quantity)
        for label, bound in zip(self.labels, self.bounds):
            if v < bound:
                return label
        raise AssertionError("unreachable: last bound is +inf")


# Official bedside bins over major*minor: <4, <16, <36, <64, <100, >=100 cm^2
OFFICIAL_SCALE = SizeGradeScale(
    name="official_major_minor",
    quantity="major_minor_cm2",
    labels=("s3", "s6", "s8", "s9", "s12", "s15"),
    bounds=(4.0, 16.0, 36.0, 64.0, 100.0, math.inf),
)

# Compact 5-level variant over mask area, equal-log-width bins (factor 4)
PAPER_S1_S5 = SizeGradeScale(
    name="area_s1_s5",
    quantity="area_cm2",
    labels=("S1", "S2", "S3", "S4", "S5"),
    bounds=(1.0, 4.0, 16.0, 64.0, math.inf),
)

SCALES = {s.name: s for s in (OFFICIAL_SCALE, PAPER_S1_S5)}


@dataclass(frozen=True)
class ProxyThresholds:
    """Color cutoffs behind the partial-status tissue proxies."""

    necrosis_lum_max: float = 60.0
    granulation_red_margin: float = 20.0
    exudate_yellow_margin: float = 40.0


@dataclass(frozen=True)
class AssessmentItem:
    """One dimension of the report: a grade, a proxy fraction, or an explained blank."""

    dimension: str
    status: str  # computable | partial | not_computable
    value: str | float | None = None
    note: str = ""


@dataclass(frozen=True)
class WoundAssessment:
    size_grade: str | None
    scale_name: str | None
    measurements: WoundMeasurements | None
    items: tuple[AssessmentItem, ...] = field(default_factory=tuple)


def _color_fractions(
    img: RasterImage, mask: BinaryMask, th: ProxyThresholds
) -> dict[str, float]:
    """Coarse tissue-color fractions inside the mask; all 0.0 for empty masks."""
    sel = mask.data.astype(bool)
    n = int(sel.sum())
    if n == 0:
        return {"necrotic": 0.0, "granulation": 0.0, "exudate_stain": 0.0}
    rgb = img.data[sel].astype(np.float64)
    r, g, b = rgb[:, 0], rgb[:, 1], rgb[:, 2]
    lum = 0.299 * r + 0.587 * g + 0.114 * b
    necrotic = float(np.count_nonzero(lum < th.necrosis_lum_max)) / n
    granulation = float(
        np.count_nonzero(
            (r > g + th.granulation_red_margin) & (r > b + th.granulation_red_margin)
        )
    ) / n
    exudate = float(np.count_nonzero(np.minimum(r, g) - b > th.exudate_yellow_margin)) / n
    return {"necrotic": necrotic, "granulation": granulation, "exudate_stain": exudate}


def assess(
    img: RasterImage,
    mask: BinaryMask,
    cal: Calibration | None,
    scale: SizeGradeScale = OFFICIAL_SCALE,
    thresholds: ProxyThresholds = ProxyThresholds(),
) -> WoundAssessment:
    """Build the 7-dimension report for one segmented wound.

    Size is graded when a calibration exists, flagged partial when that
    calibration is the raw-pixel fallback, and reported not_computable
    ("uncalibrated") without one. Exudate, granulation and necrosis get
    within-mask color fractions marked partial: suggestive, not clinical.
    Depth, inflammation and pocket can never be read off a 2-d mask.
    """
    if mask.data.shape != img.data.shape[:2]:
        raise ShapeError(
            f"mask {mask.data.shape} does not match image {img.data.shape[:2]}"
        )
    fr = _color_fractions(img, mask, thresholds)

    items: list[AssessmentItem] = [
        AssessmentItem(
            "D", "not_computable",
            note="wound depth needs probing or 3-d capture, not visible in a flat photo",
        ),
        AssessmentItem(
            "E", "partial", value=round(fr["exudate_stain"], 4),
            note="proxy: fraction of mask pixels with yellowish staining",
        ),
    ]
    if cal is None:
        measurements = None
        size_grade = None
        scale_name = None
        items.append(AssessmentItem("S", "not_computable", note="uncalibrated"))
    else:
        measurements = measure(mask, cal)
        size_grade = scale.grade(measurements)
        scale_name = scale.name
        if cal.source == "uncalibrated_px":
            items.append(AssessmentItem(
                "S", "partial", value=size_grade,
                note="graded on raw pixel measurements, no physical calibration",
            ))
        else:
            items.append(AssessmentItem("S", "computable", value=size_grade))
    items += [
        AssessmentItem(
            "I", "not_computable",
            note="infection signs need a periwound exam and history, not derivable from the mask",
        ),
        AssessmentItem(
            "G", "partial", value=round(fr["granulation"], 4),
            note="proxy: fraction of mask pixels that are strongly red",
        ),
        AssessmentItem(
            "N", "partial", value=round(fr["necrotic"], 4),
            note="proxy: fraction of mask pixels darker than the necrosis luminance cut",
        ),
        AssessmentItem(
            "P", "not_computable",
            note="pocket extent needs probing under the wound edge",
        ),
    ]
    return WoundAssessment(
        size_grade=size_grade,
        scale_name=scale_name,
        measurements=measurements,
        items=tuple(items),
    )
