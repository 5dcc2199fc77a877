"""Batch evaluation: per-image overlap scoring, per-site aggregation, run comparison.

Works from a finished run directory (records.jsonl + masks/) plus the manifest
that drove it. Ground truth is required for every successfully processed row;
failed images are never silently dropped, they stay in the coverage accounting
and simply contribute no overlap scores.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import designr
from .detection import BBoxDetection, DetectorBackend
from .errors import MissingGroundTruth, ShapeError, SiteMismatch, WriteError
from .imaging import BinaryMask, RasterImage, load_mask_png
from .metrics import SummaryStat, mean_sd, overlap_scores
from .pipeline import ManifestRow, PipelineRecord, resolve_calibration


@dataclass(frozen=True)
class ImageScore:
    """Evaluation outcome for one manifest row; overlap fields are None for failures."""

    image_id: str
    site: str
    status: str
    iou: float | None = None
    dice: float | None = None
    both_empty: bool = False
    area_cm2_pred: float | None = None
    area_cm2_gt: float | None = None
    grade_pred: str | None = None
    grade_gt: str | None = None


def evaluate(
    rows: list[ManifestRow],
    records: list[PipelineRecord],
    run_dir,
    scale: designr.SizeGradeScale = designr.OFFICIAL_SCALE,
    default_pixels_per_cm: float | None = None,
) -> list[ImageScore]:
    """Score a run against ground truth, one entry per manifest row.

    Ground-truth grades and areas reuse the exact calibration and grade scale
    applied to the prediction, so grade accuracy isolates segmentation quality
    from calibration choices. Rows whose record failed need no ground truth.
    """
    run_dir = Path(run_dir)
    by_id = {r.image_id: r for r in records}
    missing_rec = [r.image_id for r in rows if r.image_id not in by_id]
    if missing_rec:
        raise MissingGroundTruth(f"run has no records for manifest rows: {missing_rec[:5]}")

    scores: list[ImageScore] = []
    for row in rows:
        rec = by_id[row.image_id]
        if rec.status != "success":
            scores.append(ImageScore(row.image_id, row.site, rec.status))
            continue
        if not row.gt_mask_path:
            raise MissingGroundTruth(f"{row.image_id}: success record but no gt_mask_path")
        pred = load_mask_png(run_dir / rec.mask_path)
        gt = load_mask_png(row.gt_mask_path)
        ov = overlap_scores(pred, gt)
        cal = resolve_calibration(row, default_pixels_per_cm)
        m_pred = designr.measure(pred, cal)
        m_gt = designr.measure(gt, cal)
        scores.append(
            ImageScore(
                image_id=row.image_id,
                site=row.site,
                status=rec.status,
                iou=ov.iou,
                dice=ov.dice,
                both_empty=ov.both_empty,
                area_cm2_pred=m_pred.area_cm2,
                area_cm2_gt=m_gt.area_cm2,
                grade_pred=scale.grade(m_pred),
                grade_gt=scale.grade(m_gt),
            )
        )
    return scores


def _block(scored: list[ImageScore]) -> dict:
    iou_stat = mean_sd(s.iou for s in scored)
    dice_stat = mean_sd(s.dice for s in scored)
    return {
        "iou_mean": round(iou_stat.mean, 4),
        "iou_sd": round(iou_stat.sd, 4),
        "dice_mean": round(dice_stat.mean, 4),
        "dice_sd": round(dice_stat.sd, 4),
    }


def report_from_scores(scores: list[ImageScore]) -> dict:
    """Aggregate image scores into the run report structure.

    Overlap means cover only scored images; coverage states how many images
    that is. Grade accuracy and area error appear when the inputs carry them.
    """
    if not scores:
        raise ValueError("no scores to aggregate")
    scored = [s for s in scores if s.iou is not None]
    report: dict = {
        "n_images": len(scores),
        "n_scored": len(scored),
        "coverage_percent": round(100.0 * len(scored) / len(scores), 1),
    }
    if scored:
        report["overall"] = _block(scored)
    per_site: dict[str, dict] = {}
    for site in sorted({s.site for s in scores}):
        site_all = [s for s in scores if s.site == site]
        site_scored = [s for s in site_all if s.iou is not None]
        entry: dict = {"n": len(site_all), "n_scored": len(site_scored)}
        if site_scored:
            entry.update(_block(site_scored))
        per_site[site] = entry
    report["per_site"] = per_site

    graded = [s for s in scored if s.grade_pred is not None and s.grade_gt is not None]
    if graded:
        match = sum(s.grade_pred == s.grade_gt for s in graded)
        report["grade_accuracy"] = {
            "n_pairs": len(graded),
            "n_match": match,
            "fraction": round(match / len(graded), 4),
        }
    with_area = [
        s for s in scored if s.area_cm2_pred is not None and s.area_cm2_gt is not None
    ]
    if with_area:
        abs_err = [abs(s.area_cm2_pred - s.area_cm2_gt) for s in with_area]
        report["area_error"] = {
            "n": len(with_area),
            "mean_abs_cm2": round(mean_sd(abs_err).mean, 4),
        }
    return report


def compare(report_a: dict, report_b: dict) -> dict:
    """Per-site IoU and Dice mean deltas (B minus A) in percentage points.

    Both reports must cover the same scored sites; anything else is a setup
    mistake and raises rather than producing a half-comparison.
    """
    sites_a = {k for k, v in report_a.get("per_site", {}).items() if "iou_mean" in v}
    sites_b = {k for k, v in report_b.get("per_site", {}).items() if "iou_mean" in v}
    if sites_a != sites_b:
        raise SiteMismatch(f"site sets differ: {sorted(sites_a)} vs {sorted(sites_b)}")
    if not sites_a:
        raise SiteMismatch("no sites with scored images to compare")
    out = {}
    for site in sorted(sites_a):
        a = report_a["per_site"][site]
        b = report_b["per_site"][site]
        out[site] = {
            "iou_a": a["iou_mean"],
            "iou_b": b["iou_mean"],
            "iou_delta_pp": round((b["iou_mean"] - a["iou_mean"]) * 100.0, 1),
            "dice_a": a["dice_mean"],
            "dice_b": b["dice_mean"],
            "dice_delta_pp": round((b["dice_mean"] - a["dice_mean"]) * 100.0, 1),
        }
    return out


# ---------------------------------------------------------------------------
# Baselines and agreement
# ---------------------------------------------------------------------------

def _stable_seed(image_id: str, base_seed: int) -> int:
    digest = hashlib.sha256(image_id.encode("utf-8")).digest()
    return (base_seed ^ int.from_bytes(digest[:8], "big")) & 0x7FFFFFFFFFFFFFFF


def _draw_random_roi(width: int, height: int, rng: np.random.Generator) -> BBoxDetection:
    # area fraction first so the 25-75% window holds for any frame shape
    area = rng.uniform(0.25, 0.75) * width * height
    w_lo = max(area / height, min(1.0, float(width)))
    w_hi = min(float(width), area)
    w = rng.uniform(w_lo, w_hi) if w_hi > w_lo else w_lo
    h = min(area / w, float(height))
    x = rng.uniform(0.0, max(0.0, width - w))
    y = rng.uniform(0.0, max(0.0, height - h))
    return BBoxDetection(x, y, w, h, confidence=1.0)


def random_roi_baseline(
    img: RasterImage, rng_seed: int, margin: float = 0.0
) -> BBoxDetection:
    """Untrained-detector stand-in: a seeded random box covering 25-75% of the frame.

    ``margin`` dilates the drawn box per side (clamped to the frame) the same
    way the crop stage would, for experiments that bake the margin into the
    baseline itself.
    """
    box = _draw_random_roi(img.width, img.height, np.random.default_rng(rng_seed))
    if margin <= 0.0:
        return box
    m = margin * max(box.w, box.h)
    x0 = max(0.0, box.x - m)
    y0 = max(0.0, box.y - m)
    x1 = min(float(img.width), box.x + box.w + m)
    y1 = min(float(img.height), box.y + box.h + m)
    return BBoxDetection(x0, y0, x1 - x0, y1 - y0, confidence=1.0)


class RandomRoiDetector(DetectorBackend):
    """Seeded no-model baseline; each image id draws its own reproducible box."""

    def __init__(self, seed: int = 0, margin: float = 0.0):
        self.seed = seed
        self.margin = margin

    def detect(self, img: RasterImage, image_id: str | None = None) -> list[BBoxDetection]:
        return [random_roi_baseline(img, _stable_seed(image_id or "", self.seed), self.margin)]


def annotation_agreement(
    masks_a: dict[str, BinaryMask], masks_b: dict[str, BinaryMask]
) -> SummaryStat:
    """Dice agreement between two annotators labeling the same image set."""
    if set(masks_a) != set(masks_b):
        only_a = sorted(set(masks_a) - set(masks_b))[:5]
        only_b = sorted(set(masks_b) - set(masks_a))[:5]
        raise ShapeError(f"annotator image sets differ (a-only {only_a}, b-only {only_b})")
    dices = []
    for image_id in sorted(masks_a):
        a, b = masks_a[image_id], masks_b[image_id]
        if a.data.shape != b.data.shape:
            raise ShapeError(f"{image_id}: annotator masks differ in shape")
        dices.append(overlap_scores(a, b).dice)
    return SummaryStat.from_values(dices)


# ---------------------------------------------------------------------------
# Rendering
# ---------------------------------------------------------------------------

def render_text(report: dict) -> str:
    """Human-readable view of a report dict."""
    lines = [
        f"images     : {report['n_images']}",
        f"scored     : {report['n_scored']} ({report['coverage_percent']:.1f}% coverage)",
    ]
    if "overall" in report:
        o = report["overall"]
        lines.append(
            f"overall    : IoU {o['iou_mean']:.4f} +/- {o['iou_sd']:.4f}"
            f"  Dice {o['dice_mean']:.4f} +/- {o['dice_sd']:.4f}"
        )
    lines.append("")
    header = f"{'site':<12} {'n':>5} {'scored':>7} {'IoU':>8} {'Dice':>8}"
    lines.append(header)
    lines.append("-" * len(header))
    for site, e in report.get("per_site", {}).items():
        iou = f"{e['iou_mean']:.4f}" if "iou_mean" in e else "-"
        dice = f"{e['dice_mean']:.4f}" if "dice_mean" in e else "-"
        lines.append(f"{site:<12} {e['n']:>5} {e['n_scored']:>7} {iou:>8} {dice:>8}")
    if "grade_accuracy" in report:
        g = report["grade_accuracy"]
        pct = 100.0 * g["fraction"]
        lines.append("")
        lines.append(
            f"size grade agreement: {g['n_match']} / {g['n_pairs']} ({pct:.1f}%)"
        )
    if "area_error" in report:
        a = report["area_error"]
        lines.append(f"area error: {a['mean_abs_cm2']:.4f} cm^2 mean absolute")
    if "deltas_vs_baseline" in report:
        lines.append("")
        lines.append(f"{'site':<12} {'IoU pp':>8} {'Dice pp':>8}")
        for site, d in report["deltas_vs_baseline"].items():
            lines.append(
                f"{site:<12} {d['iou_delta_pp']:>+8.1f} {d['dice_delta_pp']:>+8.1f}"
            )
    return "\n".join(lines) + "\n"


def write_report(report: dict, out_dir) -> tuple[Path, Path]:
    out_dir = Path(out_dir)
    json_path = out_dir / "report.json"
    text_path = out_dir / "report.txt"
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        with open(json_path, "w", encoding="utf-8") as f:
            json.dump(_json_safe(report), f, indent=2, sort_keys=True)
            f.write("\n")
        with open(text_path, "w", encoding="utf-8") as f:
            f.write(render_text(report))
    except OSError as e:
        raise WriteError(f"could not write report under {out_dir}: {e}") from e
    return json_path, text_path


def _json_safe(obj):
    if isinstance(obj, dict):
        return {k: _json_safe(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_json_safe(v) for v in obj]
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    return obj


def scores_to_rows(scores: list[ImageScore]) -> list[dict]:
    """Plain-dict view of scores for CSV or JSON dumping."""
    return [asdict(s) for s in scores]
