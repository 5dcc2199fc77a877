"""Shared fixtures: synthetic images, scripted backends, manifest builders."""

from __future__ import annotations

import csv
import sys
from pathlib import Path

import numpy as np
import pytest
from hypothesis import settings

from ulcerflow import (
    BinaryMask,
    DetectorBackend,
    RasterImage,
    SegmenterBackend,
    save_image_png,
    save_mask_png,
)

sys.path.insert(0, str(Path(__file__).parent))

settings.register_profile("suite", deadline=None, max_examples=60)
settings.load_profile("suite")

# Background the color-heuristic segmenter scores below 0.5, wound red above it
COOL_BG = (96, 108, 122)
WOUND_RED = (198, 44, 48)


def make_image(h: int, w: int, color=COOL_BG) -> RasterImage:
    data = np.empty((h, w, 3), dtype=np.uint8)
    data[:] = color
    return RasterImage(data)


def make_disc_image(h, w, cy, cx, r, fg=WOUND_RED, bg=COOL_BG):
    """Flat background with a filled disc; returns (image, true boolean mask)."""
    img = make_image(h, w, bg)
    yy, xx = np.mgrid[:h, :w]
    disc = (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
    img.data[disc] = fg
    return img, disc


def random_mask(rng: np.random.Generator, h: int, w: int, p: float = 0.3) -> BinaryMask:
    return BinaryMask((rng.random((h, w)) < p).astype(np.uint8))


class ScriptedSegmenter(SegmenterBackend):
    """Returns a fixed probability map, or one computed from the input."""

    def __init__(self, prob=None, fn=None):
        self.prob = prob
        self.fn = fn
        self.calls = 0

    def predict(self, img: RasterImage) -> np.ndarray:
        self.calls += 1
        if self.fn is not None:
            return self.fn(img)
        return self.prob


class RaisingDetector(DetectorBackend):
    def detect(self, img, image_id=None):
        raise RuntimeError("synthetic detector crash")


class RaisingSegmenter(SegmenterBackend):
    def predict(self, img):
        raise RuntimeError("synthetic segmenter crash")


def write_batch(tmp_path: Path, entries: list[dict], name="batch.csv") -> Path:
    """Write images/masks named by each entry and the manifest CSV referencing them.

    Entry keys: image_id, image (RasterImage), site, and optionally
    pixels_per_cm, ruler_points, gt_mask (BinaryMask).
    """
    (tmp_path / "imgs").mkdir(exist_ok=True)
    (tmp_path / "gt").mkdir(exist_ok=True)
    fieldnames = ["image_id", "path", "site", "pixels_per_cm", "ruler_points", "gt_mask_path"]
    rows = []
    for e in entries:
        rel = f"imgs/{e['image_id']}.png"
        if e.get("image") is not None:
            save_image_png(e["image"], tmp_path / rel)
        row = {
            "image_id": e["image_id"],
            "path": e.get("path", rel),
            "site": e.get("site", "other"),
            "pixels_per_cm": e.get("pixels_per_cm", ""),
            "ruler_points": e.get("ruler_points", ""),
            "gt_mask_path": "",
        }
        if e.get("gt_mask") is not None:
            gt_rel = f"gt/{e['image_id']}.png"
            save_mask_png(e["gt_mask"], tmp_path / gt_rel)
            row["gt_mask_path"] = gt_rel
        rows.append(row)
    manifest = tmp_path / name
    with open(manifest, "w", newline="", encoding="utf-8") as f:
        writer = csv.DictWriter(f, fieldnames=fieldnames)
        writer.writeheader()
        writer.writerows(rows)
    return manifest


@pytest.fixture
def rng():
    return np.random.default_rng(20240911)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    """One PASS/FAIL line per acceptance criterion at the end of the run."""
    lines = []
    for outcome in ("passed", "failed", "error"):
        for rep in terminalreporter.stats.get(outcome, []):
            nodeid = getattr(rep, "nodeid", "")
            if "test_acceptance.py" not in nodeid:
                continue
            if getattr(rep, "when", "call") != "call" and outcome != "error":
                continue
            name = nodeid.split("::")[-1]
            lines.append((name, "PASS" if outcome == "passed" else "FAIL"))
    if lines:
        terminalreporter.write_sep("=", "acceptance criteria")
        for name, verdict in lines:
            terminalreporter.write_line(f"ACCEPTANCE {name}: {verdict}")
