"""Command line front end.

    ulcerflow run --manifest batch.csv --config run.json --out results/
    ulcerflow overlay --image img.png --mask mask.png --out blend.png
    ulcerflow report --records results/records.jsonl --manifest batch.csv

``run`` exits 0 exactly when no image hit a decode or backend error;
detection failures are expected operating data, not process errors.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import designr
from .errors import BackendError, UlcerflowError
from .evalharness import compare, evaluate, render_text, report_from_scores, write_report
from .imaging import load_image, load_mask_png
from .pipeline import (
    PipelineConfig,
    emit_overlay,
    load_manifest,
    load_records,
    run_batch,
)


def _build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ulcerflow", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="segment and grade every image in a manifest")
    run.add_argument("--manifest", required=True, help="batch CSV")
    run.add_argument("--config", default=None, help="pipeline config JSON")
    run.add_argument("--out", required=True, help="output directory")
    run.add_argument("--workers", type=int, default=1)
    run.add_argument("--tta", action="store_true", help="average flip-augmented predictions")
    run.add_argument(
        "--fallback-segmenter",
        action="store_true",
        help="use the color heuristic even when a segmenter model is configured",
    )

    ov = sub.add_parser("overlay", help="blend a saved mask over its image")
    ov.add_argument("--image", required=True)
    ov.add_argument("--mask", required=True)
    ov.add_argument("--out", required=True)
    ov.add_argument("--alpha", type=float, default=0.4)

    rep = sub.add_parser("report", help="score a finished run against ground truth")
    rep.add_argument("--records", required=True, help="records.jsonl of a previous run")
    rep.add_argument("--manifest", required=True, help="manifest with gt_mask_path set")
    rep.add_argument("--baseline", default=None, help="report.json to diff against")
    rep.add_argument("--out", default=None, help="report directory (default: the run dir)")
    return p


def _make_backends(config: PipelineConfig, force_fallback: bool):
    """Backend factories for run_batch; model-free stand-ins when nothing is configured."""
    from .detection import MockDetector, OnnxDetector  # noqa: PLC0415
    from .segmentation import FallbackSegmenter, OnnxSegmenter  # noqa: PLC0415

    if config.detector_model:
        det_path = config.detector_model
        detector = lambda: OnnxDetector(det_path)  # noqa: E731
    else:
        detector = MockDetector()
    if config.segmenter_model and not force_fallback:
        seg_path = config.segmenter_model
        segmenter = lambda: OnnxSegmenter(seg_path)  # noqa: E731
    else:
        segmenter = FallbackSegmenter()
    return detector, segmenter


def _cmd_run(args) -> int:
    config = (
        PipelineConfig.from_json_file(args.config) if args.config else PipelineConfig()
    )
    if args.tta:
        config.tta = True
    rows = load_manifest(args.manifest)
    detector, segmenter = _make_backends(config, args.fallback_segmenter)
    result = run_batch(
        rows, config, args.out, detector=detector, segmenter=segmenter, workers=args.workers
    )
    s = result.summary
    print(f"processed {s['n_images']} images -> {result.out_dir}")
    print(f"success rate: {s['success_rate']}")
    for status, n in s["status_counts"].items():
        if n and status != "success":
            print(f"  {status}: {n}")
    return 1 if result.had_errors else 0


def _cmd_overlay(args) -> int:
    img = load_image(args.image)
    mask = load_mask_png(args.mask)
    emit_overlay(img, mask, args.out, alpha=args.alpha)
    print(f"wrote {args.out}")
    return 0


def _summary_config(run_dir) -> PipelineConfig:
    """Config echo from a run's summary.json, or defaults when absent."""
    path = Path(run_dir) / "summary.json"
    try:
        with open(path, encoding="utf-8") as f:
            return PipelineConfig.from_dict(json.load(f)["config"])
    except (OSError, KeyError, json.JSONDecodeError):
        return PipelineConfig()


def _cmd_report(args) -> int:
    rows = load_manifest(args.manifest)
    records_path = Path(args.records)
    run_dir = records_path if records_path.is_dir() else records_path.parent
    records = load_records(records_path)
    config = _summary_config(run_dir)
    scores = evaluate(
        rows,
        records,
        run_dir,
        scale=designr.SCALES[config.scale_name],
        default_pixels_per_cm=config.default_pixels_per_cm,
    )
    report = report_from_scores(scores)
    if args.baseline:
        with open(args.baseline, encoding="utf-8") as f:
            report["deltas_vs_baseline"] = compare(json.load(f), report)
    json_path, _ = write_report(report, args.out or run_dir)
    sys.stdout.write(render_text(report))
    print(f"wrote {json_path}")
    return 0


def main(argv: list[str] | None = None) -> int:
    args = _build_parser().parse_args(argv)
    handlers = {"run": _cmd_run, "overlay": _cmd_overlay, "report": _cmd_report}
    try:
        return handlers[args.command](args)
    except BackendError as e:
        print(f"backend error: {e}", file=sys.stderr)
        return 1
    except UlcerflowError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
