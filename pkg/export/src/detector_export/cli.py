"""Command line entry for converting a detector checkpoint.

    export-detector --ckpt best.pt --out detector.onnx --check

Exit codes: 0 converted (and parity passed when asked), 1 parity failed,
2 the checkpoint or the conversion itself is broken.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .errors import ExportError, ParityError
from .export import ExportSpec, export
from .parity import checkpoint_runner, onnx_runner, parity_check


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="export-detector",
        description="Convert a detector checkpoint to a portable onnx model.",
    )
    p.add_argument("--ckpt", required=True, help="source checkpoint (.pt)")
    p.add_argument("--out", required=True, help="destination model (.onnx)")
    p.add_argument("--opset", type=int, default=17)
    p.add_argument("--input-size", type=int, default=512)
    p.add_argument("--version-tag", default="v1")
    p.add_argument("--check", action="store_true",
                   help="run checkpoint-vs-export parity and write parity.json")
    p.add_argument("--samples", type=int, default=16, help="parity sample count")
    p.add_argument("--tolerance", type=float, default=1e-4,
                   help="max-abs diff allowed on raw outputs")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        spec = ExportSpec(
            checkpoint=args.ckpt,
            out_path=args.out,
            input_size=args.input_size,
            opset=args.opset,
            version_tag=args.version_tag,
            tolerance=args.tolerance,
        )
        model_path = export(spec)
    except ExportError as e:
        print(f"export failed: {e}", file=sys.stderr)
        return 2
    print(f"wrote {model_path}")
    if not args.check:
        return 0
    try:
        report = parity_check(
            checkpoint_runner(spec.checkpoint),
            onnx_runner(model_path),
            n_samples=args.samples,
            tolerance=spec.tolerance,
            input_size=spec.input_size,
        )
    except ExportError as e:
        print(f"parity run failed: {e}", file=sys.stderr)
        return 2
    except ParityError as e:
        print(f"parity check broke: {e}", file=sys.stderr)
        return 1
    report_path = Path(args.out).parent / "parity.json"
    report.save(report_path)
    print(f"parity max abs diff {report.max_abs_diff:.3g} over {report.n_samples} samples "
          f"-> {'pass' if report.passed else 'FAIL'} ({report_path})")
    return 0 if report.passed else 1


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
