"""Command-line front end for the full pipeline.

Subcommands: build-bank, score, evaluate, overlay, report.  Exit codes:
0 on success, 2 for configuration problems, 3 for data problems.
"""

from __future__ import annotations

import argparse
import logging
import sys

from . import __version__
from .errors import ConfigError, DataError, SuperADError
from .manifest import DEFAULT_EVAL_SPLIT, build_manifest, load_config_overrides
from .metrics import EvalResult, load_report, summary_csv
from .features import atomic_write_bytes
from .pipeline import cmd_build_bank, cmd_evaluate, cmd_score
from .viz import cmd_overlay

log = logging.getLogger(__name__)


def _add_manifest_args(parser: argparse.ArgumentParser, dataset: bool = False) -> None:
    parser.add_argument("--features-root", required=True, help="root of exported .sadf files")
    parser.add_argument("--output", required=True, help="root for banks, maps, and reports")
    if dataset:
        parser.add_argument("--dataset-root", required=True, help="MVTec AD 2 style dataset root")
    else:
        parser.add_argument("--dataset-root", default=None, help="dataset root (optional here)")
    parser.add_argument(
        "--category", action="append", default=None, help="category name, repeatable"
    )
    parser.add_argument("--config", default=None, help="JSON config overrides document")
    parser.add_argument(
        "--sigma", type=float, default=None, help="override smoothing sigma (pixels)"
    )


def _manifest_from(args: argparse.Namespace):
    overrides = load_config_overrides(args.config) if args.config else None
    return build_manifest(
        features_root=args.features_root,
        output_root=args.output,
        dataset_root=args.dataset_root,
        categories=args.category,
        overrides=overrides,
        sigma=args.sigma,
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="superad",
        description="Training-free anomaly segmentation with patch-feature memory banks.",
    )
    parser.add_argument("--version", action="version", version=f"superad {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("build-bank", help="select references and build memory banks")
    _add_manifest_args(p)
    p.add_argument(
        "--debug-maps",
        action="store_true",
        help="also dump reference foreground masks as PGM files",
    )

    p = sub.add_parser("score", help="score a split against the banks")
    _add_manifest_args(p)
    p.add_argument("--split", default=DEFAULT_EVAL_SPLIT, help="dataset split to score")
    p.add_argument(
        "--debug-maps", action="store_true", help="also persist per-layer grid maps"
    )

    p = sub.add_parser("evaluate", help="compute metrics on a scored split with ground truth")
    _add_manifest_args(p, dataset=True)
    p.add_argument("--split", default=DEFAULT_EVAL_SPLIT, help="split with ground truth")
    p.add_argument(
        "--threshold", type=float, default=None, help="freeze the pixel threshold (skip sweep)"
    )
    p.add_argument(
        "--image-threshold", type=float, default=None, help="freeze the image-level threshold"
    )

    p = sub.add_parser("overlay", help="render a heatmap overlay for one image")
    p.add_argument("--map", required=True, help=".anom file")
    p.add_argument("--image", required=True, help="matching image file")
    p.add_argument("--out", required=True, help="output PNG")
    p.add_argument("--threshold", type=float, default=None, help="mask threshold")

    p = sub.add_parser("report", help="aggregate per-category reports into summary.csv")
    p.add_argument("--output", required=True, help="output root with reports/*.json")
    return parser


def _result_from_report(payload: dict) -> EvalResult:
    return EvalResult(
        category=payload["category"],
        threshold=payload["threshold"],
        pixel_f1=payload["pixel_f1"],
        precision=payload["precision"],
        recall=payload["recall"],
        auroc_limit=payload["auroc_0.05"],
        aupro_limit=payload["aupro_0.05"],
        class_f1=payload["class_f1"],
        image_threshold=payload["image_threshold"],
        counts=(
            payload["counts"]["tp"],
            payload["counts"]["fp"],
            payload["counts"]["fn"],
            payload["counts"]["tn"],
        ),
    )


def _run(args: argparse.Namespace) -> int:
    if args.command == "build-bank":
        manifest = _manifest_from(args)
        for category in manifest.categories:
            cmd_build_bank(manifest, category, debug_masks=args.debug_maps)
        return 0
    if args.command == "score":
        manifest = _manifest_from(args)
        for category in manifest.categories:
            cmd_score(manifest, category, args.split, debug_maps=args.debug_maps)
        return 0
    if args.command == "evaluate":
        manifest = _manifest_from(args)
        results = []
        for category in manifest.categories:
            results.append(
                cmd_evaluate(
                    manifest,
                    category,
                    args.split,
                    threshold=args.threshold,
                    image_threshold=args.image_threshold,
                )
            )
        atomic_write_bytes(manifest.summary_path(), summary_csv(results).encode())
        for r in results:
            print(
                f"{r.category}: pixel_f1={r.pixel_f1:.4f} auroc_0.05={r.auroc_limit:.4f} "
                f"aupro_0.05={r.aupro_limit:.4f} class_f1={r.class_f1:.4f} "
                f"threshold={r.threshold:.6g}"
            )
        return 0
    if args.command == "overlay":
        cmd_overlay(args.map, args.image, args.out, threshold=args.threshold)
        return 0
    if args.command == "report":
        from pathlib import Path

        reports_dir = Path(args.output) / "reports"
        report_files = sorted(reports_dir.glob("*.json"))
        if not report_files:
            raise DataError(f"no reports found under {reports_dir}; run evaluate first")
        results = [_result_from_report(load_report(p)) for p in report_files]
        csv_path = reports_dir / "summary.csv"
        atomic_write_bytes(csv_path, summary_csv(results).encode())
        print(csv_path)
        return 0
    raise ConfigError(f"unknown command {args.command!r}")


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        return _run(args)
    except ConfigError as exc:
        print(f"superad: config error: {exc}", file=sys.stderr)
        return 2
    except (DataError, OSError) as exc:
        print(f"superad: data error: {exc}", file=sys.stderr)
        return 3
    except (ValueError, SuperADError) as exc:
        print(f"superad: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
