"""Command-line pipeline: phantom generation, propagation, harmonization, evaluation.

Subcommands::

    phantom    generate a synthetic beating-heart cine series (MVOL + manifest)
    propagate  propagate template labels to unlabeled frames of a series
    histmatch  match every frame of a series to its own pooled reference
    transfer   re-style volumes from one vendor to another vendor's reference
    evaluate   per-class Dice/Hausdorff between two directories of label maps
    report     per-group intensity histograms and pairwise KS statistics

Exit codes: 0 success, 2 usage error, 3 I/O or file-format error,
4 algorithmic degeneracy (constant images, empty masks where forbidden).
The ``CINEPROP_WORKERS`` environment variable sets the default worker count;
the ``--workers`` flag overrides it.
"""

from __future__ import annotations

import argparse
import os
import re
import sys
from pathlib import Path

from . import io
from .errors import (
    CinepropError,
    DegenerateInputError,
    EmptyMaskError,
    FormatError,
    InvalidParameterError,
    InvalidTargetError,
    MissingVendorError,
    SeriesPropagationError,
)
from .metrics import evaluate_case
from .phantom import PhantomSpec, generate_cine
from .propagation import propagate_series
from .registration import RegistrationParams
from .style import build_reference, histogram_match, histogram_report, vendor_transfer

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_IO = 3
EXIT_DEGENERATE = 4


def _default_workers() -> int:
    raw = os.environ.get("CINEPROP_WORKERS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cineprop", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="subcommand", required=True)

    p_phantom = sub.add_parser("phantom", help="generate a synthetic cine series")
    p_phantom.add_argument("--frames", type=int, default=11)
    p_phantom.add_argument("--out", required=True)
    p_phantom.add_argument("--seed", type=int, default=0)

    p_prop = sub.add_parser("propagate", help="propagate template labels to unlabeled frames")
    p_prop.add_argument("--manifest", required=True)
    p_prop.add_argument("--out", required=True)
    p_prop.add_argument("--workers", type=int, default=None)
    p_prop.add_argument("--similarity", choices=("mse", "ncc"), default="ncc")
    p_prop.add_argument("--pyramid-levels", type=int, default=3)
    p_prop.add_argument("--iters", default="50,50,30", help="comma list, coarse to fine")
    p_prop.add_argument("--sigma", type=float, default=1.5, help="field smoothing sigma (voxels)")
    p_prop.add_argument("--step", type=float, default=0.5, help="optimizer step size (voxels)")

    p_match = sub.add_parser("histmatch", help="match each frame to the series' pooled reference")
    p_match.add_argument("--manifest", required=True)
    p_match.add_argument("--out", required=True)
    p_match.add_argument("--n-ref-volumes", type=int, default=100)
    p_match.add_argument("--seed", type=int, default=0)

    p_transfer = sub.add_parser("transfer", help="re-style one vendor's volumes to another's")
    p_transfer.add_argument("--manifest", action="append", required=True)
    p_transfer.add_argument("--from-vendor", required=True)
    p_transfer.add_argument("--to-vendor", required=True)
    p_transfer.add_argument("--out", required=True)
    p_transfer.add_argument("--n-ref-volumes", type=int, default=100)
    p_transfer.add_argument("--seed", type=int, default=0)

    p_eval = sub.add_parser("evaluate", help="Dice/Hausdorff between two label directories")
    p_eval.add_argument("--pred", required=True)
    p_eval.add_argument("--gt", required=True)
    p_eval.add_argument("--out", default=None)

    p_report = sub.add_parser("report", help="histogram report across manifests")
    p_report.add_argument("--manifest", action="append", required=True)
    p_report.add_argument("--bins", type=int, default=64)
    p_report.add_argument("--out", default=None)

    return parser


def _cmd_phantom(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    spec = PhantomSpec(
        frames=args.frames,
        es_index=0,
        ed_index=args.frames - 1,
        seed=args.seed,
        noise_sigma=10.0,
    )
    cine = generate_cine(spec)
    frame_paths = []
    for t, frame in enumerate(cine.series.frames):
        p = out / f"frame_{t:03d}.mvol"
        io.write_mvol(frame, p)
        frame_paths.append(p)
    for t, label in enumerate(cine.ground_truth):
        io.write_mvol(label, out / f"label_{t:03d}.mvol")
    manifest = io.CineManifest(
        subject_id=cine.series.subject,
        frame_paths=tuple(frame_paths),
        es_index=spec.es_index,
        ed_index=spec.ed_index,
        es_label_path=out / f"label_{spec.es_index:03d}.mvol",
        ed_label_path=out / f"label_{spec.ed_index:03d}.mvol",
        vendor=cine.series.vendor,
        center=cine.series.center,
    )
    io.write_manifest(manifest, out / "manifest.txt")
    io.write_summary(
        {
            "command": "phantom",
            "frames": spec.frames,
            "seed": args.seed,
            "dims": "x".join(str(d) for d in spec.dims),
            "manifest": "manifest.txt",
        },
        out / "summary.txt",
    )
    return EXIT_OK


def _registration_params(args) -> RegistrationParams:
    iters = tuple(int(x) for x in str(args.iters).split(",") if x.strip())
    return RegistrationParams(
        pyramid_levels=args.pyramid_levels,
        iterations_per_level=iters,
        similarity=args.similarity,
        step_size=args.step,
        demons_sigma_vox=args.sigma,
    )


def _cmd_propagate(args) -> int:
    manifest = io.read_manifest(args.manifest)
    series = io.load_series(manifest)
    params = _registration_params(args)
    workers = args.workers if args.workers is not None else _default_workers()
    results = propagate_series(series, params, workers=workers)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for res in results:
        io.write_mvol(res.pseudo_label, out / f"pseudo_label_{res.frame_index:03d}.mvol")
    info = {
        "subject": manifest.subject_id,
        "frames": len(series.frames),
        "es_index": series.es_index,
        "ed_index": series.ed_index,
    }
    io.write_propagation_report(results, info, out / "propagation_report.txt")
    io.write_summary(
        {
            "command": "propagate",
            "subject": manifest.subject_id,
            "propagated": len(results),
            "similarity": params.similarity,
            "report": "propagation_report.txt",
        },
        out / "summary.txt",
    )
    return EXIT_OK


def _cmd_histmatch(args) -> int:
    manifest = io.read_manifest(args.manifest)
    series = io.load_series(manifest)
    corpus = list(series.frames)
    n = min(args.n_ref_volumes, len(corpus))
    ref = build_reference(corpus, n, args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    degenerate = 0
    for t, frame in enumerate(series.frames):
        matched, flag = histogram_match(frame, ref)
        degenerate += int(flag)
        io.write_mvol(matched, out / f"matched_{t:03d}.mvol")
    io.write_summary(
        {
            "command": "histmatch",
            "subject": manifest.subject_id,
            "matched": len(series.frames),
            "n_ref_volumes": n,
            "seed": args.seed,
            "degenerate": degenerate,
        },
        out / "summary.txt",
    )
    return EXIT_OK


def _cmd_transfer(args) -> int:
    volumes = []
    sources = []  # (subject, frame_index) per from-vendor volume, in order
    for mpath in args.manifest:
        manifest = io.read_manifest(mpath)
        series = io.load_series(manifest)
        for t, frame in enumerate(series.frames):
            volumes.append((frame, manifest.vendor))
            if manifest.vendor == args.from_vendor:
                sources.append((manifest.subject_id, t))
    transferred = vendor_transfer(
        volumes, args.from_vendor, args.to_vendor, args.seed, n_ref=args.n_ref_volumes
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for (subject, t), vol in zip(sources, transferred):
        io.write_mvol(vol, out / f"transfer_{subject}_{t:03d}.mvol")
    io.write_summary(
        {
            "command": "transfer",
            "from_vendor": args.from_vendor,
            "to_vendor": args.to_vendor,
            "transferred": len(transferred),
            "seed": args.seed,
        },
        out / "summary.txt",
    )
    return EXIT_OK


def _pair_label_files(pred_dir: Path, gt_dir: Path) -> list[tuple[str, Path, Path]]:
    pred_files = sorted(pred_dir.glob("*.mvol"))
    gt_files = sorted(gt_dir.glob("*.mvol"))
    if not pred_files or not gt_files:
        raise FormatError("payload", f"no .mvol files in {pred_dir if not pred_files else gt_dir}")
    gt_by_name = {p.name: p for p in gt_files}
    if all(p.name in gt_by_name for p in pred_files):
        return [(p.stem, p, gt_by_name[p.name]) for p in pred_files]

    def index_of(path: Path) -> int | None:
        matches = re.findall(r"(\d+)", path.stem)
        return int(matches[-1]) if matches else None

    gt_by_index = {index_of(p): p for p in gt_files}
    pairs = []
    for p in pred_files:
        idx = index_of(p)
        if idx is None or idx not in gt_by_index:
            raise FormatError("payload", f"no ground-truth match for {p.name}")
        pairs.append((p.stem, p, gt_by_index[idx]))
    return pairs


def _cmd_evaluate(args) -> int:
    pairs = _pair_label_files(Path(args.pred), Path(args.gt))
    cases = []
    for name, pred_path, gt_path in pairs:
        report = evaluate_case(io.read_labels(pred_path), io.read_labels(gt_path))
        cases.append((name, report))
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        io.write_evaluation_report(cases, out / "evaluation_report.txt")
        io.write_summary(
            {"command": "evaluate", "cases": len(cases), "report": "evaluation_report.txt"},
            out / "summary.txt",
        )
    else:
        lines = [f"cases = {len(cases)}"]
        for name, report in cases:
            lines.append(f"case = {name}")
            lines.extend(io.format_case_report(report))
        sys.stdout.write("\n".join(lines) + "\n")
    return EXIT_OK


def _cmd_report(args) -> int:
    groups: dict[str, list] = {}
    for mpath in args.manifest:
        manifest = io.read_manifest(mpath)
        series = io.load_series(manifest)
        groups.setdefault(manifest.vendor, []).extend(series.frames)
    report = histogram_report(groups, args.bins)
    text = report.to_text()
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "histogram_report.txt").write_text(text)
        io.write_summary(
            {"command": "report", "groups": len(groups), "bins": args.bins},
            out / "summary.txt",
        )
    else:
        sys.stdout.write(text)
    return EXIT_OK


_HANDLERS = {
    "phantom": _cmd_phantom,
    "propagate": _cmd_propagate,
    "histmatch": _cmd_histmatch,
    "transfer": _cmd_transfer,
    "evaluate": _cmd_evaluate,
    "report": _cmd_report,
}


def run(argv: list[str]) -> int:
    """Execute one subcommand; returns the process exit code."""
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code else EXIT_OK
    try:
        return _HANDLERS[args.subcommand](args)
    except (DegenerateInputError, EmptyMaskError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DEGENERATE
    except SeriesPropagationError as exc:
        degenerate = all(isinstance(e, DegenerateInputError) for _, e in exc.failures)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DEGENERATE if degenerate else EXIT_IO
    except (InvalidParameterError, InvalidTargetError, MissingVendorError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FormatError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except CinepropError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


def main() -> None:
    sys.exit(run(sys.argv[1:]))


if __name__ == "__main__":
    main()
