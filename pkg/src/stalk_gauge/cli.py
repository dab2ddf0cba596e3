"""Command-line interface: ``process``, ``evaluate``, ``ablate`` and ``synth``.

Exit codes: 0 success, 1 usage or validation error, 2 measurement failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import sys
import warnings
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import __version__
from .axis_geometry import axis_segment
from .camera_io import (PointCloud, RearView, load_depth, load_intrinsics, load_mask, load_pose,
                        load_rgb, save_depth, save_intrinsics, save_mask, save_pose, write_ply)
from .errors import MeasurementError
from .evaluation import (ABLATION_HEADER, ABLATION_NAMES, RANKING_HEADER, AblationConfigSet,
                         AblationSample, evaluate, format_number, load_pairs, report_row,
                         run_ablation, write_csv)
from .slicing import PipelineConfig, StalkEstimate, load_config, measure_stalk
from .synthscene import GENERATOR, SYNTH_INTRINSICS, random_specs, render_depth

EXIT_OK, EXIT_USAGE, EXIT_MEASUREMENT = 0, 1, 2

SLICES_HEADER = ("slice_index", "slice_label", "t_center_m", "n_raw", "n_kept", "diameter_m",
                 "retained")
SUMMARY_HEADER = ("sample_id", "predicted_m", "ground_truth_m", "abs_error_m", "mean_slice_m",
                  "std_slice_m", "n_valid", "n_retained", "n_input_points", "n_filtered_points",
                  "axis_x", "axis_y", "axis_z")
MANIFEST_HEADER = ("sample_id", "true_diameter_m", "seed", "radius_m", "length_m", "dir_x",
                   "dir_y", "dir_z", "curvature_m", "visibility", "noise_sigma_m",
                   "outlier_fraction", "outlier_scale_m", "interior_fraction", "depth", "mask",
                   "depth_back", "mask_back", "back_pose", "generator")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _fail(message: str, code: int = EXIT_USAGE) -> int:
    print(f"stalk-gauge: {message}", file=sys.stderr)
    return code


# ---------------------------------------------------------------- config

def _parse_set(items: Sequence[str]) -> dict:
    out = {}
    for item in items or ():
        key, sep, raw = item.partition("=")
        if not sep:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        out[key.strip()] = value
    return out


def _effective_config(args, base: Optional[PipelineConfig] = None) -> PipelineConfig:
    cfg = base or PipelineConfig()
    if getattr(args, "config", None):
        cfg = load_config(args.config, cfg)
    flat = _parse_set(getattr(args, "set", None))
    if getattr(args, "dbscan_eps", None) is not None:
        flat["dbscan_eps"] = args.dbscan_eps
    if getattr(args, "no_dbscan", False):
        flat["dbscan_enabled"] = False
    if getattr(args, "no_sor", False):
        flat["sor_enabled"] = False
    return PipelineConfig.from_flat(flat, cfg) if flat else cfg


def _add_config_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat JSON pipeline configuration")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override one configuration key (value parsed as JSON); repeatable")
    p.add_argument("--dbscan-eps", type=float, help="DBSCAN radius in metres")
    p.add_argument("--no-dbscan", action="store_true", help="disable slice-level DBSCAN")
    p.add_argument("--no-sor", action="store_true", help="disable statistical outlier removal")


# ---------------------------------------------------------------- process

def _histogram_svg(diameters: np.ndarray, ground_truth: Optional[float], title: str) -> str:
    """20 equal-width bins over [min, max] of the retained diameters, in millimetres."""
    d = np.asarray(diameters, dtype=np.float64) * 1e3
    lo, hi = float(d.min()), float(d.max())
    if hi == lo:
        hi = lo + max(abs(lo) * 1e-3, 1e-6)
    counts, edges = np.histogram(d, bins=20, range=(lo, hi))
    width, height = 640, 400
    left, right, top, bottom = 60, 20, 40, 50
    plot_w, plot_h = width - left - right, height - top - bottom
    lo_x, hi_x = lo, hi
    if ground_truth is not None:
        g = ground_truth * 1e3
        lo_x, hi_x = min(lo_x, g), max(hi_x, g)
    span = hi_x - lo_x

    def sx(v):
        return left + (v - lo_x) / span * plot_w

    top_count = max(int(counts.max()), 1)

    def sy(c):
        return top + plot_h - c / top_count * plot_h

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">',
        f'<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>',
        f'<text x="{width / 2:.1f}" y="24" text-anchor="middle" font-family="sans-serif" '
        f'font-size="14">{title}</text>',
    ]
    for c, a, b in zip(counts, edges[:-1], edges[1:]):
        if c == 0:
            continue
        x0, x1 = sx(a), sx(b)
        parts.append(f'<rect x="{x0:.2f}" y="{sy(c):.2f}" width="{x1 - x0:.2f}" '
                     f'height="{sy(0) - sy(c):.2f}" fill="#4c72b0" stroke="white" '
                     f'stroke-width="0.5"/>')
    parts.append(f'<line x1="{left}" y1="{top + plot_h}" x2="{left + plot_w}" '
                 f'y2="{top + plot_h}" stroke="black"/>')
    parts.append(f'<line x1="{left}" y1="{top}" x2="{left}" y2="{top + plot_h}" stroke="black"/>')
    for v in (lo_x, 0.5 * (lo_x + hi_x), hi_x):
        parts.append(f'<text x="{sx(v):.2f}" y="{top + plot_h + 18}" text-anchor="middle" '
                     f'font-family="sans-serif" font-size="11">{v:.3f}</text>')
    parts.append(f'<text x="{left + plot_w / 2:.1f}" y="{height - 10}" text-anchor="middle" '
                 f'font-family="sans-serif" font-size="12">slice diameter (mm)</text>')
    parts.append(f'<text x="{left - 8}" y="{top + 4}" text-anchor="end" '
                 f'font-family="sans-serif" font-size="11">{top_count}</text>')
    parts.append(f'<text x="{left - 8}" y="{top + plot_h}" text-anchor="end" '
                 f'font-family="sans-serif" font-size="11">0</text>')
    if ground_truth is not None:
        gx = sx(ground_truth * 1e3)
        parts.append(f'<line x1="{gx:.2f}" y1="{top}" x2="{gx:.2f}" y2="{top + plot_h}" '
                     f'stroke="#c44e52" stroke-width="2" stroke-dasharray="6,3"/>')
        parts.append(f'<text x="{gx + 4:.2f}" y="{top + 12}" font-family="sans-serif" '
                     f'font-size="11" fill="#c44e52">ground truth {ground_truth * 1e3:.3f}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def _slice_rows(est: StalkEstimate) -> list:
    rows = []
    for s in est.slices:
        rows.append([str(s.index), str(s.index + 1), format_number(s.t_center), str(s.n_raw),
                     str(s.n_kept), format_number(s.diameter), "1" if s.retained else "0"])
    return rows


def _summary_row(sample_id: str, est: StalkEstimate, ground_truth: Optional[float]) -> list:
    retained = sum(1 for s in est.slices if s.retained)
    err = None if ground_truth is None else abs(est.predicted_diameter - ground_truth)
    d = est.axis.direction
    return [sample_id, format_number(est.predicted_diameter), format_number(ground_truth),
            format_number(err), format_number(est.mean_diameter), format_number(est.std_diameter),
            str(est.n_valid), str(retained), str(est.n_input_points), str(len(est.cloud)),
            format_number(float(d[0])), format_number(float(d[1])), format_number(float(d[2]))]


def _write_manifest(path: Path, record: dict) -> None:
    path.write_text(json.dumps(record, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _load_rear(args) -> Optional[RearView]:
    given = [args.depth_back, args.mask_back, args.back_pose]
    if not any(given):
        return None
    if not all(given):
        raise UsageError("--depth-back, --mask-back and --back-pose must be given together")
    return RearView(load_depth(args.depth_back), load_mask(args.mask_back),
                    load_pose(args.back_pose))


def cmd_process(args) -> int:
    try:
        config = _effective_config(args)
    except (OSError, ValueError, UsageError) as exc:
        return _fail(str(exc))
    if args.print_config:
        sys.stdout.write(config.to_json())
        return EXIT_OK
    missing = [n for n in ("depth", "mask", "intrinsics") if not getattr(args, n)]
    if missing:
        return _fail("missing required argument(s): " + ", ".join("--" + m for m in missing))
    if args.ground_truth is not None and not (math.isfinite(args.ground_truth)
                                              and args.ground_truth > 0):
        return _fail("--ground-truth must be a positive number of metres")
    sample_id = args.sample_id or Path(args.depth).stem
    out_dir = Path(args.out_dir)
    try:
        intr = load_intrinsics(args.intrinsics)
        depth = load_depth(args.depth)
        mask = load_mask(args.mask)
        rgb = load_rgb(args.rgb) if args.rgb else None
        rear = _load_rear(args)
    except (OSError, ValueError, UsageError) as exc:
        return _fail(str(exc))

    inputs = {"depth": args.depth, "mask": args.mask, "intrinsics": args.intrinsics,
              "rgb": args.rgb, "config": args.config, "depth_back": args.depth_back,
              "mask_back": args.mask_back, "back_pose": args.back_pose}
    record = {"sample_id": sample_id, "inputs": inputs, "config_hash": config.digest(),
              "config": config.to_flat(), "ground_truth_m": args.ground_truth,
              "version": __version__}
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest_path = out_dir / f"{sample_id}_manifest.json"
    try:
        est = measure_stalk(depth, mask, intr, config, rgb=rgb, rear=rear)
    except MeasurementError as exc:
        record.update(status="failed", failure_reason=str(exc), outputs=[])
        _write_manifest(manifest_path, record)
        return _fail(f"{sample_id}: measurement failed: {exc}", EXIT_MEASUREMENT)
    except ValueError as exc:
        return _fail(str(exc))

    paths = {
        "slices": out_dir / f"{sample_id}_slices.csv",
        "summary": out_dir / f"{sample_id}_summary.csv",
        "cloud": out_dir / f"{sample_id}_cloud.ply",
        "axis": out_dir / f"{sample_id}_axis.ply",
        "histogram": out_dir / f"{sample_id}_histogram.svg",
    }
    write_csv(paths["slices"], SLICES_HEADER, _slice_rows(est))
    write_csv(paths["summary"], SUMMARY_HEADER, [_summary_row(sample_id, est, args.ground_truth)])
    write_ply(est.cloud, paths["cloud"])
    a, b = axis_segment(est.axis)
    write_ply(PointCloud(np.vstack([a, b])), paths["axis"], edges=[[0, 1]])
    retained = np.array([s.diameter for s in est.slices if s.retained])
    paths["histogram"].write_text(
        _histogram_svg(retained, args.ground_truth, f"{sample_id}: retained slice diameters"),
        encoding="utf-8")
    record.update(status="ok", failure_reason=None,
                  outputs=[p.name for p in paths.values()],
                  predicted_m=float(f"{est.predicted_diameter:.6g}"))
    _write_manifest(manifest_path, record)
    print(f"{sample_id}: predicted diameter {format_number(est.predicted_diameter)} m "
          f"({est.n_valid} valid slices)")
    return EXIT_OK


# ---------------------------------------------------------------- evaluate

def cmd_evaluate(args) -> int:
    try:
        pairs = load_pairs(args.pairs)
        report = evaluate(pairs)
    except (OSError, ValueError) as exc:
        return _fail(str(exc))
    if report.r2 is None:
        print("stalk-gauge: r2: undefined (needs at least two samples with distinct actual "
              "values)", file=sys.stderr)
    header = ("n",) + ABLATION_HEADER[1:]
    row = [str(report.n)] + report_row(report)
    sys.stdout.write(",".join(header) + "\n" + ",".join(row) + "\n")
    if args.out:
        write_csv(args.out, header, [row])
    return EXIT_OK


# ---------------------------------------------------------------- ablate

def _read_manifest(dataset: Path) -> list:
    path = dataset / "manifest.csv"
    if not path.is_file():
        raise UsageError(f"{dataset}: no manifest.csv")
    with open(path, encoding="utf-8", newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise UsageError(f"{path}: manifest has no samples")
    for col in ("sample_id", "true_diameter_m", "depth", "mask"):
        if col not in rows[0]:
            raise UsageError(f"{path}: manifest lacks column {col!r}")
    return rows


def load_dataset(dataset) -> list:
    """Samples listed in ``<dataset>/manifest.csv`` (as written by ``synth``)."""
    dataset = Path(dataset)
    rows = _read_manifest(dataset)
    intr = load_intrinsics(dataset / "intrinsics.json")
    samples = []
    for row in rows:
        rear = None
        if row.get("depth_back"):
            rear = RearView(load_depth(dataset / row["depth_back"]),
                            load_mask(dataset / row["mask_back"]),
                            load_pose(dataset / row["back_pose"]))
        samples.append(AblationSample(row["sample_id"], load_depth(dataset / row["depth"]),
                                      load_mask(dataset / row["mask"]), intr,
                                      float(row["true_diameter_m"]), rear))
    return samples


def _ablation_spec(path: Optional[str]) -> tuple:
    """``(names, base_overrides)`` from a ``--configs`` JSON file."""
    if not path:
        return ABLATION_NAMES, {}
    with open(path, encoding="utf-8") as fh:
        data = json.load(fh)
    if isinstance(data, list):
        return tuple(data), {}
    if isinstance(data, dict):
        unknown = set(data) - {"names", "base"}
        if unknown:
            raise UsageError(f"{path}: unknown keys {sorted(unknown)}")
        names = tuple(data.get("names", ABLATION_NAMES))
        base = data.get("base", {})
        if not isinstance(base, dict):
            raise UsageError(f"{path}: 'base' must be an object")
        return names, base
    raise UsageError(f"{path}: expected a list of names or an object")


def cmd_ablate(args) -> int:
    try:
        names, base_flat = _ablation_spec(args.configs)
        base = PipelineConfig.from_flat(base_flat)
        base = _effective_config(args, base)
        configs = AblationConfigSet.standard(base, names)
        dataset = load_dataset(args.dataset)
    except (OSError, ValueError, UsageError) as exc:
        return _fail(str(exc))
    try:
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            result = run_ablation(dataset, configs)
    except ValueError as exc:
        return _fail(str(exc))
    except MeasurementError as exc:
        return _fail(str(exc), EXIT_MEASUREMENT)
    for w in caught:
        print(f"stalk-gauge: warning: {w.message}", file=sys.stderr)

    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_csv(out_dir / "ablation.csv", ABLATION_HEADER, result.table_rows())
    write_csv(out_dir / "ranking.csv", RANKING_HEADER, result.ranking_rows())
    write_csv(out_dir / "predictions.csv", ("sample_id",) + tuple(result.names),
              result.prediction_rows([s.sample_id for s in dataset]))
    for name in result.names:
        for sid, reason in result.failures[name]:
            print(f"stalk-gauge: {name}: {sid}: {reason}", file=sys.stderr)
    sys.stdout.write(",".join(ABLATION_HEADER) + "\n")
    for row in result.table_rows():
        sys.stdout.write(",".join(row) + "\n")
    return EXIT_OK


# ---------------------------------------------------------------- synth

def cmd_synth(args) -> int:
    try:
        if args.n < 1:
            raise ValueError("--n must be >= 1")
        if args.radius_mm is not None:
            if not args.radius_mm > 0:
                raise ValueError("--radius-mm must be > 0")
            d_range = (2e-3 * args.radius_mm,) * 2
        else:
            d_range = (1e-3 * args.diameter_min_mm, 1e-3 * args.diameter_max_mm)
            if not 0 < d_range[0] <= d_range[1]:
                raise ValueError("need 0 < --diameter-min-mm <= --diameter-max-mm")
        if not 0 <= args.min_abs_z < args.max_abs_z <= 1:
            raise ValueError("need 0 <= --min-abs-z < --max-abs-z <= 1")
        intr = load_intrinsics(args.intrinsics) if args.intrinsics else SYNTH_INTRINSICS
        specs = random_specs(
            args.n, args.seed, diameter_range=d_range, length=1e-3 * args.length_mm,
            orientation=args.orientation, min_abs_z=args.min_abs_z, max_abs_z=args.max_abs_z,
            distance=args.distance_m, curvature=1e-3 * args.curvature_mm,
            visibility=args.visibility, noise_sigma=1e-3 * args.noise_mm,
            outlier_fraction=args.outlier_fraction, outlier_scale=1e-3 * args.outlier_scale_mm,
            interior_fraction=args.interior_fraction)
    except (OSError, ValueError) as exc:
        return _fail(str(exc))

    out_dir = Path(args.out_dir)
    ext = "." + args.format
    rows = []
    try:
        rendered = [render_depth(s, intr, max_incidence_deg=args.max_incidence_deg)
                    for s in specs]
    except ValueError as exc:
        return _fail(str(exc))
    out_dir.mkdir(parents=True, exist_ok=True)
    save_intrinsics(intr, out_dir / "intrinsics.json")
    width = len(str(args.n - 1))
    for i, (spec, sample) in enumerate(zip(specs, rendered)):
        sid = f"stalk{i:0{width}d}"
        files = {"depth": f"{sid}_depth{ext}", "mask": f"{sid}_mask.png",
                 "depth_back": "", "mask_back": "", "back_pose": ""}
        save_depth(sample.depth, out_dir / files["depth"])
        save_mask(sample.mask, out_dir / files["mask"])
        if sample.rear is not None:
            files.update(depth_back=f"{sid}_depth_back{ext}", mask_back=f"{sid}_mask_back.png",
                         back_pose=f"{sid}_back_pose.json")
            save_depth(sample.rear.depth, out_dir / files["depth_back"])
            save_mask(sample.rear.mask, out_dir / files["mask_back"])
            save_pose(sample.rear.to_front, out_dir / files["back_pose"])
        d = spec.direction
        rows.append([sid, format_number(sample.true_diameter), str(spec.seed),
                     format_number(spec.radius), format_number(spec.length),
                     format_number(float(d[0])), format_number(float(d[1])),
                     format_number(float(d[2])), format_number(spec.curvature), spec.visibility,
                     format_number(spec.noise_sigma), format_number(spec.outlier_fraction),
                     format_number(spec.outlier_scale), format_number(spec.interior_fraction),
                     files["depth"], files["mask"], files["depth_back"], files["mask_back"],
                     files["back_pose"], GENERATOR])
    write_csv(out_dir / "manifest.csv", MANIFEST_HEADER, rows)
    print(f"wrote {len(rows)} sample(s) to {out_dir}")
    return EXIT_OK


# ---------------------------------------------------------------- entry point

def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="stalk-gauge",
                     description="Stalk diameter estimation from masked depth images.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("process", help="measure one masked depth image")
    p.add_argument("--depth", help="16-bit depth PNG or ASCII PGM")
    p.add_argument("--mask", help="binary mask image (resized to the depth resolution)")
    p.add_argument("--intrinsics", help="camera intrinsics JSON")
    p.add_argument("--rgb", help="optional colour image for the exported cloud")
    p.add_argument("--depth-back", help="depth image of a registered rear view")
    p.add_argument("--mask-back", help="mask of the rear view")
    p.add_argument("--back-pose", help="JSON 4x4 transform from rear to front camera")
    p.add_argument("--ground-truth", type=float, metavar="METRES",
                   help="true diameter, marked on the histogram")
    p.add_argument("--sample-id", help="output file prefix (default: depth file stem)")
    p.add_argument("--out-dir", default=".", help="output directory")
    p.add_argument("--print-config", action="store_true",
                   help="print the effective configuration as JSON and exit")
    _add_config_args(p)
    p.set_defaults(func=cmd_process)

    p = sub.add_parser("evaluate", help="regression metrics for predicted/actual pairs")
    p.add_argument("--pairs", required=True, help="CSV with sample_id,predicted_m,actual_m")
    p.add_argument("--out", help="also write the report to this CSV")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("ablate", help="run the component ablation over a dataset")
    p.add_argument("--dataset", required=True, help="directory with manifest.csv")
    p.add_argument("--configs", help="JSON list of configuration names, or "
                   '{"names": [...], "base": {flat config}}')
    p.add_argument("--out-dir", default=".", help="output directory")
    _add_config_args(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("synth", help="render synthetic stalks with known diameter")
    p.add_argument("--n", type=int, required=True, help="number of samples")
    p.add_argument("--seed", type=int, required=True, help="master seed")
    p.add_argument("--out-dir", required=True, help="output directory")
    p.add_argument("--radius-mm", type=float, help="fixed radius (overrides the diameter range)")
    p.add_argument("--diameter-min-mm", type=float, default=10.0)
    p.add_argument("--diameter-max-mm", type=float, default=20.0)
    p.add_argument("--length-mm", type=float, default=120.0)
    p.add_argument("--distance-m", type=float, default=0.3, help="camera to stalk midpoint")
    p.add_argument("--orientation", choices=("random", "vertical"), default="random")
    p.add_argument("--min-abs-z", type=float, default=0.1)
    p.add_argument("--max-abs-z", type=float, default=1.0)
    p.add_argument("--curvature-mm", type=float, default=0.0, help="mid-span bow")
    p.add_argument("--visibility", choices=("full", "half"), default="full")
    p.add_argument("--noise-mm", type=float, default=0.0, help="Gaussian depth noise sigma")
    p.add_argument("--outlier-fraction", type=float, default=0.0,
                   help="fraction of pixels pushed away from the camera")
    p.add_argument("--outlier-scale-mm", type=float, default=0.0,
                   help="maximum flying-pixel offset")
    p.add_argument("--interior-fraction", type=float, default=0.0,
                   help="fraction of pixels with depth inside the stalk")
    p.add_argument("--max-incidence-deg", type=float,
                   help="drop pixels seen at a steeper incidence angle")
    p.add_argument("--intrinsics", help="camera intrinsics JSON (default 640x480, f=800)")
    p.add_argument("--format", choices=("png", "pgm"), default="png", help="depth file format")
    p.set_defaults(func=cmd_synth)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if not getattr(args, "func", None):
        parser.print_help(sys.stderr)
        return EXIT_USAGE
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
