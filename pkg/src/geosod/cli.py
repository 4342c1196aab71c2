"""``geosod`` command line: synth, train, segment, eval, superpoints, curves,
gradcheck, ablation and density.

Exit codes: 0 success, 1 usage, 2 data error, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import csv
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import ad
from .metrics import aggregate, evaluate_sample, write_curve_csv, write_report
from .model import VARIANTS, extract_features, load_checkpoint, prepare, run, save_checkpoint
from .pcio import PlyError, build_input_features, generate_scene, load_ply, random_scene_spec, save_ply
from .superpoint import partition, random_colors
from .train import TrainConfig, TrainingDiverged, ablation_harness, density_harness, train

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

log = logging.getLogger("geosod")


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _gamma(text: str) -> Optional[float]:
    if text == "auto":
        return None
    try:
        v = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a number or 'auto', got {text!r}")
    if not v >= 0:
        raise argparse.ArgumentTypeError("gamma must be >= 0")
    return v


def _positive(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return v


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="geosod", description="Point cloud salient object detection toolkit.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="generate labelled synthetic scenes")
    s.add_argument("--out", required=True, type=Path)
    s.add_argument("--scenes", required=True, type=_positive)
    s.add_argument("--points", required=True, type=int)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--ascii", action="store_true", help="write ASCII PLY")

    t = sub.add_parser("train", help="train a model on labelled PLY scenes")
    t.add_argument("--data", required=True, type=Path)
    t.add_argument("--out", required=True, type=Path, help="checkpoint directory")
    t.add_argument("--config", type=Path, help="key = value training config")
    t.add_argument("--variant", choices=VARIANTS, default="+SP+GE+CA")
    t.add_argument("--val", type=Path)
    t.add_argument("--epochs", type=_positive)
    t.add_argument("--seed", type=int)
    t.add_argument("--xyz-only", action="store_true")

    g = sub.add_parser("segment", help="predict per-point saliency")
    g.add_argument("--model", required=True, type=Path)
    g.add_argument("--in", dest="inp", required=True, type=Path)
    g.add_argument("--out", required=True, type=Path)
    g.add_argument("--xyz-only", action="store_true")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--ascii", action="store_true")

    e = sub.add_parser("eval", help="score predicted PLYs against ground truth")
    e.add_argument("--pred", required=True, type=Path)
    e.add_argument("--gt", required=True, type=Path)
    e.add_argument("--report", required=True, type=Path)
    e.add_argument("--curves", required=True, type=Path)

    c = sub.add_parser("curves", help="per-sample and mean PR/F/E curve CSVs")
    c.add_argument("--pred", required=True, type=Path)
    c.add_argument("--gt", required=True, type=Path)
    c.add_argument("--out", required=True, type=Path, help="output directory")

    sp = sub.add_parser("superpoints", help="color a cloud by its superpoint partition")
    sp.add_argument("--in", dest="inp", required=True, type=Path)
    sp.add_argument("--out", required=True, type=Path)
    sp.add_argument("--k", type=_positive, default=32)
    sp.add_argument("--gamma", type=_gamma, default=None, help="feature threshold or 'auto'")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--model", type=Path, help="cluster on a checkpoint's features")
    sp.add_argument("--ascii", action="store_true")

    sub.add_parser("gradcheck", help="run the finite-difference gradient suite")

    a = sub.add_parser("ablation", help="train all variants over seeds, write the ladder CSV")
    a.add_argument("--train", required=True, type=Path)
    a.add_argument("--test", required=True, type=Path)
    a.add_argument("--out", required=True, type=Path)
    a.add_argument("--config", type=Path)
    a.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])

    d = sub.add_parser("density", help="MAE of a model at reduced point densities")
    d.add_argument("--model", required=True, type=Path)
    d.add_argument("--data", required=True, type=Path)
    d.add_argument("--out", required=True, type=Path)
    d.add_argument("--factors", type=float, nargs="+", default=[1.0, 0.5, 0.25])
    d.add_argument("--seed", type=int, default=0)
    return p


# --- helpers ---------------------------------------------------------------

def _ply_files(directory: Path) -> list[Path]:
    if not directory.is_dir():
        raise DataError(f"{directory}: not a directory")
    files = sorted(directory.glob("*.ply"))
    if not files:
        raise DataError(f"{directory}: no .ply files")
    return files


def _load_labelled(directory: Path):
    clouds = []
    for f in _ply_files(directory):
        c = load_ply(f)
        if c.gt_mask is None:
            raise DataError(f"{f}: no label property")
        clouds.append(c)
    return clouds


def _train_config(path: Optional[Path]) -> TrainConfig:
    if path is None:
        return TrainConfig()
    try:
        return TrainConfig.load(path)
    except (ValueError, KeyError) as exc:
        raise DataError(f"{path}: {exc}") from exc


def _pairs(pred_dir: Path, gt_dir: Path):
    pred = {f.name: f for f in _ply_files(pred_dir)}
    gt = {f.name: f for f in _ply_files(gt_dir)}
    missing_gt = sorted(set(pred) - set(gt))
    missing_pred = sorted(set(gt) - set(pred))
    if missing_gt or missing_pred:
        parts = []
        if missing_pred:
            parts.append("no prediction for: " + ", ".join(missing_pred))
        if missing_gt:
            parts.append("no ground truth for: " + ", ".join(missing_gt))
        raise DataError("unmatched pairs; " + "; ".join(parts))
    out = []
    for name in sorted(pred):
        p, g = load_ply(pred[name]), load_ply(gt[name])
        if p.saliency is None:
            raise DataError(f"{pred[name]}: no saliency property")
        if g.gt_mask is None:
            raise DataError(f"{gt[name]}: no label property")
        if p.n != g.n:
            raise DataError(f"{name}: {p.n} predicted points vs {g.n} ground-truth points")
        out.append((Path(name).stem, p.saliency, g.gt_mask))
    return out


def _score(pairs):
    return aggregate([evaluate_sample(s, g, name) for name, s, g in pairs])


# --- commands --------------------------------------------------------------

def cmd_synth(args) -> int:
    if args.points < 64:
        raise UsageError("--points must be >= 64")
    args.out.mkdir(parents=True, exist_ok=True)
    seeds = np.random.default_rng(args.seed).integers(0, 2**31 - 1, size=args.scenes)
    rows = []
    for i, s in enumerate(seeds):
        name = f"scene_{i:04d}.ply"
        cloud = generate_scene(random_scene_spec(int(s), args.points))
        save_ply(cloud, args.out / name, binary=not args.ascii)
        rows.append((name, int(s), cloud.n))
    with open(args.out / "manifest.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["file", "seed", "points"])
        w.writerows(rows)
    print(f"wrote {len(rows)} scenes to {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _train_config(args.config)
    if args.epochs is not None:
        cfg = replace(cfg, epochs=args.epochs)
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    if args.xyz_only:
        cfg = replace(cfg, xyz_only=True)
    data = _load_labelled(args.data)
    val = _load_labelled(args.val) if args.val else None
    res = train(data, cfg, args.variant, val=val, out_dir=args.out)
    cfg.save(args.out / "train_config.txt")
    last = res.history[-1]
    print(f"trained {args.variant} for {cfg.epochs} epochs in {res.seconds:.1f}s; "
          f"final loss {last['loss']:.5f} val_iou {last['val_iou']:.4f}")
    return EXIT_OK


def cmd_segment(args) -> int:
    params, mcfg = load_checkpoint(args.model)
    if mcfg.xyz_only != args.xyz_only:
        want = "xyz-only" if mcfg.xyz_only else "xyz+rgb"
        got = "xyz-only" if args.xyz_only else "xyz+rgb"
        raise DataError(f"channel mismatch: checkpoint expects {want} input, flags select {got}")
    cloud = load_ply(args.inp)
    with ad.no_grad():
        sal = run(prepare(cloud, mcfg), params, mcfg, seed=args.seed).saliency
    # binarize the value that is actually stored
    sal32 = sal.astype(np.float32).astype(np.float64)
    out = cloud.replace(saliency=sal32)
    save_ply(out, args.out, binary=not args.ascii, label=(sal32 >= 0.5).astype(np.uint8))
    print(f"segmented {cloud.n} points; {int((sal32 >= 0.5).sum())} salient")
    return EXIT_OK


def cmd_eval(args) -> int:
    report = _score(_pairs(args.pred, args.gt))
    write_report(report, args.report)
    write_curve_csv(report.curve, args.curves)
    print(f"mae {report.mae:.4f}  f {report.f_measure:.4f}  e {report.e_measure:.4f}  iou {report.iou:.4f}"
          f"  ({len(report.samples)} samples)")
    return EXIT_OK


def cmd_curves(args) -> int:
    report = _score(_pairs(args.pred, args.gt))
    args.out.mkdir(parents=True, exist_ok=True)
    for s in report.samples:
        write_curve_csv(s.curve, args.out / f"{s.name}.csv")
    write_curve_csv(report.curve, args.out / "mean.csv")
    print(f"wrote {len(report.samples)} per-sample curves and mean.csv to {args.out}")
    return EXIT_OK


def cmd_superpoints(args) -> int:
    cloud = load_ply(args.inp)
    if args.model is None:
        feats = build_input_features(cloud).values
        part = partition(cloud.positions, feats, args.k, args.gamma, args.seed)
        sp_of_point = part.sp_id_of_point
    else:
        params, mcfg = load_checkpoint(args.model)
        prep = prepare(cloud, mcfg)
        with ad.no_grad():
            feats = extract_features(prep.inputs, params).data
        part = partition(prep.reduced.positions, feats, args.k, args.gamma, args.seed)
        sp_of_point = part.sp_id_of_point[prep.grid.voxel_of_point]
    colors = random_colors(part.m, args.seed)[sp_of_point]
    save_ply(cloud, args.out, color_override=colors, binary=not args.ascii)
    print(f"{part.m} superpoints over {cloud.n} points")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradcheck import format_summary, run_suite

    outcomes = run_suite()
    print(format_summary(outcomes))
    return EXIT_OK if all(o.passed for o in outcomes) else EXIT_NUMERIC


def cmd_ablation(args) -> int:
    cfg = _train_config(args.config)
    train_set, test_set = _load_labelled(args.train), _load_labelled(args.test)
    args.out.mkdir(parents=True, exist_ok=True)
    res = ablation_harness(train_set, test_set, cfg, seeds=args.seeds, out_csv=args.out / "ablation.csv")
    for (variant, seed), (run_res, _) in res.runs.items():
        save_checkpoint(args.out / f"{variant.replace('+', 'p')}_seed{seed}", run_res.params, run_res.model_config)
    for row in res.rows:
        print(f"{row['variant']:<12} iou {row['iou']:.4f} mae {row['mae']:.4f}")
    return EXIT_OK


def cmd_density(args) -> int:
    if any(not 0 < f <= 1 for f in args.factors):
        raise UsageError("--factors must lie in (0, 1]")
    params, mcfg = load_checkpoint(args.model)
    data = _load_labelled(args.data)
    rows = density_harness(params, mcfg, data, args.factors, args.seed, out_csv=args.out)
    for r in rows:
        print(f"fraction {r['fraction']:g}: mae {r['mae']:.4f}")
    return EXIT_OK


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "segment": cmd_segment,
    "eval": cmd_eval,
    "curves": cmd_curves,
    "superpoints": cmd_superpoints,
    "gradcheck": cmd_gradcheck,
    "ablation": cmd_ablation,
    "density": cmd_density,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"geosod: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except TrainingDiverged as exc:
        print(f"geosod: training diverged: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except FloatingPointError as exc:
        print(f"geosod: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, PlyError, OSError, ValueError) as exc:
        print(f"geosod: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
