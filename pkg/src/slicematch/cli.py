"""Command-line interface.

Subcommands: ``phantom gen``, ``register``, ``eval``, ``gradcheck``,
``train-demo``, ``export-dist``. Exit status is 0 on success, 1 on a
validation failure (bad arguments, bad config, failed check), 2 on a runtime
failure.
"""

from __future__ import annotations

import argparse
import csv
import os
import sys

from .geometry import load_pose, pose_error, save_pose
from .harness.config import DatasetConfig, load_config
from .harness.dataset import generate_dataset, load_dataset
from .harness.gradcheck import STAGES, run_gradcheck
from .harness.pipeline import METHODS, match_and_solve, run_case
from .harness.stats import (aggregate, export_distribution, read_records,
                            write_records, write_summary)
from .harness.train import toy_train
from .mi import center_align_pose, mi_refine
from .volume import load_frame, load_volume

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_RUNTIME = 2


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="slicematch",
        description="Slice-to-volume rigid registration toolbox",
    )
    parser.add_argument("--seed", type=int, default=0, help="global seed")
    parser.add_argument("--config", default=None, help="JSON config file")
    sub = parser.add_subparsers(dest="command", required=True)

    phantom = sub.add_parser("phantom", help="synthetic data generation")
    phantom_sub = phantom.add_subparsers(dest="phantom_command", required=True)
    gen = phantom_sub.add_parser("gen", help="generate a synthetic dataset")
    gen.add_argument("--out", required=True, help="output dataset directory")
    gen.add_argument("--n-cases", type=int, default=10)
    gen.add_argument("--max-rotation-deg", type=float, default=None)
    gen.add_argument("--min-rotation-deg", type=float, default=None)
    gen.add_argument("--max-translation-mm", type=float, default=None)
    gen.add_argument("--no-degrade", action="store_true")

    reg = sub.add_parser("register", help="register one frame to one volume")
    reg.add_argument("--volume", required=True)
    reg.add_argument("--frame", required=True)
    reg.add_argument("--method", required=True, choices=METHODS)
    reg.add_argument("--gt", default=None,
                     help="ground-truth pose JSON (required in oracle mode; "
                          "enables error reporting otherwise)")
    reg.add_argument("--out-pose", required=True)

    ev = sub.add_parser("eval", help="run methods over a dataset and aggregate")
    ev.add_argument("--dataset", required=True)
    ev.add_argument("--out", required=True)
    ev.add_argument("--methods", nargs="*", default=None, choices=METHODS)

    gc = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    gc.add_argument("--instances", type=int, default=50)
    gc.add_argument("--tolerance", type=float, default=1e-3)
    gc.add_argument("--out", default=None, help="optional JSON report path")

    tr = sub.add_parser("train-demo", help="toy projection training on pose loss")
    tr.add_argument("--iterations", type=int, default=200)
    tr.add_argument("--learning-rate", type=float, default=1e-2)
    tr.add_argument("--out", default=None, help="optional loss-curve CSV path")

    ex = sub.add_parser("export-dist", help="error-distribution export from records")
    ex.add_argument("--records", required=True, help="records.csv from eval")
    ex.add_argument("--out", required=True)
    return parser


def _cmd_phantom_gen(args, cfg) -> int:
    base = cfg.dataset
    updates = {}
    if args.max_rotation_deg is not None:
        updates["max_rotation_deg"] = args.max_rotation_deg
    if args.min_rotation_deg is not None:
        updates["min_rotation_deg"] = args.min_rotation_deg
    if args.max_translation_mm is not None:
        updates["max_translation_mm"] = args.max_translation_mm
    if args.no_degrade:
        updates["degrade"] = False
    import dataclasses
    dcfg = dataclasses.replace(base, **updates) if updates else base
    ds = generate_dataset(args.out, args.seed, args.n_cases, dcfg)
    print(f"wrote {len(ds)} cases to {args.out}")
    return EXIT_OK


def _cmd_register(args, cfg) -> int:
    vol = load_volume(args.volume)
    frame = load_frame(args.frame)
    gt = load_pose(args.gt) if args.gt else None
    if args.method == "baseline-mi":
        pose = mi_refine(vol, frame, center_align_pose(vol, frame), cfg.mi).pose
    else:
        pose, n = match_and_solve(vol, frame, args.method, cfg, gt=gt,
                                  seed=args.seed)
        print(f"{n} matches")
        if args.method == "loftr-dwp+mi":
            pose = mi_refine(vol, frame, pose, cfg.mi).pose
    save_pose(pose, args.out_pose)
    if gt is not None:
        err = pose_error(pose, gt)
        print(f"rotation error {err.rotation_deg:.3f} deg, "
              f"translation error {err.translation_mm:.3f} mm")
    print(f"pose written to {args.out_pose}")
    return EXIT_OK


def _cmd_eval(args, cfg) -> int:
    ds = load_dataset(args.dataset)
    methods = tuple(args.methods) if args.methods else cfg.eval.methods
    records = []
    for method in methods:
        for case in ds.cases:
            rec = run_case(case, method, cfg, seed=args.seed)
            records.append(rec)
            status = "FAILED" if rec.failed else "ok"
            print(f"{rec.case_id} {method}: {rec.rotation_deg:.2f} deg "
                  f"{rec.translation_mm:.2f} mm [{status}]")
    os.makedirs(args.out, exist_ok=True)
    write_records(records, os.path.join(args.out, "records.csv"))
    write_summary(aggregate(records), args.out)
    print(f"summary written to {args.out}")
    return EXIT_OK


def _cmd_gradcheck(args) -> int:
    report = run_gradcheck(args.seed, args.instances, args.tolerance)
    for stage in STAGES:
        print(f"{stage}: max relative error {report.stages[stage]:.3e}")
    print(f"zero-gradient at optimum: {report.zero_at_optimum:.3e}")
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(report.to_json())
    print("PASS" if report.passed else "FAIL")
    return EXIT_OK if report.passed else EXIT_VALIDATION


def _cmd_train_demo(args) -> int:
    result = toy_train(seed=args.seed, iterations=args.iterations,
                       learning_rate=args.learning_rate)
    if args.out:
        with open(args.out, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["iteration", "loss"])
            for i, loss in enumerate(result.losses):
                writer.writerow([i, repr(float(loss))])
    print(f"initial loss {result.initial_loss:.6f}, "
          f"final loss {result.final_loss:.6f}")
    return EXIT_OK


def _cmd_export_dist(args) -> int:
    records = read_records(args.records)
    export_distribution(records, args.out)
    print(f"distribution data written to {args.out}")
    return EXIT_OK


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_VALIDATION if exc.code not in (0, None) else EXIT_OK
    try:
        cfg = load_config(args.config)
        if args.command == "phantom":
            return _cmd_phantom_gen(args, cfg)
        if args.command == "register":
            return _cmd_register(args, cfg)
        if args.command == "eval":
            return _cmd_eval(args, cfg)
        if args.command == "gradcheck":
            return _cmd_gradcheck(args)
        if args.command == "train-demo":
            return _cmd_train_demo(args)
        if args.command == "export-dist":
            return _cmd_export_dist(args)
        return EXIT_VALIDATION
    except (ValueError, FileNotFoundError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except Exception as exc:  # pragma: no cover - defensive
        print(f"runtime failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
