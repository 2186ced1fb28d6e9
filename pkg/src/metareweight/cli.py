"""Command line interface: train, verify, corrupt, report.

Exit codes: 0 success, 1 verification/acceptance failure, 2 configuration
or input-format error.
"""

import argparse
import csv
import json
import os
import sys

import numpy as np

from .checks import run_checks
from .config import build_experiment, parse_config_file
from .data import NoiseSpec, corrupt, load_idx, write_idx_labels
from .errors import ConfigError, IdxParseError
from .experiment import run_experiment


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="metareweight",
        description="Train with online example reweighting, verify the math, "
        "corrupt labels, and aggregate run outputs.",
    )
    sub = parser.add_subparsers(dest="cmd", required=True)

    p_train = sub.add_parser("train", help="run an experiment from a key=value config file")
    p_train.add_argument("--config", required=True, help="path to the config file")
    p_train.add_argument("--out", help="override output_dir from the config")
    p_train.add_argument("--seed", type=int, help="override the base seed")

    p_verify = sub.add_parser("verify", help="run the oracle-backed property suite")
    p_verify.add_argument("--level", choices=("quick", "full"), default="quick")
    p_verify.add_argument("--data-dir", help="directory holding the MNIST IDX files")
    p_verify.add_argument("--out", help="directory for emitted trace/rate CSVs")

    p_corrupt = sub.add_parser("corrupt", help="write a corrupted copy of an IDX label file")
    p_corrupt.add_argument("--images", required=True)
    p_corrupt.add_argument("--labels", required=True)
    p_corrupt.add_argument("--out", required=True, help="path for the corrupted labels IDX file")
    p_corrupt.add_argument("--kind", required=True, choices=("uniform_flip", "background_flip"))
    p_corrupt.add_argument("--ratio", required=True, type=float)
    p_corrupt.add_argument("--num-classes", type=int, default=10)
    p_corrupt.add_argument("--background-class", type=int, default=0)
    p_corrupt.add_argument("--seed", type=int, default=0)

    p_report = sub.add_parser("report", help="aggregate run directories into plot-ready CSVs")
    p_report.add_argument("--dir", required=True, help="directory containing run outputs")
    return parser


def cmd_train(args) -> int:
    values = parse_config_file(args.config)
    if args.seed is not None:
        values["seed"] = args.seed
    if args.out:
        values["output_dir"] = args.out
    exp = build_experiment(values)

    def progress(seed, result):
        print(
            f"seed {seed}: test error {result.final_test_error:.4f} "
            f"({result.wall_time:.1f}s)",
            flush=True,
        )

    summary = run_experiment(exp, progress=progress)
    print(
        f"{summary['strategy']}: mean test error {summary['mean_test_error']:.4f} "
        f"+- {summary['ci_half_width']:.4f} over {len(summary['seeds'])} seed(s)"
    )
    print(f"outputs written to {exp.output_dir}")
    return 0


def cmd_verify(args) -> int:
    return run_checks(level=args.level, data_dir=args.data_dir, out_dir=args.out)


def cmd_corrupt(args) -> int:
    spec = NoiseSpec(
        kind=args.kind,
        ratio=args.ratio,
        num_classes=args.num_classes,
        background_class=args.background_class,
    )
    ds = load_idx(args.images, args.labels)
    rng = np.random.default_rng(args.seed)
    corrupted = corrupt(ds, spec, rng)
    write_idx_labels(corrupted.labels, args.out)
    sidecar = args.out + ".provenance.csv"
    changed = np.flatnonzero(corrupted.flipped_mask)
    with open(sidecar, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["index", "original_label", "new_label"])
        for i in changed:
            writer.writerow([int(i), int(corrupted.original_labels[i]), int(corrupted.labels[i])])
    print(f"flipped {changed.size} of {len(ds)} labels; wrote {args.out} and {sidecar}")
    return 0


def _read_csv(path: str) -> list[dict]:
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


def cmd_report(args) -> int:
    summaries = []
    for root, _dirs, files in os.walk(args.dir):
        if "summary.json" in files:
            with open(os.path.join(root, "summary.json")) as f:
                summaries.append((root, json.load(f)))
    if not summaries:
        raise ConfigError(f"no summary.json found under {args.dir}")
    summaries.sort(key=lambda item: (item[1]["strategy"], item[1]["config_hash"], item[0]))

    final_path = os.path.join(args.dir, "report_final.csv")
    with open(final_path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(
            [
                "config_hash",
                "strategy",
                "imbalance_ratio",
                "noise_kind",
                "noise_ratio",
                "num_seeds",
                "mean_test_error",
                "ci_half_width",
            ]
        )
        for _root, s in summaries:
            cfg = s.get("config", {})
            writer.writerow(
                [
                    s["config_hash"],
                    s["strategy"],
                    cfg.get("imbalance_ratio", ""),
                    cfg.get("noise_kind", ""),
                    cfg.get("noise_ratio", ""),
                    len(s["seeds"]),
                    repr(s["mean_test_error"]),
                    repr(s["ci_half_width"]),
                ]
            )

    curves_path = os.path.join(args.dir, "report_curves.csv")
    with open(curves_path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(
            ["config_hash", "strategy", "step", "mean_test_error", "mean_train_loss", "mean_val_loss_G"]
        )
        for root, s in summaries:
            by_step: dict[int, list[tuple[float, float, float]]] = {}
            for seed in s["seeds"]:
                path = os.path.join(root, f"metrics_seed{seed}.csv")
                if not os.path.isfile(path):
                    continue
                for row in _read_csv(path):
                    by_step.setdefault(int(row["step"]), []).append(
                        (
                            float(row["test_error"]),
                            float(row["train_loss"]),
                            float(row["val_loss_G"]),
                        )
                    )
            for step in sorted(by_step):
                cols = np.array(by_step[step])
                writer.writerow(
                    [
                        s["config_hash"],
                        s["strategy"],
                        step,
                        repr(float(cols[:, 0].mean())),
                        repr(float(cols[:, 1].mean())),
                        repr(float(cols[:, 2].mean())),
                    ]
                )

    hist_path = os.path.join(args.dir, "report_weight_hist.csv")
    bins = 50
    with open(hist_path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(
            ["config_hash", "strategy", "bin_lo", "bin_hi", "clean_count", "flipped_count"]
        )
        for root, s in summaries:
            weights = []
            flipped = []
            for seed in s["seeds"]:
                path = os.path.join(root, f"weights_seed{seed}.csv")
                if not os.path.isfile(path):
                    continue
                for row in _read_csv(path):
                    weights.append(float(row["weight"]))
                    flipped.append(row["flipped"] == "1")
            if not weights:
                continue
            w = np.array(weights)
            fl = np.array(flipped)
            hi = max(float(w.max()), 1e-12)
            edges = np.linspace(0.0, hi, bins + 1)
            clean_hist, _ = np.histogram(w[~fl], bins=edges)
            flip_hist, _ = np.histogram(w[fl], bins=edges)
            for b in range(bins):
                writer.writerow(
                    [
                        s["config_hash"],
                        s["strategy"],
                        repr(float(edges[b])),
                        repr(float(edges[b + 1])),
                        int(clean_hist[b]),
                        int(flip_hist[b]),
                    ]
                )

    print(f"wrote {final_path}, {curves_path}, {hist_path}")
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    handlers = {
        "train": cmd_train,
        "verify": cmd_verify,
        "corrupt": cmd_corrupt,
        "report": cmd_report,
    }
    try:
        return handlers[args.cmd](args)
    except (ConfigError, IdxParseError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
