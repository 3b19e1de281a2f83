"""Command line interface: train / eval / compare / sweep / inspect.

Runs are configured by a flat JSON document whose keys mirror
``TrainConfig`` fields one to one; command-line flags mirror the same
keys and override file values.  Unknown config keys are rejected.  Every
subcommand is read-only except for its own output directory and exits
nonzero unless all requested artifacts were written.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from dataclasses import fields
from pathlib import Path

from .checkpoint import load_checkpoint, load_into_graph
from .data import SplitSpec, split, standardize
from .graph import build_preset, count_params, peak_activation_estimate
from .optim import LEARNING_RATE_GRID, WEIGHT_DECAY_GRID
from .trainer import TrainConfig, evaluate, load_datasets, run_experiment

_CONFIG_FIELDS = {f.name for f in fields(TrainConfig)}


def _parse_ints(text):
    return tuple(int(v) for v in str(text).split(",") if v != "")


def _parse_floats(text):
    return tuple(float(v) for v in str(text).split(",") if v != "")


def _add_train_flags(p):
    p.add_argument("--config", help="JSON config file with TrainConfig keys")
    p.add_argument("--mode", choices=("sff", "cwc", "bp"))
    p.add_argument("--preset", choices=("cnn", "cnnb", "tiny-resnet"))
    p.add_argument("--dataset-format", choices=("idx", "cifar"))
    p.add_argument("--data-dir")
    p.add_argument("--subsample", type=int)
    p.add_argument("--seed", dest="seeds", type=_parse_ints,
                   help="seed or comma-separated seeds, e.g. 0,1,2")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--lr-classifier", type=float)
    p.add_argument("--weight-decay", type=float)
    p.add_argument("--head-kernel", type=int)
    p.add_argument("--dropout-rate", type=float)
    p.add_argument("--widths", type=_parse_ints)
    p.add_argument("--plateau-patience", type=int)
    p.add_argument("--early-stop-patience", type=int)
    p.add_argument("--checkpoint-in")
    p.add_argument("--checkpoint-out")
    p.add_argument("--out-dir")
    p.add_argument("--deterministic", action=argparse.BooleanOptionalAction,
                   default=None)
    p.add_argument("--account-memory", action=argparse.BooleanOptionalAction,
                   default=None)
    p.add_argument("--ensemble-exclude-first", action=argparse.BooleanOptionalAction,
                   default=None)


def build_config(args) -> TrainConfig:
    values = {}
    if getattr(args, "config", None):
        with open(args.config) as f:
            loaded = json.load(f)
        unknown = set(loaded) - _CONFIG_FIELDS
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        values.update(loaded)
    for name in _CONFIG_FIELDS:
        flag_val = getattr(args, name, None)
        if flag_val is not None:
            values[name] = flag_val
    if "seeds" in values:
        values["seeds"] = tuple(int(s) for s in values["seeds"])
    if values.get("widths") is not None:
        values["widths"] = tuple(int(w) for w in values["widths"])
    return TrainConfig(**values).validate()


def cmd_train(args) -> int:
    config = build_config(args)
    result = run_experiment(config)
    s = result.summary
    print(f"mode={s['mode']} preset={s['preset']} "
          f"val={s['val_accuracy_mean']:.4f}±{s['val_accuracy_std']:.4f}"
          + (f" test={s['test_accuracy_mean']:.4f}±{s['test_accuracy_std']:.4f}"
             if s["test_accuracy_mean"] is not None else ""))
    print(f"artifacts written under {config.out_dir}")
    return 0


def cmd_eval(args) -> int:
    if not args.checkpoint_in:
        raise ValueError("eval requires --checkpoint-in")
    descriptor, tensors = load_checkpoint(args.checkpoint_in)
    config = build_config(args)
    config.mode = descriptor["mode"]
    config.preset = descriptor["preset"]
    train_full, test_full = load_datasets(config)
    seed = int(descriptor["seed"])
    train_ds, val_ds = split(train_full, SplitSpec(seed=seed))
    if test_full is not None:
        train_ds, val_ds, target = standardize(train_ds, val_ds, test_full)
        target_name = "test"
    else:
        train_ds, target = standardize(train_ds, val_ds)
        target_name = "val"
    graph = build_preset(descriptor["preset"], descriptor["num_classes"],
                         tuple(descriptor["input_shape"]), descriptor["mode"],
                         seed=seed, widths=tuple(descriptor["widths"]),
                         head_kernel=descriptor["head_kernel"])
    load_into_graph(graph, descriptor, tensors)
    result = evaluate(graph, target, config.batch_size)
    print(f"{target_name} accuracy: {result.accuracy:.4f}")
    for k, acc in enumerate(result.per_block_accuracy):
        print(f"  block {k} accuracy: {acc:.4f}")
    if args.out_dir:
        out = Path(args.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "eval.json", "w") as f:
            json.dump({"split": target_name, "accuracy": result.accuracy,
                       "per_block_accuracy": result.per_block_accuracy},
                      f, indent=2, sort_keys=True)
            f.write("\n")
    return 0


def _load_summary(run_dir):
    path = Path(run_dir) / "summary.json"
    if not path.exists():
        raise FileNotFoundError(f"no summary.json under {run_dir}")
    with open(path) as f:
        return json.load(f)


def cmd_compare(args) -> int:
    summaries = [(d, _load_summary(d)) for d in args.run_dirs]
    baseline = next((s for _, s in summaries if s["mode"] == "bp"),
                    summaries[0][1])
    base_seconds = baseline["wall_seconds_total"]
    header = ("run", "mode", "preset", "accuracy", "std", "time_ratio", "peak_bytes")
    table = []
    for d, s in summaries:
        acc = s["test_accuracy_mean"] if s["test_accuracy_mean"] is not None \
            else s["val_accuracy_mean"]
        std = s["test_accuracy_std"] if s["test_accuracy_mean"] is not None \
            else s["val_accuracy_std"]
        ratio = (s["wall_seconds_total"] / base_seconds) if base_seconds else 1.0
        peaks = [p["peak_bytes"] for p in s["per_seed"] if p["peak_bytes"]]
        table.append([Path(d).name, s["mode"], s["preset"],
                      f"{acc:.4f}", f"{std:.4f}", f"{ratio:.3f}",
                      str(max(peaks)) if peaks else ""])
    widths = [max(len(str(r[i])) for r in [list(header)] + table)
              for i in range(len(header))]
    for row in [list(header)] + table:
        print("  ".join(str(c).ljust(w) for c, w in zip(row, widths)))
    out = Path(args.out_dir or ".")
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "compare.csv", "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(header)
        writer.writerows(table)
    return 0


def cmd_sweep(args) -> int:
    lr_grid = args.lr_grid or LEARNING_RATE_GRID
    decay_grid = args.decay_grid or WEIGHT_DECAY_GRID
    base = build_config(args)
    out_root = Path(base.out_dir)
    out_root.mkdir(parents=True, exist_ok=True)
    datasets = load_datasets(base)
    results = []
    for lr in lr_grid:
        for wd in decay_grid:
            cfg = TrainConfig(**{**_as_dict(base),
                                 "lr": lr, "lr_classifier": lr, "weight_decay": wd,
                                 "out_dir": str(out_root / f"lr{lr:g}_wd{wd:g}")})
            summary = run_experiment(cfg, datasets=datasets).summary
            results.append((lr, wd, summary["val_accuracy_mean"], cfg.out_dir))
            print(f"lr={lr:g} wd={wd:g} val={summary['val_accuracy_mean']:.4f}")
    results.sort(key=lambda r: -r[2])
    with open(out_root / "sweep.csv", "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(("lr", "weight_decay", "val_accuracy_mean", "run_dir"))
        writer.writerows(results)
    best = results[0]
    print(f"best: lr={best[0]:g} wd={best[1]:g} val={best[2]:.4f} ({best[3]})")
    return 0


def _as_dict(config: TrainConfig):
    from dataclasses import asdict
    return asdict(config)


def cmd_inspect(args) -> int:
    descriptor, tensors = load_checkpoint(args.checkpoint_in)
    print(json.dumps({k: v for k, v in descriptor.items() if k != "tensors"},
                     indent=2, sort_keys=True))
    per_block = {}
    for name, arr in tensors.items():
        if ".running_" in name:
            continue
        per_block.setdefault(name.split(".")[0], 0)
        per_block[name.split(".")[0]] += arr.size
    for block_name in sorted(per_block):
        print(f"{block_name}: {per_block[block_name]} parameters")
    total = sum(per_block.values())
    print(f"total: {total} parameters")
    graph = build_preset(descriptor["preset"], descriptor["num_classes"],
                         tuple(descriptor["input_shape"]), descriptor["mode"],
                         seed=int(descriptor["seed"]),
                         widths=tuple(descriptor["widths"]),
                         head_kernel=descriptor["head_kernel"])
    rebuilt = count_params(graph)
    if rebuilt != total:
        raise ValueError(f"descriptor parameter count {total} does not match "
                         f"rebuilt graph count {rebuilt}")
    batch = args.batch_size or 128
    est = peak_activation_estimate(graph, batch)
    print(f"analytic peak live-tensor estimate at batch {batch}: "
          f"{est} bytes ({est / 2**20:.1f} MiB)")
    return 0


def make_parser():
    parser = argparse.ArgumentParser(
        prog="blockff",
        description="Block-local training of convolutional networks "
                    "(goodness-head or channel-partition objectives) "
                    "with a backpropagation baseline.")
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="run a training experiment")
    _add_train_flags(p_train)
    p_train.set_defaults(fn=cmd_train)

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    _add_train_flags(p_eval)
    p_eval.set_defaults(fn=cmd_eval)

    p_cmp = sub.add_parser("compare", help="tabulate two or more finished runs")
    p_cmp.add_argument("run_dirs", nargs="+", help="run output directories")
    p_cmp.add_argument("--out-dir")
    p_cmp.set_defaults(fn=cmd_compare)

    p_sweep = sub.add_parser("sweep", help="grid search over lr and weight decay")
    _add_train_flags(p_sweep)
    p_sweep.add_argument("--lr-grid", type=_parse_floats)
    p_sweep.add_argument("--decay-grid", type=_parse_floats)
    p_sweep.set_defaults(fn=cmd_sweep)

    p_ins = sub.add_parser("inspect", help="describe a checkpoint file")
    p_ins.add_argument("checkpoint_in", metavar="checkpoint")
    p_ins.add_argument("--batch-size", type=int)
    p_ins.set_defaults(fn=cmd_inspect)
    return parser


def main(argv=None) -> int:
    parser = make_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except Exception as exc:  # CLI boundary: report, don't traceback
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
