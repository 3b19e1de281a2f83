"""Training orchestration: minibatch procedures, evaluation, experiments.

The local-mode procedure per minibatch runs blocks strictly in order:
forward the block, compute its goodness and local loss, backpropagate
inside the block only, step that block's optimizer, then hand the
layer-normalized output to the next block as a constant.  The backprop
baseline runs one linked forward/backward over the whole chain with a
single optimizer family (one rate for feature layers, one for the
classifier).

``run_experiment`` drives the full protocol: 80/20 train/validation
split per seed, optional subsampling, per-epoch validation, per-block
reduce-on-plateau on validation loss, early stopping on validation
accuracy, best-checkpoint retention, metrics CSV + summary JSON, and
optional live-tensor memory accounting.  With ``deterministic`` set
(the default), wall-clock fields are written as zero so repeated runs
produce byte-identical artifacts.
"""

from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .checkpoint import load_checkpoint, load_into_graph, save_checkpoint
from .data import Dataset, SplitSpec, batches, load_cifar_binary, load_idx, split, standardize, subsample
from .goodness import (goodness_cwc, goodness_cwc_backward, goodness_sff,
                       goodness_sff_backward, split_pos_neg)
from .graph import MODES, PRESETS, build_preset, forward_blockwise, peak_activation_estimate
from .losses import cross_entropy, loss_cwc, loss_sff
from .memory import MemoryMeter
from .optim import AdamW, EarlyStop, PlateauScheduler
from .tensor import make_rng

logger = logging.getLogger(__name__)

CSV_HEADER = ("epoch", "block", "split", "loss", "lr", "acc_ensemble",
              "acc_block", "seconds", "peak_bytes")


class TrainingAbort(RuntimeError):
    """A layer or loss error inside one block aborted the minibatch."""

    def __init__(self, block_index, cause):
        super().__init__(f"training aborted in block {block_index}: {cause}")
        self.block_index = block_index


@dataclass
class TrainConfig:
    mode: str = "sff"
    preset: str = "cnnb"
    epochs: int = 100
    batch_size: int = 128
    seeds: tuple = (0,)
    lr: float = 3e-4
    lr_classifier: float = 3e-4
    weight_decay: float = 1e-6
    head_kernel: int = 1
    dropout_rate: float = 0.5
    plateau_patience: int = 10
    plateau_factor: float = 0.1
    early_stop_patience: int = 30
    dataset_format: str | None = None
    data_dir: str | None = None
    subsample: int | None = None
    checkpoint_in: str | None = None
    checkpoint_out: str | None = None
    out_dir: str = "runs/run"
    deterministic: bool = True
    account_memory: bool = False
    widths: tuple | None = None
    goodness_squared: bool = True
    ensemble_exclude_first: bool = False

    def validate(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.preset not in PRESETS:
            raise ValueError(f"preset must be one of {PRESETS}, got {self.preset!r}")
        if not 1 <= self.epochs <= 100:
            raise ValueError("epochs must be in [1, 100]")
        if self.batch_size < 1:
            raise ValueError("batch size must be >= 1")
        if not self.seeds:
            raise ValueError("at least one seed required")
        if self.lr <= 0 or self.lr_classifier <= 0:
            raise ValueError("learning rates must be positive")
        if self.weight_decay < 0:
            raise ValueError("weight decay must be >= 0")
        if self.head_kernel < 1 or self.head_kernel % 2 == 0:
            raise ValueError("head kernel must be a positive odd integer")
        if self.subsample is not None and self.subsample < 1:
            raise ValueError("subsample size must be >= 1")
        if self.dataset_format not in (None, "idx", "cifar"):
            raise ValueError("dataset format must be 'idx' or 'cifar'")
        return self


@dataclass
class EvalResult:
    accuracy: float                       # ensemble accuracy, or head accuracy in bp mode
    per_block_accuracy: list = field(default_factory=list)
    per_block_loss: list = field(default_factory=list)


@dataclass
class BlockTrainState:
    optimizer: AdamW
    scheduler: PlateauScheduler | None = None


@dataclass
class SeedResult:
    seed: int
    val_accuracy: float
    test_accuracy: float | None
    epochs_ran: int
    stopped_early: bool
    wall_seconds: float
    peak_bytes: int | None
    analytic_peak_bytes: int | None
    metrics_path: str
    checkpoint_path: str
    final_lrs: list


@dataclass
class ExperimentResult:
    config: TrainConfig
    seed_results: list
    summary: dict


def build_graph(config: TrainConfig, num_classes, input_shape, seed):
    kwargs = dict(head_kernel=config.head_kernel, dropout_rate=config.dropout_rate,
                  goodness_squared=config.goodness_squared)
    if config.widths is not None:
        kwargs["widths"] = tuple(config.widths)
    return build_preset(config.preset, num_classes, tuple(input_shape),
                        config.mode, seed=seed, **kwargs)


def make_states(graph, config: TrainConfig):
    """Per-block optimizers and schedulers for the graph's mode."""
    states = {}
    if graph.mode == "bp":
        optimizers = []
        for bi, block in enumerate(graph.blocks):
            if not block.trainable:
                continue
            lr = config.lr_classifier if block.is_classifier else config.lr
            opt = AdamW(block.param_items(), lr=lr, weight_decay=config.weight_decay)
            states[bi] = BlockTrainState(opt)
            optimizers.append(opt)
        shared = PlateauScheduler(optimizers, patience=config.plateau_patience,
                                  factor=config.plateau_factor)
        for state in states.values():
            state.scheduler = shared
        return states
    for bi, block in enumerate(graph.blocks):
        if not block.trainable or block.is_classifier:
            continue
        params = dict(block.param_items())
        if block.head is not None:
            for name, arr in block.head.params().items():
                params[f"head.{name}"] = arr
        opt = AdamW(params, lr=config.lr, weight_decay=config.weight_decay)
        states[bi] = BlockTrainState(
            opt, PlateauScheduler([opt], patience=config.plateau_patience,
                                  factor=config.plateau_factor))
    return states


def train_minibatch_sff(graph, x, labels, states, rng, meter=None):
    """One local-mode step with head-route goodness; per-block losses."""
    return _train_minibatch_local(graph, x, labels, states, rng, meter, use_head=True)


def train_minibatch_cwc(graph, x, labels, states, rng, meter=None):
    """One local-mode step with partition-route goodness; per-block losses."""
    return _train_minibatch_local(graph, x, labels, states, rng, meter, use_head=False)


def _train_minibatch_local(graph, x, labels, states, rng, meter, use_head):
    losses = []
    for bi, block in enumerate(graph.blocks):
        try:
            if not block.trainable or block.is_classifier:
                x, _ = block.forward(x, train=True, rng=rng)
                continue
            y, caches = block.forward(x, train=True, rng=rng)
            if meter:
                meter.add_cache(caches)
            if use_head:
                g, gcache = goodness_sff(y, block.head,
                                         square=graph.goodness_squared, block_index=bi)
            else:
                g, gcache = goodness_cwc(y, graph.num_classes, block_index=bi)
            if meter:
                meter.add_cache(gcache)
            lv, dg = (loss_sff if use_head else loss_cwc)(g, labels)
            if logger.isEnabledFor(logging.DEBUG):
                g_pos, g_neg = split_pos_neg(g, labels)
                logger.debug("block %d: loss %.4f, goodness pos %.4f / neg %.4f",
                             bi, lv.scalar, g_pos.mean(), g_neg.mean())
            if use_head:
                dy, head_grads = goodness_sff_backward(gcache, dg)
            else:
                dy, head_grads = goodness_cwc_backward(gcache, dg), {}
            _, grads = block.backward(caches, dy)
            for name, val in head_grads.items():
                grads[f"head.{name}"] = val
            states[bi].optimizer.step(grads)
            x = block.post_norm.forward(y, train=False)[0]
            if meter:
                meter.discard_cache(caches)
                meter.discard_cache(gcache)
            losses.append(lv.scalar)
        except TrainingAbort:
            raise
        except Exception as exc:
            raise TrainingAbort(bi, exc) from exc
    return losses


def train_minibatch_bp(graph, x, labels, states, rng, meter=None):
    """One end-to-end backprop step; returns the global loss."""
    all_caches = []
    h = x
    for bi, block in enumerate(graph.blocks):
        try:
            h, caches = block.forward(h, train=True, rng=rng)
        except Exception as exc:
            raise TrainingAbort(bi, exc) from exc
        all_caches.append(caches)
        if meter:
            meter.add_cache(caches)
    lv, dy = cross_entropy(h, labels)
    for bi in reversed(range(len(graph.blocks))):
        try:
            dy, grads = graph.blocks[bi].backward(all_caches[bi], dy)
            if bi in states:
                states[bi].optimizer.step(grads)
        except TrainingAbort:
            raise
        except Exception as exc:
            raise TrainingAbort(bi, exc) from exc
        if meter:
            meter.discard_cache(all_caches[bi])
    return lv.scalar


def evaluate(graph, ds: Dataset, batch_size=256, exclude_first=False) -> EvalResult:
    """Eval-mode accuracy: goodness-ensemble argmax (local modes) or logits.

    Also reports every block's own argmax accuracy and mean local loss
    (the global cross-entropy in bp mode); neither is asserted to beat
    the ensemble, both are observability.
    """
    n = len(ds)
    if graph.mode == "bp":
        correct, loss_sum = 0, 0.0
        for x, labels in batches(ds, batch_size):
            logits = forward_blockwise(graph, x, train=False)[-1][0]
            lv, _ = cross_entropy(logits, labels)
            loss_sum += lv.per_sample.sum()
            correct += int((logits.argmax(axis=1) == labels).sum())
        return EvalResult(correct / n, [], [loss_sum / n])
    num_blocks = len(graph.feature_blocks())
    block_correct = np.zeros(num_blocks, dtype=np.int64)
    block_loss = np.zeros(num_blocks)
    ensemble_correct = 0
    for x, labels in batches(ds, batch_size):
        results = forward_blockwise(graph, x, train=False)
        goodness = [g.values for _, g in results if g is not None]
        for k, g in enumerate(goodness):
            lv, _ = loss_sff(g, labels)
            block_loss[k] += lv.per_sample.sum()
            block_correct[k] += int((g.argmax(axis=1) == labels).sum())
        selected = goodness[1:] if exclude_first and len(goodness) > 1 else goodness
        mean_g = np.mean(selected, axis=0)
        ensemble_correct += int((mean_g.argmax(axis=1) == labels).sum())
    return EvalResult(ensemble_correct / n,
                      list(block_correct / n), list(block_loss / n))


MINIBATCH_FNS = {"sff": train_minibatch_sff, "cwc": train_minibatch_cwc,
                 "bp": train_minibatch_bp}


def load_datasets(config: TrainConfig):
    """(train, test_or_None) from config.data_dir per config.dataset_format."""
    if config.data_dir is None or config.dataset_format is None:
        raise ValueError("dataset format and data dir are required to load data")
    root = Path(config.data_dir)
    if not root.is_dir():
        raise FileNotFoundError(f"data dir not found: {root}")
    if config.dataset_format == "idx":
        train = load_idx(root / "train-images-idx3-ubyte",
                         root / "train-labels-idx1-ubyte", name=root.name)
        test = None
        if (root / "t10k-images-idx3-ubyte").exists():
            test = load_idx(root / "t10k-images-idx3-ubyte",
                            root / "t10k-labels-idx1-ubyte", name=f"{root.name}/test",
                            num_classes=train.num_classes)
        return train, test
    train_files = sorted(root.glob("data_batch_*.bin"))
    if not train_files:
        raise FileNotFoundError(f"no data_batch_*.bin files under {root}")
    train = load_cifar_binary([str(p) for p in train_files], name=root.name)
    test = None
    if (root / "test_batch.bin").exists():
        test = load_cifar_binary(str(root / "test_batch.bin"), name=f"{root.name}/test")
    return train, test


def _fmt(value, spec="{:.6f}"):
    return "" if value is None else (spec.format(value) if isinstance(value, float)
                                     else str(value))


def _snapshot(graph):
    return [arr.copy() for _, arr in graph.param_entries()]


def _restore(graph, snapshot):
    for (_, arr), saved in zip(graph.param_entries(), snapshot):
        arr[:] = saved


def run_experiment(config: TrainConfig, datasets=None) -> ExperimentResult:
    """Full multi-seed experiment; writes metrics, summary, checkpoints.

    ``datasets`` may inject a pre-built ``(train, test_or_None)`` pair;
    otherwise they are loaded from ``config.data_dir``.
    """
    config.validate()
    out_root = Path(config.out_dir)
    out_root.mkdir(parents=True, exist_ok=True)
    if datasets is None:
        datasets = load_datasets(config)
    train_full, test_full = datasets
    seed_results = [_run_seed(config, int(seed), train_full, test_full, out_root)
                    for seed in config.seeds]
    summary = _summarize(config, seed_results)
    with open(out_root / "summary.json", "w") as f:
        json.dump(summary, f, indent=2, sort_keys=True)
        f.write("\n")
    return ExperimentResult(config, seed_results, summary)


def finetune(config: TrainConfig, datasets=None) -> ExperimentResult:
    """Resume from a checkpoint (cross-mode allowed; heads re-initialized)."""
    if not config.checkpoint_in:
        raise ValueError("finetune requires checkpoint_in")
    return run_experiment(config, datasets=datasets)


def _run_seed(config, seed, train_full, test_full, out_root):
    t0 = time.perf_counter()
    seed_dir = out_root / f"seed{seed}"
    seed_dir.mkdir(parents=True, exist_ok=True)
    work = train_full
    if config.subsample is not None:
        work = subsample(work, config.subsample, seed)
    train_ds, val_ds = split(work, SplitSpec(seed=seed))
    if test_full is not None:
        train_ds, val_ds, test_ds = standardize(train_ds, val_ds, test_full)
    else:
        train_ds, val_ds = standardize(train_ds, val_ds)
        test_ds = None

    graph = build_graph(config, train_full.num_classes,
                        train_ds.images.shape[1:], seed)
    if config.checkpoint_in:
        descriptor, tensors = load_checkpoint(config.checkpoint_in)
        load_into_graph(graph, descriptor, tensors)
    states = make_states(graph, config)
    early = EarlyStop(config.early_stop_patience)
    train_rng = make_rng(seed, 100)
    meter = None
    if config.account_memory:
        meter = MemoryMeter()
        meter.add(*[arr for _, arr in graph.param_entries()])
    minibatch_fn = MINIBATCH_FNS[config.mode]
    feature_idx = [bi for bi, b in enumerate(graph.blocks)
                   if b.trainable and not b.is_classifier]
    skip_bn = graph.uses_batchnorm()

    rows = []
    best_acc, best_snapshot, best_epoch = -np.inf, None, 0
    epochs_ran, stopped_early = 0, False
    peak_bytes = None
    for epoch in range(1, config.epochs + 1):
        ep0 = time.perf_counter()
        if meter:
            meter.reset_peak()
        loss_sums = np.zeros(1 if config.mode == "bp" else len(feature_idx))
        sample_count = 0
        for x, labels in batches(train_ds, config.batch_size,
                                 shuffle_seed=(seed, 200, epoch)):
            if len(labels) == 1 and skip_bn:
                logger.warning("skipping final batch of size 1 "
                               "(batch norm needs >= 2 samples)")
                continue
            out = minibatch_fn(graph, x, labels, states, train_rng, meter)
            losses = out if isinstance(out, list) else [out]
            loss_sums[:len(losses)] += np.asarray(losses) * len(labels)
            sample_count += len(labels)
        train_losses = loss_sums / max(sample_count, 1)
        val = evaluate(graph, val_ds, config.batch_size,
                       exclude_first=config.ensemble_exclude_first)
        seconds = 0.0 if config.deterministic else time.perf_counter() - ep0
        epoch_peak = meter.peak if meter else None
        if meter:
            peak_bytes = max(peak_bytes or 0, meter.peak)
        rows.extend(_epoch_rows(config, graph, states, feature_idx, epoch,
                                train_losses, val, seconds, epoch_peak))
        if val.accuracy > best_acc:
            best_acc, best_snapshot, best_epoch = val.accuracy, _snapshot(graph), epoch
        _plateau_updates(config, graph, states, feature_idx, val)
        epochs_ran = epoch
        if early.update(val.accuracy):
            stopped_early = True
            break

    if best_snapshot is not None:
        _restore(graph, best_snapshot)
    test_acc = (evaluate(graph, test_ds, config.batch_size,
                         exclude_first=config.ensemble_exclude_first).accuracy
                if test_ds is not None else None)

    metrics_path = seed_dir / "metrics.csv"
    with open(metrics_path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(CSV_HEADER)
        writer.writerows(rows)
    ckpt_path = _checkpoint_path(config, seed, seed_dir)
    save_checkpoint(ckpt_path, graph)

    wall = 0.0 if config.deterministic else time.perf_counter() - t0
    analytic = peak_activation_estimate(graph, config.batch_size) \
        if config.account_memory else None
    final_lrs = [states[bi].optimizer.lr for bi in sorted(states)]
    logger.info("seed %d: best val %.4f (epoch %d), test %s, %d epochs",
                seed, best_acc, best_epoch,
                f"{test_acc:.4f}" if test_acc is not None else "n/a", epochs_ran)
    return SeedResult(seed, float(best_acc), test_acc, epochs_ran, stopped_early,
                      wall, peak_bytes, analytic, str(metrics_path), str(ckpt_path),
                      final_lrs)


def _checkpoint_path(config, seed, seed_dir):
    if config.checkpoint_out is None:
        return seed_dir / "checkpoint.ckpt"
    path = Path(config.checkpoint_out)
    if len(config.seeds) > 1:
        return path.with_name(f"{path.stem}_seed{seed}{path.suffix}")
    return path


def _epoch_rows(config, graph, states, feature_idx, epoch, train_losses,
                val, seconds, peak):
    rows = []
    peak_s = "" if peak is None else str(int(peak))
    if config.mode == "bp":
        lr = next(states[bi].optimizer.lr for bi in sorted(states)
                  if not graph.blocks[bi].is_classifier)
        rows.append([epoch, -1, "train", _fmt(float(train_losses[0])), _fmt(lr),
                     "", "", "", ""])
        rows.append([epoch, -1, "val", _fmt(float(val.per_block_loss[0])), _fmt(lr),
                     _fmt(val.accuracy), "", _fmt(seconds, "{:.3f}"), peak_s])
        return rows
    for k, bi in enumerate(feature_idx):
        lr = states[bi].optimizer.lr
        rows.append([epoch, bi, "train", _fmt(float(train_losses[k])), _fmt(lr),
                     "", "", "", ""])
    for k, bi in enumerate(feature_idx):
        lr = states[bi].optimizer.lr
        rows.append([epoch, bi, "val", _fmt(float(val.per_block_loss[k])), _fmt(lr),
                     _fmt(val.accuracy), _fmt(val.per_block_accuracy[k]),
                     _fmt(seconds, "{:.3f}"), peak_s])
    return rows


def _plateau_updates(config, graph, states, feature_idx, val):
    if config.mode == "bp":
        shared = next(iter(states.values())).scheduler
        shared.update(val.per_block_loss[0])
        return
    for k, bi in enumerate(feature_idx):
        states[bi].scheduler.update(val.per_block_loss[k])


def aggregate(values):
    """(mean, population std) of a sequence; Nones filtered out."""
    vals = [v for v in values if v is not None]
    if not vals:
        return None, None
    arr = np.asarray(vals, dtype=np.float64)
    return float(arr.mean()), float(arr.std())


def _summarize(config, seed_results):
    cfg = asdict(config)
    cfg["seeds"] = list(config.seeds)
    if config.widths is not None:
        cfg["widths"] = list(config.widths)
    mean_val, std_val = aggregate([r.val_accuracy for r in seed_results])
    mean_test, std_test = aggregate([r.test_accuracy for r in seed_results])
    return {
        "config": cfg,
        "per_seed": [{
            "seed": r.seed,
            "val_accuracy": r.val_accuracy,
            "test_accuracy": r.test_accuracy,
            "epochs_ran": r.epochs_ran,
            "stopped_early": r.stopped_early,
            "wall_seconds": r.wall_seconds,
            "peak_bytes": r.peak_bytes,
            "analytic_peak_bytes": r.analytic_peak_bytes,
            "metrics_csv": r.metrics_path,
            "checkpoint": r.checkpoint_path,
        } for r in seed_results],
        "val_accuracy_mean": mean_val,
        "val_accuracy_std": std_val,
        "test_accuracy_mean": mean_test,
        "test_accuracy_std": std_test,
        "wall_seconds_total": sum(r.wall_seconds for r in seed_results),
        "mode": config.mode,
        "preset": config.preset,
    }
