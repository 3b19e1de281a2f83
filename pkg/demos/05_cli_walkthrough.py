"""The command line surface, end to end on a generated IDX dataset.

Builds a small IDX-format dataset on disk, then walks through every
subcommand: train (twice, two modes), eval, compare, sweep, inspect.

Run:  python3 demos/05_cli_walkthrough.py
"""

import struct
import tempfile
from pathlib import Path

import numpy as np

from blockff.cli import main
from blockff.data import synthetic_blobs

work = Path(tempfile.mkdtemp(prefix="blockff_cli_"))
data = work / "data"
data.mkdir()

for prefix, n, seed in (("train", 96, 0), ("t10k", 40, 1)):
    ds = synthetic_blobs(n, image_size=12, noise=0.1, seed=seed)
    images = (ds.images[:, 0] * 127 + 64).clip(0, 255).astype(np.uint8)
    with open(data / f"{prefix}-images-idx3-ubyte", "wb") as f:
        f.write(struct.pack(">iiii", 0x803, n, 12, 12))
        f.write(images.tobytes())
    with open(data / f"{prefix}-labels-idx1-ubyte", "wb") as f:
        f.write(struct.pack(">ii", 0x801, n))
        f.write(ds.labels.astype(np.uint8).tobytes())
print(f"IDX fixture written under {data}\n")

common = ["--dataset-format", "idx", "--data-dir", str(data),
          "--epochs", "3", "--batch-size", "16", "--widths", "4,4,4",
          "--seed", "0", "--lr", "1e-3", "--deterministic"]

print("$ blockff train --mode sff ...")
assert main(["train", "--mode", "sff", "--preset", "cnnb", *common,
             "--out-dir", str(work / "sff_run")]) == 0

print("\n$ blockff train --mode bp ...")
assert main(["train", "--mode", "bp", "--preset", "cnnb", *common,
             "--out-dir", str(work / "bp_run")]) == 0

print("\n$ blockff eval --checkpoint-in sff_run/seed0/checkpoint.ckpt ...")
assert main(["eval", "--checkpoint-in", str(work / "sff_run/seed0/checkpoint.ckpt"),
             "--dataset-format", "idx", "--data-dir", str(data)]) == 0

print("\n$ blockff compare sff_run bp_run")
assert main(["compare", str(work / "sff_run"), str(work / "bp_run"),
             "--out-dir", str(work)]) == 0

print("\n$ blockff sweep --lr-grid 1e-3,3e-3 --decay-grid 0,1e-6 ...")
assert main(["sweep", "--mode", "sff", "--preset", "cnn", *common,
             "--out-dir", str(work / "sweep"),
             "--lr-grid", "1e-3,3e-3", "--decay-grid", "0,1e-6"]) == 0

print("\n$ blockff inspect sff_run/seed0/checkpoint.ckpt")
assert main(["inspect", str(work / "sff_run/seed0/checkpoint.ckpt")]) == 0

print(f"\nall artifacts under {work}")
