"""Peak live-tensor accounting: local training vs backprop.

Backprop must keep every layer's backward cache alive until the global
backward pass runs; block-local training only ever holds one block's
caches.  The analytic estimator walks layer shapes; the memory meter
registers the actual cache arrays during a training step.  The two are
computed independently and should agree closely.

Run:  python3 demos/03_memory_accounting.py
"""

import numpy as np

from blockff.data import Dataset, batches
from blockff.graph import build_preset, count_params, peak_activation_estimate
from blockff.memory import MemoryMeter
from blockff.tensor import make_rng
from blockff.trainer import TrainConfig, make_states, train_minibatch_bp, train_minibatch_sff

BATCH = 128
rng = make_rng(0)
images = rng.standard_normal((BATCH, 3, 32, 32)).astype(np.float32)
ds = Dataset(images, rng.integers(0, 10, BATCH), "noise", 10)
x, labels = next(batches(ds, BATCH))

print(f"one training step at batch {BATCH} on 3x32x32 inputs\n")
header = f"{'preset':12s} {'mode':5s} {'params':>9s} {'measured':>12s} {'analytic':>12s}"
print(header)
print("-" * len(header))
for preset in ("cnnb", "tiny-resnet"):
    for mode in ("sff", "bp"):
        graph = build_preset(preset, 10, (3, 32, 32), mode, seed=0)
        config = TrainConfig(mode=mode, preset=preset, batch_size=BATCH)
        states = make_states(graph, config)
        meter = MemoryMeter()
        meter.add(*[arr for _, arr in graph.param_entries()])
        step = train_minibatch_sff if mode == "sff" else train_minibatch_bp
        step(graph, x, labels, states, make_rng(1), meter)
        analytic = peak_activation_estimate(graph, BATCH)
        print(f"{preset:12s} {mode:5s} {count_params(graph):9d} "
              f"{meter.peak / 2**20:10.1f} MiB {analytic / 2**20:10.1f} MiB")
    print()

print("local-mode peak is the max over blocks; backprop pays the sum.")
