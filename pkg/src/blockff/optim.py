"""Per-block AdamW, reduce-on-plateau scheduling, and early stopping.

One optimizer/scheduler pair per block, no shared state: local training
keeps credit assignment inside a block, and the schedulers follow suit
by monitoring each block's own validation loss.  The learning-rate and
weight-decay grids used for hyperparameter sweeps ship here as plain
tuples.
"""

from __future__ import annotations

import numpy as np

from .tensor import NonFiniteError

LEARNING_RATE_GRID = (7e-5, 1e-4, 3e-4, 5e-4, 7e-4, 1e-3, 3e-3, 5e-3, 7e-3,
                      1e-2, 3e-2, 5e-2, 7e-2, 1e-1, 3e-1, 5e-1)
WEIGHT_DECAY_GRID = (0.0, 1e-8, 1e-7, 1e-6, 1e-5)


class AdamW:
    """Decoupled-weight-decay Adam over a dict of parameter arrays.

    Parameters are updated in place so layers keep their references.
    Weight decay multiplies parameters directly (never enters the
    moments); moment estimates are bias-corrected.
    """

    def __init__(self, params, lr=3e-4, betas=(0.9, 0.999), eps=1e-8,
                 weight_decay=0.0):
        self.params = dict(params)
        self.lr = float(lr)
        self.beta1, self.beta2 = betas
        self.eps = float(eps)
        self.weight_decay = float(weight_decay)
        self.step_count = 0
        self.m = {k: np.zeros_like(v) for k, v in self.params.items()}
        self.v = {k: np.zeros_like(v) for k, v in self.params.items()}

    def step(self, grads):
        for key, g in grads.items():
            if key not in self.params:
                raise KeyError(f"gradient for unknown parameter {key!r}")
            if g.shape != self.params[key].shape:
                raise ValueError(f"gradient shape {g.shape} does not match "
                                 f"parameter {key!r} {self.params[key].shape}")
            if not np.all(np.isfinite(g)):
                raise NonFiniteError(f"non-finite gradient for {key!r}")
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1 ** t
        bc2 = 1.0 - self.beta2 ** t
        for key, p in self.params.items():
            g = grads.get(key)
            if g is None:
                continue
            m, v = self.m[key], self.v[key]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * np.square(g)
            if self.weight_decay:
                p -= (self.lr * self.weight_decay) * p
            p -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)


class PlateauScheduler:
    """Cut the learning rate by ``factor`` after ``patience`` stale epochs.

    Improvement is any strict decrease of the monitored metric (a loss).
    On the ``patience``-th consecutive non-improving update the rate of
    every attached optimizer is multiplied by ``factor`` and the stale
    counter resets; the rate never increases.
    """

    def __init__(self, optimizers, patience=10, factor=0.1):
        self.optimizers = list(optimizers)
        self.patience = int(patience)
        self.factor = float(factor)
        self.best = np.inf
        self.stale = 0

    @property
    def lr(self):
        return self.optimizers[0].lr if self.optimizers else None

    def update(self, metric) -> bool:
        if not np.isfinite(metric):
            raise NonFiniteError("plateau scheduler fed a non-finite metric")
        if metric < self.best:
            self.best = float(metric)
            self.stale = 0
            return False
        self.stale += 1
        if self.stale >= self.patience:
            for opt in self.optimizers:
                opt.lr *= self.factor
            self.stale = 0
            return True
        return False


class EarlyStop:
    """Stop after ``patience`` epochs without validation-accuracy improvement."""

    def __init__(self, patience=30):
        self.patience = int(patience)
        self.best = -np.inf
        self.stale = 0
        self.stopped = False

    def update(self, accuracy) -> bool:
        if self.stopped:
            return True
        if accuracy > self.best:
            self.best = float(accuracy)
            self.stale = 0
            return False
        self.stale += 1
        if self.stale >= self.patience:
            self.stopped = True
        return self.stopped
