"""Instrumented accounting of live tensor bytes during training.

The meter tracks a registry of arrays that are currently resident for
training purposes: model parameters (including running statistics) and
the backward caches each layer retains between its forward and backward
pass.  Arrays are keyed by identity so shared buffers count once.
Optimizer moments and transient arithmetic temporaries are outside the
accounting scope, matching the analytic estimator in
:func:`blockff.graph.peak_activation_estimate`.
"""

from __future__ import annotations

import numpy as np


class MemoryMeter:
    def __init__(self):
        self._live = {}
        self.current = 0
        self.peak = 0

    def add(self, *arrays):
        for arr in arrays:
            key = id(arr)
            if key not in self._live:
                self._live[key] = arr.nbytes
                self.current += arr.nbytes
        self.peak = max(self.peak, self.current)

    def discard(self, *arrays):
        for arr in arrays:
            nbytes = self._live.pop(id(arr), None)
            if nbytes is not None:
                self.current -= nbytes

    def add_cache(self, cache):
        self.add(*_cache_arrays(cache))

    def discard_cache(self, cache):
        self.discard(*_cache_arrays(cache))

    def reset_peak(self):
        self.peak = self.current


def _cache_arrays(cache):
    """All ndarrays reachable inside a (possibly nested) cache structure."""
    out = []
    stack = [cache]
    while stack:
        item = stack.pop()
        if isinstance(item, np.ndarray):
            out.append(item)
        elif isinstance(item, dict):
            stack.extend(item.values())
        elif isinstance(item, (list, tuple)):
            stack.extend(item)
    return out
