"""Binary checkpoint container.

Layout (little-endian): the 8-byte magic ``SFFCKPT1``, a u32 byte length
followed by a JSON descriptor (preset, mode, class count, input shape,
init scheme, seed, and the ordered tensor names/shapes), then the raw
tensor data as 32-bit floats in declaration order.

Loading back into a graph matches tensors by name and shape.  Tensors
the target graph does not have are ignored (a classifier head when
loading into a local mode); target tensors missing from the file are
allowed only for auxiliary heads and the classifier, which keep their
fresh initialization - so weights move freely between the backprop and
local training modes.
"""

from __future__ import annotations

import json
import struct

import numpy as np

from .layers import INIT_SCHEME

MAGIC = b"SFFCKPT1"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    """Checkpoint file mismatch: bad magic, version, or structure."""


def _is_fresh_ok(name, graph):
    if ".head." in name:
        return True
    block_index = int(name.split(".", 1)[0][1:])
    return graph.blocks[block_index].is_classifier


def save_checkpoint(path, graph):
    entries = graph.param_entries()
    descriptor = {
        "format_version": FORMAT_VERSION,
        "preset": graph.preset,
        "mode": graph.mode,
        "num_classes": graph.num_classes,
        "input_shape": list(graph.input_shape),
        "widths": list(graph.widths),
        "head_kernel": graph.head_kernel,
        "init_scheme": INIT_SCHEME,
        "seed": graph.seed,
        "dtype": "float32",
        "tensors": [{"name": name, "shape": list(arr.shape)} for name, arr in entries],
    }
    blob = json.dumps(descriptor, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        for _, arr in entries:
            f.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_checkpoint(path):
    """Read a checkpoint; returns (descriptor, {name: float32 array})."""
    with open(path, "rb") as f:
        magic = f.read(len(MAGIC))
        if magic != MAGIC:
            raise CheckpointError(f"{path}: bad magic {magic!r}")
        raw_len = f.read(4)
        if len(raw_len) < 4:
            raise CheckpointError(f"{path}: truncated descriptor length")
        (blob_len,) = struct.unpack("<I", raw_len)
        blob = f.read(blob_len)
        if len(blob) < blob_len:
            raise CheckpointError(f"{path}: truncated descriptor")
        try:
            descriptor = json.loads(blob.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise CheckpointError(f"{path}: unreadable descriptor: {exc}") from exc
        if descriptor.get("format_version") != FORMAT_VERSION:
            raise CheckpointError(
                f"{path}: unsupported format version {descriptor.get('format_version')}")
        tensors = {}
        for entry in descriptor["tensors"]:
            shape = tuple(entry["shape"])
            count = int(np.prod(shape)) if shape else 1
            data = f.read(count * 4)
            if len(data) < count * 4:
                raise CheckpointError(f"{path}: truncated tensor {entry['name']!r}")
            tensors[entry["name"]] = np.frombuffer(data, dtype="<f4").reshape(shape).copy()
    return descriptor, tensors


def load_into_graph(graph, descriptor, tensors):
    """Copy checkpoint tensors into a graph built for the same preset."""
    if descriptor["preset"] != graph.preset:
        raise CheckpointError(f"checkpoint preset {descriptor['preset']!r} "
                              f"does not match graph preset {graph.preset!r}")
    if descriptor["num_classes"] != graph.num_classes:
        raise CheckpointError("checkpoint class count does not match graph")
    if tuple(descriptor["input_shape"]) != tuple(graph.input_shape):
        raise CheckpointError("checkpoint input shape does not match graph")
    for name, arr in graph.param_entries():
        src = tensors.get(name)
        if src is None:
            if _is_fresh_ok(name, graph):
                continue
            raise CheckpointError(f"checkpoint is missing tensor {name!r}")
        if src.shape != arr.shape:
            raise CheckpointError(f"tensor {name!r} shape {src.shape} does not "
                                  f"match graph shape {arr.shape}")
        arr[:] = src.astype(arr.dtype)
    return graph
