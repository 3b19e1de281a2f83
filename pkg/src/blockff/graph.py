"""Block graphs: local-learning units, presets, and activation accounting.

A Block is a contiguous run of layers trained as one unit: gradients
flow freely inside it and never across its boundary.  In the two local
modes ("sff", "cwc") each trainable block carries its own loss source
(an auxiliary head or the channel partition) and hands a layer-normalized
copy of its output to the next block as a constant.  In "bp" mode the
graph is one linked chain ending in a classifier and normalization ops
are omitted entirely.

Presets:

* ``cnn``   - three conv+relu+pool stages, no batch norm
* ``cnnb``  - the same stages with batch norm inside each block
* ``tiny-resnet`` - a conv stem plus two residual blocks and global
  average pooling

Channel widths are a configurable assumption (defaults 32/64/128); in
"cwc" mode widths are rounded up to the nearest multiple of the class
count so the channel partition is exact.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .goodness import GoodnessHead, goodness_cwc, goodness_sff
from .layers import (AvgPool2d, BatchNorm2d, Conv2d, Dropout, Flatten,
                     GlobalAvgPool2d, LayerNorm, Linear, MaxPool2d, ReLU)
from .tensor import DEFAULT_DTYPE, ShapeError, make_rng

MODES = ("sff", "cwc", "bp")
PRESETS = ("cnn", "cnnb", "tiny-resnet")


class Block:
    """Ordered layer chain with exclusive ownership of its parameters."""

    def __init__(self, layers, trainable=True, is_classifier=False):
        self.layers = list(layers)
        self.trainable = bool(trainable)
        self.is_classifier = bool(is_classifier)
        self.head: GoodnessHead | None = None
        self.post_norm: LayerNorm | None = None

    def forward(self, x, train=False, rng=None):
        caches = []
        for layer in self.layers:
            x, c = layer.forward(x, train=train, rng=rng)
            caches.append(c)
        return x, caches

    def backward(self, caches, dy):
        grads = {}
        for i in reversed(range(len(self.layers))):
            dy, g = self.layers[i].backward(caches[i], dy)
            for name, val in g.items():
                grads[f"{i}.{name}"] = val
        return dy, grads

    def param_items(self):
        out = {}
        for i, layer in enumerate(self.layers):
            for name, arr in layer.params().items():
                out[f"{i}.{name}"] = arr
        return out

    def state_items(self):
        out = {}
        for i, layer in enumerate(self.layers):
            for name, arr in layer.state().items():
                out[f"{i}.{name}"] = arr
        return out

    def out_shape(self, in_shape):
        for layer in self.layers:
            in_shape = layer.out_shape(in_shape)
        return in_shape

    def cache_nbytes(self, in_shape, batch, itemsize):
        total = 0
        for layer in self.layers:
            total += layer.cache_nbytes(in_shape, batch, itemsize)
            in_shape = layer.out_shape(in_shape)
        return total


class ResidualBlock(Block):
    """conv-norm-relu-conv-norm main path, identity or 1x1-conv skip,
    fused by addition then relu; optional attached tail (e.g. pooling)."""

    def __init__(self, in_channels, out_channels, stride=1, *, rng,
                 dtype=DEFAULT_DTYPE, tail=()):
        super().__init__([], trainable=True)
        self.main = [
            Conv2d(in_channels, out_channels, 3, stride=stride, padding=1, rng=rng, dtype=dtype),
            BatchNorm2d(out_channels, dtype=dtype),
            ReLU(),
            Conv2d(out_channels, out_channels, 3, stride=1, padding=1, rng=rng, dtype=dtype),
            BatchNorm2d(out_channels, dtype=dtype),
        ]
        if stride != 1 or in_channels != out_channels:
            self.skip = [Conv2d(in_channels, out_channels, 1, stride=stride, rng=rng, dtype=dtype)]
        else:
            self.skip = []
        self.fuse_relu = ReLU()
        self.tail = list(tail)

    def forward(self, x, train=False, rng=None):
        ym, main_caches = x, []
        for layer in self.main:
            ym, c = layer.forward(ym, train=train, rng=rng)
            main_caches.append(c)
        ys, skip_caches = x, []
        for layer in self.skip:
            ys, c = layer.forward(ys, train=train, rng=rng)
            skip_caches.append(c)
        if ym.shape != ys.shape:
            raise ShapeError(f"residual paths disagree: {ym.shape} vs {ys.shape}")
        y, relu_cache = self.fuse_relu.forward(ym + ys, train=train, rng=rng)
        tail_caches = []
        for layer in self.tail:
            y, c = layer.forward(y, train=train, rng=rng)
            tail_caches.append(c)
        return y, {"main": main_caches, "skip": skip_caches,
                   "relu": relu_cache, "tail": tail_caches}

    def backward(self, caches, dy):
        grads = {}
        for i in reversed(range(len(self.tail))):
            dy, g = self.tail[i].backward(caches["tail"][i], dy)
            for name, val in g.items():
                grads[f"tail.{i}.{name}"] = val
        dy, _ = self.fuse_relu.backward(caches["relu"], dy)
        dm = dy
        for i in reversed(range(len(self.main))):
            dm, g = self.main[i].backward(caches["main"][i], dm)
            for name, val in g.items():
                grads[f"main.{i}.{name}"] = val
        ds = dy
        for i in reversed(range(len(self.skip))):
            ds, g = self.skip[i].backward(caches["skip"][i], ds)
            for name, val in g.items():
                grads[f"skip.{i}.{name}"] = val
        return dm + ds, grads

    def _groups(self):
        return (("main", self.main), ("skip", self.skip), ("tail", self.tail))

    def param_items(self):
        out = {}
        for prefix, layers in self._groups():
            for i, layer in enumerate(layers):
                for name, arr in layer.params().items():
                    out[f"{prefix}.{i}.{name}"] = arr
        return out

    def state_items(self):
        out = {}
        for prefix, layers in self._groups():
            for i, layer in enumerate(layers):
                for name, arr in layer.state().items():
                    out[f"{prefix}.{i}.{name}"] = arr
        return out

    def out_shape(self, in_shape):
        shape = in_shape
        for layer in self.main:
            shape = layer.out_shape(shape)
        for layer in self.tail:
            shape = layer.out_shape(shape)
        return shape

    def cache_nbytes(self, in_shape, batch, itemsize):
        total, shape = 0, in_shape
        for layer in self.main:
            total += layer.cache_nbytes(shape, batch, itemsize)
            shape = layer.out_shape(shape)
        # the skip conv retains the same input array as main[0]; count once
        total += self.fuse_relu.cache_nbytes(shape, batch, itemsize)
        for layer in self.tail:
            total += layer.cache_nbytes(shape, batch, itemsize)
            shape = layer.out_shape(shape)
        return total


@dataclass
class BlockGraph:
    blocks: list
    mode: str
    num_classes: int
    preset: str
    input_shape: tuple
    dtype: type = DEFAULT_DTYPE
    head_kernel: int = 1
    goodness_squared: bool = True
    widths: tuple = ()
    seed: int = 0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.mode == "bp":
            classifiers = [b for b in self.blocks if b.is_classifier]
            if len(classifiers) != 1 or not self.blocks[-1].is_classifier:
                raise ValueError("bp mode needs exactly one terminal classifier block")

    def feature_blocks(self):
        return [b for b in self.blocks if b.trainable and not b.is_classifier]

    def uses_batchnorm(self):
        return any(isinstance(l, BatchNorm2d)
                   for b in self.blocks for l in _all_layers(b))

    def param_entries(self):
        """Ordered (name, array) pairs over all parameters and running stats."""
        out = []
        for bi, block in enumerate(self.blocks):
            for name, arr in block.param_items().items():
                out.append((f"b{bi}.{name}", arr))
            for name, arr in block.state_items().items():
                out.append((f"b{bi}.{name}", arr))
            if block.head is not None:
                for name, arr in block.head.params().items():
                    out.append((f"b{bi}.head.{name}", arr))
        return out


def _all_layers(block):
    if isinstance(block, ResidualBlock):
        return block.main + block.skip + [block.fuse_relu] + block.tail
    return block.layers


def _round_up(width, multiple):
    return ((width + multiple - 1) // multiple) * multiple


def _adjust_widths(widths, mode, num_classes):
    if mode != "cwc":
        return tuple(widths)
    return tuple(_round_up(w, num_classes) for w in widths)


def _attach_local_extras(graph, rng):
    """Give every feature block its pass-on normalizer (and head in sff mode)."""
    if graph.mode == "bp":
        return
    for bi, block in enumerate(graph.blocks):
        if not block.trainable or block.is_classifier:
            continue
        block.post_norm = LayerNorm()
        if graph.mode == "sff":
            out_ch = block.out_shape(_shape_into(graph, bi))[0]
            block.head = GoodnessHead(out_ch, graph.num_classes,
                                      graph.head_kernel, rng=rng, dtype=graph.dtype)


def _shape_into(graph, block_index):
    shape = graph.input_shape
    for b in graph.blocks[:block_index]:
        shape = b.out_shape(shape)
    return shape


def preset_cnn(num_classes, input_shape=(3, 32, 32), mode="sff", seed=0,
               widths=(32, 64, 128), head_kernel=1, dropout_rate=0.5,
               dtype=DEFAULT_DTYPE, goodness_squared=True, batchnorm=False,
               preset_name="cnn"):
    if num_classes < 2:
        raise ValueError("need at least 2 classes")
    widths = _adjust_widths(widths, mode, num_classes)
    rng = make_rng(seed, 0)
    c_in = input_shape[0]
    w1, w2, w3 = widths

    def stage(cin, cout, pool):
        layers = [Conv2d(cin, cout, 3, padding=1, rng=rng, dtype=dtype)]
        if batchnorm:
            layers.append(BatchNorm2d(cout, dtype=dtype))
        layers.append(ReLU())
        if pool:
            layers.append(MaxPool2d(2, 2))
        return layers

    b1 = Block(stage(c_in, w1, pool=True))
    b2 = Block(stage(w1, w2, pool=True))
    b3 = Block(stage(w2, w3, pool=False) + [Dropout(dropout_rate)])
    blocks = [b1, b2, b3]
    if mode == "bp":
        feat_shape = b3.out_shape(b2.out_shape(b1.out_shape(tuple(input_shape))))
        blocks.append(Block([Flatten(),
                             Linear(int(np.prod(feat_shape)), num_classes,
                                    rng=rng, dtype=dtype)],
                            is_classifier=True))
    graph = BlockGraph(blocks, mode, num_classes, preset_name, tuple(input_shape),
                       dtype=dtype, head_kernel=head_kernel,
                       goodness_squared=goodness_squared, widths=widths, seed=seed)
    _attach_local_extras(graph, rng)
    return graph


def preset_cnnb(num_classes, input_shape=(3, 32, 32), mode="sff", seed=0,
                widths=(32, 64, 128), head_kernel=1, dropout_rate=0.5,
                dtype=DEFAULT_DTYPE, goodness_squared=True):
    return preset_cnn(num_classes, input_shape, mode, seed, widths, head_kernel,
                      dropout_rate, dtype, goodness_squared, batchnorm=True,
                      preset_name="cnnb")


def preset_tiny_resnet(num_classes, input_shape=(3, 32, 32), mode="sff", seed=0,
                       widths=(16, 32, 64), head_kernel=1, dropout_rate=0.5,
                       dtype=DEFAULT_DTYPE, goodness_squared=True):
    if num_classes < 2:
        raise ValueError("need at least 2 classes")
    widths = _adjust_widths(widths, mode, num_classes)
    rng = make_rng(seed, 0)
    c_in = input_shape[0]
    w1, w2, w3 = widths
    stem = Block([Conv2d(c_in, w1, 3, padding=1, rng=rng, dtype=dtype),
                  BatchNorm2d(w1, dtype=dtype), ReLU()])
    res1 = ResidualBlock(w1, w2, stride=2, rng=rng, dtype=dtype)
    res2 = ResidualBlock(w2, w3, stride=2, rng=rng, dtype=dtype,
                         tail=[GlobalAvgPool2d()])
    blocks = [stem, res1, res2]
    if mode == "bp":
        blocks.append(Block([Flatten(), Linear(w3, num_classes, rng=rng, dtype=dtype)],
                            is_classifier=True))
    graph = BlockGraph(blocks, mode, num_classes, "tiny-resnet", tuple(input_shape),
                       dtype=dtype, head_kernel=head_kernel,
                       goodness_squared=goodness_squared, widths=widths, seed=seed)
    _attach_local_extras(graph, rng)
    return graph


_PRESET_BUILDERS = {"cnn": preset_cnn, "cnnb": preset_cnnb,
                    "tiny-resnet": preset_tiny_resnet}


def build_preset(name, num_classes, input_shape, mode, seed=0, **kwargs):
    if name not in _PRESET_BUILDERS:
        raise ValueError(f"unknown preset {name!r}; choose from {PRESETS}")
    return _PRESET_BUILDERS[name](num_classes, input_shape, mode, seed, **kwargs)


def block_goodness(graph, block, y, block_index):
    """Goodness of one block's output under the graph's mode (no cache)."""
    if graph.mode == "sff":
        g, _ = goodness_sff(y, block.head, square=graph.goodness_squared,
                            block_index=block_index)
    elif graph.mode == "cwc":
        g, _ = goodness_cwc(y, graph.num_classes, block_index=block_index)
    else:
        raise ValueError("goodness is undefined in bp mode")
    return g


def forward_blockwise(graph, x, train=False, rng=None):
    """Run the graph block by block.

    Returns a list with one ``(block_output, GoodnessMatrix | None)``
    entry per block.  In the local modes each trainable feature block
    contributes a goodness matrix and passes its normalized output
    onward as a constant; in bp mode the chain is unbroken and the last
    entry's output holds the logits.
    """
    if tuple(x.shape[1:]) != tuple(graph.input_shape):
        raise ShapeError(f"input {x.shape[1:]} does not match graph "
                         f"input shape {graph.input_shape}")
    results = []
    for bi, block in enumerate(graph.blocks):
        y, _ = block.forward(x, train=train, rng=rng)
        g = None
        if graph.mode != "bp" and block.trainable and not block.is_classifier:
            g = block_goodness(graph, block, y, bi)
            x = block.post_norm.forward(y, train=train)[0]
        else:
            x = y
        results.append((y, g))
    return results


def count_params(graph) -> int:
    total = 0
    for block in graph.blocks:
        total += sum(arr.size for arr in block.param_items().values())
        if block.head is not None:
            total += sum(arr.size for arr in block.head.params().values())
    return total


def param_nbytes(graph) -> int:
    return sum(arr.nbytes for _, arr in graph.param_entries())


def _block_activation_nbytes(graph, block, in_shape, batch, itemsize):
    total = block.cache_nbytes(in_shape, batch, itemsize)
    if graph.mode != "bp" and block.trainable and not block.is_classifier:
        out_shape = block.out_shape(in_shape)
        out_elems = batch * int(np.prod(out_shape))
        if graph.mode == "sff":
            head_out = (graph.num_classes,) + tuple(out_shape[1:])
            # head retains the block output plus its own class tensor
            total += out_elems * itemsize
            total += batch * int(np.prod(head_out)) * itemsize
        else:
            total += out_elems * itemsize  # partition route retains the output
    return total


def peak_activation_estimate(graph, batch_size, mode=None) -> int:
    """Analytic peak live-tensor bytes for one training step.

    Counts parameters (always resident) plus backward caches: the sum
    over all layers in bp mode, the maximum over blocks in the local
    modes where each block's caches die before the next block trains.
    """
    mode = mode or graph.mode
    itemsize = np.dtype(graph.dtype).itemsize
    per_block = []
    shape = graph.input_shape
    for block in graph.blocks:
        per_block.append(_block_activation_nbytes(graph, block, shape,
                                                  batch_size, itemsize))
        shape = block.out_shape(shape)
    activations = sum(per_block) if mode == "bp" else max(per_block)
    return param_nbytes(graph) + activations
