"""Per-block class-goodness computation.

Two routes produce a [B, J] goodness matrix from a block's output
tensor [B, D, H, W]:

* the auxiliary-head route: a small convolution (out-channels = number
  of classes) maps the block output to a class tensor, and the spatial
  mean of its squares per class gives the goodness (squaring can be
  disabled for ablation),
* the channel-partition route: the D channels are split evenly into J
  groups and the goodness of class j is the mean of squares over group
  j's channels and all spatial positions.

Both routes come with explicit backward functions so a block-local loss
can drive both the block parameters and (for the head route) the head.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .layers import Conv2d
from .tensor import ShapeError, check_finite


@dataclass
class GoodnessMatrix:
    """[B, J] class-goodness scores attributed to one block."""

    values: np.ndarray
    source_block: int = -1

    def __post_init__(self):
        if self.values.ndim != 2:
            raise ShapeError(f"goodness matrix must be [B, J], got {self.values.shape}")
        check_finite(self.values, "goodness matrix")


class GoodnessHead:
    """Auxiliary convolution from block channels to one channel per class.

    Kernel size is the head's only knob; odd sizes > 1 pad to preserve
    spatial extents.  The head output never feeds the next block, it
    exists only for the local loss.
    """

    def __init__(self, in_channels, num_classes, kernel_size=1, *, rng, dtype=np.float32):
        if kernel_size % 2 != 1:
            raise ValueError("head kernel size must be odd to preserve extents")
        self.num_classes = int(num_classes)
        self.conv = Conv2d(in_channels, num_classes, kernel_size,
                           stride=1, padding=(kernel_size - 1) // 2, rng=rng, dtype=dtype)

    @property
    def in_channels(self):
        return self.conv.in_channels

    def params(self):
        return self.conv.params()

    def state(self):
        return {}


def goodness_sff(y, head: GoodnessHead, square=True, block_index=-1):
    """Head-route goodness: spatial mean of the (squared) head output.

    Returns the goodness matrix and a cache for
    :func:`goodness_sff_backward`.
    """
    if y.shape[1] != head.in_channels:
        raise ShapeError(f"head expects {head.in_channels} channels, got {y.shape[1]}")
    z, conv_cache = head.conv.forward(y)
    g = np.square(z).mean(axis=(2, 3)) if square else z.mean(axis=(2, 3))
    cache = {"z": z, "conv_cache": conv_cache, "square": square, "head": head}
    return GoodnessMatrix(g, block_index), cache


def goodness_sff_backward(cache, dg):
    """Gradients of the head-route goodness: (dy, head parameter grads)."""
    z = cache["z"]
    hw = z.shape[2] * z.shape[3]
    if cache["square"]:
        dz = (2.0 / hw) * z * dg[:, :, None, None]
    else:
        dz = np.broadcast_to(dg[:, :, None, None] / hw, z.shape).astype(z.dtype)
    dy, head_grads = cache["head"].conv.backward(cache["conv_cache"], dz)
    return dy, head_grads


def goodness_cwc(y, num_classes, block_index=-1):
    """Partition-route goodness: mean of squares per class channel group."""
    B, C, H, W = y.shape
    j = int(num_classes)
    if C % j != 0:
        raise ShapeError(f"{C} channels not divisible by {j} classes")
    grouped = y.reshape(B, j, C // j, H, W)
    g = np.square(grouped).mean(axis=(2, 3, 4))
    return GoodnessMatrix(g, block_index), {"y": y, "num_classes": j}


def goodness_cwc_backward(cache, dg):
    y, j = cache["y"], cache["num_classes"]
    B, C, H, W = y.shape
    group = C // j
    scale = 2.0 / (group * H * W)
    dg_per_channel = np.repeat(dg, group, axis=1)[:, :, None, None]
    return (scale * y * dg_per_channel).astype(y.dtype, copy=False)


def split_pos_neg(g, labels):
    """Positive goodness (true class) and mean goodness of the other classes."""
    values = g.values if isinstance(g, GoodnessMatrix) else g
    labels = np.asarray(labels)
    B, J = values.shape
    if J < 2:
        raise ShapeError("positive/negative split needs at least 2 classes")
    if labels.shape != (B,):
        raise ShapeError(f"labels must be [{B}], got {labels.shape}")
    if labels.min() < 0 or labels.max() >= J:
        raise ValueError(f"labels out of range [0, {J})")
    g_pos = values[np.arange(B), labels]
    g_neg = (values.sum(axis=1) - g_pos) / (J - 1)
    return g_pos, g_neg
