"""Class goodness, two ways, and the local loss built on it.

A block's output tensor [B, D, H, W] is reduced to a [B, J] goodness
matrix either by a tiny auxiliary convolution (one output channel per
class, spatial mean of squares) or by partitioning the D channels
evenly among the J classes.  The local loss then pushes the true
class's goodness above the log-sum-exp aggregate of all classes.

Run:  python3 demos/01_goodness_and_losses.py
"""

import numpy as np

from blockff.goodness import GoodnessHead, goodness_cwc, goodness_sff, split_pos_neg
from blockff.losses import cross_entropy, loss_cwc, loss_sff
from blockff.tensor import log_sum_exp, make_rng

rng = make_rng(0)
B, D, H, W, J = 4, 8, 5, 5, 2
y = rng.standard_normal((B, D, H, W))
labels = rng.integers(0, J, size=B)

print("=== head route ===")
head = GoodnessHead(D, J, kernel_size=1, rng=make_rng(1))
g_head, _ = goodness_sff(y.astype(np.float32), head)
print("goodness matrix (auxiliary 1x1 head):")
print(np.round(g_head.values, 4))

print("\n=== partition route ===")
g_part, _ = goodness_cwc(y, J)
print(f"goodness matrix ({D} channels split into {J} groups of {D // J}):")
print(np.round(g_part.values, 4))

# the class-mean of partition goodness is exactly the mean of squares of
# the whole tensor: the partition is total
total = np.square(y).mean(axis=(1, 2, 3))
print("\npartition totality: row mean of G vs mean(y^2):",
      np.allclose(g_part.values.mean(axis=1), total))

g_pos, g_neg = split_pos_neg(g_part, labels)
print("\nlabels:            ", labels)
print("positive goodness: ", np.round(g_pos, 4))
print("negative goodness: ", np.round(g_neg, 4), "(mean of non-target classes)")

print("\n=== the local loss ===")
lv, grad = loss_sff(g_part.values, labels)
print(f"loss on the partition goodness: {lv.scalar:.6f}")
print("gradient rows sum to zero:", np.allclose(grad.sum(axis=1), 0, atol=1e-9))

# both local losses are the same arithmetic path: equality is exact
lv2, _ = loss_cwc(g_part.values, labels)
print("head-route and partition-route losses agree exactly:",
      lv.scalar == lv2.scalar)

# the same expression also serves as softmax cross-entropy on logits
logits = np.zeros((1, 10))
lv3, _ = cross_entropy(logits, np.array([3]))
print(f"\nuniform 10-class logits give cross-entropy ln(10) = {lv3.scalar:.6f}")

# log-sum-exp is max-shifted, so huge goodness values are safe
print("log_sum_exp([[1000, 1000]]) =", log_sum_exp(np.array([[1000.0, 1000.0]]))[0],
      "(= 1000 + ln 2, no overflow)")
