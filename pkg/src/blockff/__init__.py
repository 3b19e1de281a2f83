"""blockff: block-local training for convolutional networks.

Each block of a network is trained by its own class-goodness objective
with gradients confined inside the block; prediction averages the
per-block goodness vectors.  A standard backpropagation baseline shares
the same layers, data pipeline, and experiment harness.
"""

from . import checkpoint, cli, data, goodness, graph, layers, losses, memory, optim, tensor, trainer
from .data import Dataset, SplitSpec, load_cifar_binary, load_idx, synthetic_blobs
from .goodness import GoodnessHead, GoodnessMatrix, goodness_cwc, goodness_sff, split_pos_neg
from .graph import BlockGraph, build_preset, count_params, forward_blockwise, peak_activation_estimate
from .losses import cross_entropy, loss_cwc, loss_sff
from .optim import AdamW, EarlyStop, PlateauScheduler
from .trainer import TrainConfig, evaluate, finetune, run_experiment

__version__ = "0.1.0"
