"""Counterfactual examples and difference heatmaps from an invertible classifier."""

from .checkpoint import Checkpoint
from .counterfactuals import (
    CounterfactualResult,
    EcinnIndex,
    alpha_one,
    alpha_zero,
    build_index,
    counterfactual,
    delta,
    explain,
    explain_batch,
    heatmap,
)
from .datasets import Dataset, gen_blobs, gen_fakemnist
from .flow import FlowModel
from .gmm import LatentGMM, bits_per_dim, classify
from .training import TrainConfig, TrainReport, train

__version__ = "0.1.0"
