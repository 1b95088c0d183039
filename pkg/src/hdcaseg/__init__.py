"""Semantic segmentation with hierarchical dynamic context aggregation, on a numpy autodiff core."""

from .backbone import Backbone, BackboneConfig
from .estimator import HDCASegmenter
from .hdca import HdcaConfig, HdcaStack, RegionProbabilityMap, forward_level, forward_stack
from .model import ModelConfig, SegModel
from .tensor import ComputationRecord, Tensor, backward, finite_difference_grad
from .training import TrainConfig, evaluate, poly_lr, train

__version__ = "0.1.0"

__all__ = [
    "Backbone", "BackboneConfig", "ComputationRecord", "HDCASegmenter", "HdcaConfig", "HdcaStack",
    "ModelConfig", "RegionProbabilityMap", "SegModel", "Tensor", "TrainConfig", "backward", "evaluate",
    "finite_difference_grad", "forward_level", "forward_stack", "poly_lr", "train",
]
