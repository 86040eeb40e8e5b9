"""Dilated residual segmentation networks with learnable dilation rates."""

from .convert import convert_to_dilated
from .gates import SearchConfig, apply_assignment, run_search
from .network import build_network, flop_count, forward_segmentation, init_params, parameter_count
from .train import TrainConfig, evaluate, recompute_bn_stats, train

__version__ = "0.1.0"
