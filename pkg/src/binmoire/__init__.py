"""1-bit demoireing building blocks: XNOR-popcount convolution, a moire-aware
channel gate, a shuffle-grouped residual adapter, and a small trainable
encoder-decoder built from them."""
from .binconv import ConvSpec, RpreluParams, gated_binary_conv, rprelu, xnor_conv2d
from .estimator import BinaryDemoireRegressor
from .mabg import GateHead, MoireGate, predict_gate
from .netblocks import NetworkConfig, build_network, count_params_ops
from .sgra import SgraAdapter, choose_groups, interleave, partition_project, sgra_forward
from .tensor_core import BitTensor, compute_alpha, pack, sign_binarize, unpack

__version__ = "0.1.0"

__all__ = [
    "BinaryDemoireRegressor", "BitTensor", "ConvSpec", "GateHead", "MoireGate",
    "NetworkConfig", "RpreluParams", "SgraAdapter", "build_network", "choose_groups",
    "compute_alpha", "count_params_ops", "gated_binary_conv", "interleave", "pack",
    "partition_project", "predict_gate", "rprelu", "sgra_forward", "sign_binarize",
    "unpack", "xnor_conv2d",
]
