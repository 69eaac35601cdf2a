"""Hierarchical feedback-chain segmentation network for hippocampus MRI."""

from fbchain.fha import ChannelAttention, FeatureHandover, SpatialAttention
from fbchain.fafc import ChainState, EncoderConfig, FAFCEncoder
from fbchain.gpa import GlobalContext, GlobalPyramidAttention, PairFuse, PyramidAttention
from fbchain.network import ModelConfig, SegmentationNet, ablation_config, build_model

__all__ = [
    "ChainState",
    "ChannelAttention",
    "EncoderConfig",
    "FAFCEncoder",
    "FeatureHandover",
    "GlobalContext",
    "GlobalPyramidAttention",
    "ModelConfig",
    "PairFuse",
    "PyramidAttention",
    "SegmentationNet",
    "SpatialAttention",
    "ablation_config",
    "build_model",
]

__version__ = "0.1.0"
