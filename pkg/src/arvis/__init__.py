"""Desk-scale autoregressive text-to-image stack.

Unified text+image next-token modeling over a toy glyph codebook, trained in
three stages (LM pretraining, SFT, GRPO) and served through an inference
engine with classifier-free guidance, a paged KV cache with prefix sharing,
and speculative Jacobi decoding.
"""

__version__ = "0.1.0"

from .tokenization import ImageTokenGrid, TokenSequence, VocabLayout
from .transformer import Model, ModelConfig
from .decoding import DecodeStats, SamplerConfig, SjdConfig
from .training import GroupSample, PolicySnapshot, TrainConfig
from .toyworld import Scene, SceneObject

__all__ = [
    "ImageTokenGrid", "TokenSequence", "VocabLayout",
    "Model", "ModelConfig",
    "DecodeStats", "SamplerConfig", "SjdConfig",
    "GroupSample", "PolicySnapshot", "TrainConfig",
    "Scene", "SceneObject",
    "__version__",
]
