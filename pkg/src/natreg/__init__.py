"""Non-autoregressive translation with similarity and reconstruction regularization.

Everything is built on a small numpy reverse-mode autodiff core
(:mod:`natreg.tensor`).
"""

__version__ = "0.1.0"

from .data import ParallelCorpus, SentencePair, Vocabulary, gen_synthetic_corpus
from .losses import LossBreakdown, LossMode, LossWeights, joint_loss
from .nat import LengthRule
from .tensor import ContractError, DimensionError, Tensor
from .transformer import ConfigurationError, ModelConfig, ModelParams, init_params

__all__ = [
    "ConfigurationError", "ContractError", "DimensionError", "LengthRule", "LossBreakdown",
    "LossMode", "LossWeights", "ModelConfig", "ModelParams", "ParallelCorpus", "SentencePair",
    "Tensor", "Vocabulary", "gen_synthetic_corpus", "init_params", "joint_loss",
]
