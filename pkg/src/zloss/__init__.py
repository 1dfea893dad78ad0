"""Z-loss and other spherical losses, with an output layer whose exact SGD step
does not depend on the number of classes."""

__version__ = "0.1.0"

from ._backend import backend_name
from .corpus import NgramDataset, Vocab, build_vocab, encode_ngrams, synthetic_corpus
from .factored import FactoredLayer, SingularUpdate, StaleCache
from .heads import DenseHead, FactoredHead, HSMHead, make_head
from .losses import (LossConfigError, SphericalGrad, SphericalStats, ZLossParams, dense_eval,
                     grad_check, spherical_eval, standardize)
from .metrics import DataError, MetricsReport, RankAccumulator, aggregate, rank_of_target
from .model import ModelConfig, NgramModel, TrainConfig, evaluate, train

__all__ = [
    "DataError", "DenseHead", "FactoredHead", "FactoredLayer", "HSMHead", "LossConfigError",
    "MetricsReport", "ModelConfig", "NgramDataset", "NgramModel", "RankAccumulator",
    "SingularUpdate", "SphericalGrad", "SphericalStats", "StaleCache", "TrainConfig", "Vocab",
    "ZLossParams", "aggregate", "backend_name", "build_vocab", "dense_eval", "encode_ngrams",
    "evaluate", "grad_check", "make_head", "rank_of_target", "spherical_eval", "standardize",
    "synthetic_corpus", "train",
]
