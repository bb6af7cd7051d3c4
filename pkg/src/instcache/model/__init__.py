from .base import (
    ModelError,
    ModelSpec,
    ModelState,
    StateReleasedError,
    TokenDistribution,
    TokenModel,
)
from .external import ExternalModel, ModelConnectionError, ProtocolServer, serve_stream
from .factory import model_from_string, model_init, parse_model_string
from .ngram import NgramArtifact, NgramModel, train_ngram, train_ngram_texts
from .synthetic import PowerLawModel, UniformModel, harmonic_normalizer

__all__ = [
    "ExternalModel",
    "ModelConnectionError",
    "ModelError",
    "ModelSpec",
    "ModelState",
    "NgramArtifact",
    "NgramModel",
    "PowerLawModel",
    "ProtocolServer",
    "StateReleasedError",
    "TokenDistribution",
    "TokenModel",
    "UniformModel",
    "harmonic_normalizer",
    "model_from_string",
    "model_init",
    "parse_model_string",
    "serve_stream",
    "train_ngram",
    "train_ngram_texts",
]
