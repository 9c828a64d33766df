"""Face-conditioned voice conversion on a small numpy autodiff engine."""

from .config import TrainConfig, load_config
from .corpus import Corpus, CorpusSpec, load_corpus, synth_corpus
from .estimator import FaceVoiceConverter
from .exceptions import ConfigurationError, DimensionError, FormatError, NumericError, ValidationError
from .network import FaceVCNetwork

__all__ = [
    "ConfigurationError",
    "Corpus",
    "CorpusSpec",
    "DimensionError",
    "FaceVCNetwork",
    "FaceVoiceConverter",
    "FormatError",
    "NumericError",
    "TrainConfig",
    "ValidationError",
    "load_config",
    "load_corpus",
    "synth_corpus",
]
