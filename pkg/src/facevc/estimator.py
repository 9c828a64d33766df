"""scikit-learn style wrapper around training and inference."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from . import pipeline
from .config import TrainConfig
from .corpus import Corpus
from .exceptions import DimensionError, ValidationError
from .network import FaceVCNetwork
from .training import History, label_map, train_network

_OVERRIDES = ("seed", "epochs", "lr", "batch_size", "lambda2")


def _faces(X, d_face: int) -> np.ndarray:
    """Face frames as float32 [N×T×D]; a single [T×D] clip becomes N=1."""
    arr = check_array(X, dtype=np.float32, ensure_2d=False, allow_nd=True, ensure_min_samples=1)
    if arr.ndim == 2:
        arr = arr[None]
    if arr.ndim != 3:
        raise DimensionError(f"face frames must be [T×D] or [N×T×D], got shape {arr.shape}")
    if arr.shape[-1] != d_face:
        raise DimensionError(f"face frames have dim {arr.shape[-1]}, model expects {d_face}")
    return arr


class FaceVoiceConverter(BaseEstimator, TransformerMixin):
    """Face-conditioned voice conversion as a fit/transform estimator.

    ``fit`` takes a training :class:`Corpus`; ``transform`` maps face frames
    to speaker codes.  Any of ``seed``, ``epochs``, ``lr``, ``batch_size``
    and ``lambda2`` left as ``None`` is taken from ``config``.
    """

    def __init__(self, config: TrainConfig | None = None, seed=None, epochs=None, lr=None,
                 batch_size=None, lambda2=None, log_path=None, checkpoint_dir=None):
        self.config = config
        self.seed = seed
        self.epochs = epochs
        self.lr = lr
        self.batch_size = batch_size
        self.lambda2 = lambda2
        self.log_path = log_path
        self.checkpoint_dir = checkpoint_dir

    def resolved_config(self) -> TrainConfig:
        base = self.config if self.config is not None else TrainConfig()
        if not isinstance(base, TrainConfig):
            raise ValidationError(f"config must be a TrainConfig, got {type(base).__name__}")
        changes = {k: getattr(self, k) for k in _OVERRIDES if getattr(self, k) is not None}
        return base.replace(**changes) if changes else base

    def fit(self, X: Corpus, y=None):
        if not isinstance(X, Corpus):
            raise ValidationError(f"fit expects a Corpus, got {type(X).__name__}")
        if y is not None and len(y) != len(X):
            raise ValidationError("y must be None or one label per utterance")
        cfg = self.resolved_config()
        net = FaceVCNetwork(cfg, len(label_map(X.speakers)))
        self.history_: History = train_network(net, X, self.log_path, self.checkpoint_dir)
        self.network_ = net
        self.n_speakers_ = net.n_speakers
        return self

    @classmethod
    def from_network(cls, net: FaceVCNetwork) -> "FaceVoiceConverter":
        est = cls(config=net.config)
        est.network_ = net
        est.n_speakers_ = net.n_speakers
        est.history_ = History()
        return est

    @classmethod
    def load(cls, directory) -> "FaceVoiceConverter":
        return cls.from_network(FaceVCNetwork.load(directory))

    def save(self, directory):
        check_is_fitted(self, "network_")
        return self.network_.save(directory)

    def embed_faces(self, X) -> np.ndarray:
        """Queried face features F_query, [N×d_spk]."""
        check_is_fitted(self, "network_")
        faces = _faces(X, self.network_.config.d_face)
        return np.stack([pipeline.face_query(self.network_, f) for f in faces])

    def transform(self, X) -> np.ndarray:
        """Speaker codes predicted from face frames, [N×d_spk]."""
        q = self.embed_faces(X)
        return pipeline.speaker_code_from_query(self.network_, q)

    def embed_speech(self, mels) -> np.ndarray:
        """Speaker-encoder embeddings of log-mels [N×T×n_mels] (or one [T×n_mels])."""
        check_is_fitted(self, "network_")
        arr = check_array(mels, dtype=np.float32, ensure_2d=False, allow_nd=True)
        if arr.ndim == 2:
            arr = arr[None]
        if arr.ndim != 3 or arr.shape[-1] != self.network_.config.n_mels:
            raise DimensionError(f"mels must be [N×T×{self.network_.config.n_mels}], got {arr.shape}")
        return pipeline.embed_mels(self.network_, arr)

    def convert(self, face_frames, source_waveform, vocode: bool = True) -> pipeline.Conversion:
        check_is_fitted(self, "network_")
        faces = _faces(face_frames, self.network_.config.d_face)
        if faces.shape[0] != 1:
            raise ValidationError("convert takes the frames of a single face")
        wav = check_array(source_waveform, dtype=np.float64, ensure_2d=False)
        if wav.ndim != 1:
            raise DimensionError(f"source waveform must be 1-D, got shape {wav.shape}")
        return pipeline.infer(self.network_, faces[0], wav, vocode=vocode)

    def interpolate(self, face_a, face_b, alpha: float) -> np.ndarray:
        check_is_fitted(self, "network_")
        d = self.network_.config.d_face
        a, b = _faces(face_a, d), _faces(face_b, d)
        if a.shape[0] != 1 or b.shape[0] != 1:
            raise ValidationError("interpolate takes the frames of one face on each side")
        return pipeline.interp_faces(self.network_, a[0], b[0], alpha).speaker_code
