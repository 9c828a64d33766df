"""Training objectives and their weighting."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields

import numpy as np

from . import autograd as ag
from .autograd import Linear, Module, Tensor
from .exceptions import DimensionError, NumericError, ValidationError

LOG_2PI = math.log(2.0 * math.pi)
LOGVAR_BOUNDS = (-8.0, 8.0)

# Order matches the loss CSV columns.
PART_NAMES = ("rec", "con", "mi", "id_f", "id_s", "F")


@dataclass(frozen=True)
class LossWeights:
    """Weights of the contrastive, MI, face-id, speech-id and mapping terms."""

    con: float = 0.1
    mi: float = 0.01
    id_f: float = 0.1
    id_s: float = 0.1
    F: float = 1.0

    def __post_init__(self):
        for f in fields(self):
            value = getattr(self, f.name)
            if not math.isfinite(value) or value < 0:
                raise ValidationError(f"loss weight {f.name} must be finite and nonnegative, got {value}")

    def as_dict(self) -> dict:
        return asdict(self)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x))


def _labels(labels, n: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if labels.shape[0] != n:
        raise DimensionError(f"{labels.shape[0]} labels for a batch of {n}")
    return labels


def contrastive_loss(face, speech, labels, tau: float = 0.07) -> Tensor:
    """Supervised cross-modal InfoNCE with cosine similarity.

    Row i compares face i against every speech embedding in the batch; every
    same-speaker column counts as a positive.
    """
    if not tau > 0:
        raise ValidationError(f"temperature must be positive, got {tau}")
    face, speech = _as_tensor(face), _as_tensor(speech)
    if face.shape != speech.shape or face.ndim != 2:
        raise DimensionError(f"face {face.shape} and speech {speech.shape} batches must both be [N×d]")
    labels = _labels(labels, face.shape[0])
    positives = (labels[:, None] == labels[None, :]).astype(face.dtype)
    sim = ag.matmul(ag.l2_normalize(face), ag.swapaxes(ag.l2_normalize(speech), 0, 1))
    logp = ag.log_softmax(sim * (1.0 / tau), axis=-1)
    return ag.tsum(logp * Tensor(positives)) * (-1.0 / face.shape[0])


def id_supervision_loss(features, head: Linear, labels) -> Tensor:
    """Speaker classification cross-entropy through a linear head."""
    features = _as_tensor(features)
    n_classes = head.out_features
    if n_classes < 2:
        raise ValidationError(f"speaker-id supervision needs at least 2 classes, got {n_classes}")
    labels = _labels(labels, features.shape[0])
    return ag.cross_entropy(head(features), ag.one_hot(labels, n_classes))


class VariationalNet(Module):
    """Diagonal Gaussian q(content | speaker) from two small two-layer nets."""

    def __init__(self, d_spk: int, d_con: int, hidden: int, rng: np.random.Generator):
        self.mean_inner = Linear(d_spk, hidden, rng)
        self.mean_outer = Linear(hidden, d_con, rng)
        self.logvar_inner = Linear(d_spk, hidden, rng)
        self.logvar_outer = Linear(hidden, d_con, rng)

    def __call__(self, spk) -> tuple[Tensor, Tensor]:
        spk = _as_tensor(spk)
        mu = self.mean_outer(ag.tanh(self.mean_inner(spk)))
        logvar = ag.clip(self.logvar_outer(ag.tanh(self.logvar_inner(spk))), *LOGVAR_BOUNDS)
        return mu, logvar


def gaussian_log_density(x, mu: Tensor, logvar: Tensor) -> Tensor:
    """log N(x; mu, diag(exp(logvar))) summed over the last axis."""
    x = _as_tensor(x)
    sq = (x - mu) ** 2 * ag.exp(logvar * -1.0)
    return ag.tsum(sq + logvar + LOG_2PI, axis=-1) * -0.5


def _club_inputs(spk, con):
    spk, con = _as_tensor(spk), _as_tensor(con)
    if spk.ndim != 2 or con.ndim != 2 or spk.shape[0] != con.shape[0]:
        raise DimensionError(f"speaker {spk.shape} and content {con.shape} must be paired [N×d] batches")
    if spk.shape[0] < 1:
        raise ValidationError("need at least one sample")
    return spk, con


def club_mi_upper(spk, con, q: VariationalNet) -> Tensor:
    """Contrastive log-ratio upper bound on I(speaker; content).

    Mean log-density of matched pairs minus the mean over all N² pairings.
    """
    spk, con = _club_inputs(spk, con)
    n = spk.shape[0]
    mu, logvar = q(spk)
    if not (np.all(np.isfinite(mu.data)) and np.all(np.isfinite(logvar.data))):
        raise NumericError("variational network produced non-finite parameters")
    positive = gaussian_log_density(con, mu, logvar)
    d = con.shape[1]
    # all[i, j] = log q(con_j | spk_i)
    all_pairs = gaussian_log_density(
        ag.reshape(con, (1, n, d)), ag.reshape(mu, (n, 1, d)), ag.reshape(logvar, (n, 1, d))
    )
    out = ag.mean(positive) - ag.mean(all_pairs)
    if not np.isfinite(out.data).all():
        raise NumericError("CLUB estimate is not finite")
    return out


def qnet_nll(spk, con, q: VariationalNet) -> Tensor:
    """Mean negative log-likelihood of matched pairs; the fitting objective for q."""
    spk, con = _club_inputs(spk, con)
    mu, logvar = q(spk)
    out = ag.mean(gaussian_log_density(con, mu, logvar)) * -1.0
    if not np.isfinite(out.data).all():
        raise NumericError("variational negative log-likelihood is not finite")
    return out


def recon_loss(mel, mel_hat) -> Tensor:
    """Mean squared error over every element."""
    mel, mel_hat = _as_tensor(mel), _as_tensor(mel_hat)
    if mel.shape != mel_hat.shape:
        raise DimensionError(f"mel {mel.shape} and reconstruction {mel_hat.shape} differ in shape")
    return ag.mean((mel - mel_hat) ** 2)


def fv_mapping_loss(mapped, target, labels, margin: float = 1.0) -> Tensor:
    """MSE to the (frozen) speech speaker code plus an inter-speaker hinge.

    The hinge averages ``max(0, margin - ||m_i - m_j||)`` over unordered
    pairs in the batch that belong to different speakers.
    """
    mapped, target = _as_tensor(mapped), _as_tensor(target)
    if mapped.shape != target.shape:
        raise DimensionError(f"mapped {mapped.shape} and target {target.shape} differ in shape")
    mse = ag.mean((mapped - ag.detach(target)) ** 2)
    if mapped.ndim == 1:
        return mse
    labels = _labels(labels, mapped.shape[0])
    i, j = np.triu_indices(mapped.shape[0], k=1)
    keep = labels[i] != labels[j]
    if not keep.any():
        return mse
    i, j = i[keep], j[keep]
    diff = ag.getitem(mapped, i) - ag.getitem(mapped, j)
    dist = ag.sqrt(ag.tsum(diff * diff, axis=-1) + 1e-12)
    hinge = ag.maximum(margin - dist, 0.0)
    return mse + ag.mean(hinge)


def total_loss(parts: dict, weights: LossWeights = LossWeights()):
    """Reconstruction plus the weighted sum of the five auxiliary terms.

    ``parts`` maps the names in ``PART_NAMES`` to scalars or scalar tensors.
    """
    missing = [name for name in PART_NAMES if name not in parts]
    if missing:
        raise ValidationError(f"missing loss terms: {missing}")
    for name in PART_NAMES:
        value = parts[name]
        raw = value.data if isinstance(value, Tensor) else np.asarray(value)
        if not np.all(np.isfinite(raw)):
            raise NumericError(f"loss term {name!r} is not finite")
    total = parts["rec"]
    for name in PART_NAMES[1:]:
        total = total + parts[name] * getattr(weights, name)
    return total
