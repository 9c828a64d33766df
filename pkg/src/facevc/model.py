"""Network bodies: face querying, speaker/content encoders, pitch table, decoder.

Shapes follow one convention throughout: the last axis is features, the
second-to-last is time (or prompts), and an optional leading axis is the
batch.  Every forward accepts both the unbatched and batched layouts.
"""

from __future__ import annotations

import math
from typing import NamedTuple

import numpy as np

from . import autograd as ag
from .autograd import Linear, Module, Tensor
from .exceptions import ConfigurationError, DimensionError, ValidationError

# small prompt init keeps input-independent rows from dominating the pooled output
PROMPT_INIT_STD = 0.02


def average_face_frames(frames) -> Tensor:
    """Arithmetic mean over the frame axis: [T×D] -> [D], [N×T×D] -> [N×D]."""
    frames = frames if isinstance(frames, Tensor) else Tensor(np.asarray(frames))
    if frames.ndim < 2:
        raise DimensionError(f"face frames need shape [T×D] or [N×T×D], got {frames.shape}")
    if frames.shape[-2] == 0:
        raise ValidationError("cannot average an empty sequence of face frames")
    return ag.mean(frames, axis=-2)


class Projection(Module):
    """Bias-free linear map, used for the attention weight matrices."""

    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator):
        self.weight = ag.parameter(ag.glorot_uniform(rng, in_features, out_features))

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.weight.shape[0]:
            raise DimensionError(f"projection expects last dim {self.weight.shape[0]}, got shape {x.shape}")
        return ag.matmul(x, self.weight)


class FeedForward(Module):
    def __init__(self, in_features: int, hidden: int, out_features: int, rng: np.random.Generator):
        self.inner = Linear(in_features, hidden, rng)
        self.outer = Linear(hidden, out_features, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return self.outer(ag.tanh(self.inner(x)))


class SelfAttention(Module):
    def __init__(self, d_model: int, d_k: int, rng: np.random.Generator):
        self.w_q = Projection(d_model, d_k, rng)
        self.w_k = Projection(d_model, d_k, rng)
        self.w_v = Projection(d_model, d_model, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return ag.scaled_dot_attention(self.w_q(x), self.w_k(x), self.w_v(x))


def _batched(x) -> tuple[Tensor, bool]:
    x = x if isinstance(x, Tensor) else Tensor(np.asarray(x))
    if x.ndim == 2:
        return ag.reshape(x, (1,) + x.shape), True
    if x.ndim != 3:
        raise DimensionError(f"expected a [L×D] or [N×L×D] sequence, got shape {x.shape}")
    return x, False


class SAFPQ(Module):
    """Learnable face prompts refined by self-attention, then cross-attended
    against a sequence of face embeddings and fused by a feed-forward layer.

    The P prompt outputs are mean-pooled into one identity vector.
    """

    def __init__(self, d_face: int, d_model: int, d_k: int, d_out: int, n_prompts: int,
                 ffn_hidden: int, rng: np.random.Generator):
        if n_prompts < 1:
            raise ConfigurationError("need at least one face prompt")
        self.prompts = ag.parameter(rng.normal(0.0, PROMPT_INIT_STD, size=(n_prompts, d_model)))
        self.self_attn = SelfAttention(d_model, d_k, rng)
        self.cross_q = Projection(d_model, d_k, rng)
        self.cross_k = Projection(d_face, d_k, rng)
        self.cross_v = Projection(d_face, d_model, rng)
        self.ffn = FeedForward(d_model, ffn_hidden, d_out, rng)

    @property
    def d_face(self) -> int:
        return self.cross_k.weight.shape[0]

    def prompt_attention(self) -> Tensor:
        """Self-attended prompts, [P×d_model]; independent of the input."""
        return self.self_attn(self.prompts)

    def unpooled(self, face_seq) -> Tensor:
        """Per-prompt outputs before pooling: [L×D] -> [P×d_out]."""
        x, squeeze = _batched(face_seq)
        if x.shape[-1] != self.d_face:
            raise DimensionError(f"face embedding dim {x.shape[-1]} != {self.d_face}")
        a_self = self.prompt_attention()
        a_cross = ag.scaled_dot_attention(self.cross_q(a_self), self.cross_k(x), self.cross_v(x))
        out = self.ffn(a_cross)
        return ag.reshape(out, out.shape[1:]) if squeeze else out

    def __call__(self, face_seq) -> Tensor:
        return ag.mean(self.unpooled(face_seq), axis=-2)


class SpeakerSAFPQ(Module):
    """Prompt self-attention conditioned on audio, with no cross-attention stage.

    The time-pooled audio feature is projected and appended to the prompts as
    one extra row before self-attention; all P+1 outputs are mean-pooled.
    """

    def __init__(self, d_audio: int, d_model: int, d_k: int, d_out: int, n_prompts: int,
                 ffn_hidden: int, rng: np.random.Generator):
        if n_prompts < 1:
            raise ConfigurationError("need at least one speaker prompt")
        self.prompts = ag.parameter(rng.normal(0.0, PROMPT_INIT_STD, size=(n_prompts, d_model)))
        self.audio_proj = Linear(d_audio, d_model, rng)
        self.self_attn = SelfAttention(d_model, d_k, rng)
        self.ffn = FeedForward(d_model, ffn_hidden, d_out, rng)

    def unpooled(self, audio_feat) -> Tensor:
        x, squeeze = _batched(audio_feat)
        if x.shape[-1] != self.audio_proj.in_features:
            raise DimensionError(f"audio feature dim {x.shape[-1]} != {self.audio_proj.in_features}")
        n = x.shape[0]
        row = ag.reshape(self.audio_proj(ag.mean(x, axis=1)), (n, 1, -1))
        prompts = ag.broadcast_to(self.prompts, (n,) + self.prompts.shape)
        tokens = ag.concat([prompts, row], axis=1)
        out = self.ffn(self.self_attn(tokens))
        return ag.reshape(out, out.shape[1:]) if squeeze else out

    def __call__(self, audio_feat) -> Tensor:
        return ag.mean(self.unpooled(audio_feat), axis=-2)


class SpeakerEncoder(Module):
    """Mel frames -> per-frame audio features -> speaker SAFPQ -> speaker code."""

    def __init__(self, d_mel: int, d_audio: int, d_model: int, d_k: int, d_out: int,
                 n_prompts: int, ffn_hidden: int, rng: np.random.Generator):
        self.frontend = Linear(d_mel, d_audio, rng)
        self.safpq = SpeakerSAFPQ(d_audio, d_model, d_k, d_out, n_prompts, ffn_hidden, rng)

    def audio_features(self, mel) -> Tensor:
        return ag.tanh(self.frontend(mel))

    def __call__(self, mel) -> Tensor:
        return self.safpq(self.audio_features(mel))


class ContentEncoder(Module):
    """Per-frame two-layer map from mel to continuous content vectors."""

    def __init__(self, d_mel: int, hidden: int, d_con: int, rng: np.random.Generator):
        self.inner = Linear(d_mel, hidden, rng)
        self.outer = Linear(hidden, d_con, rng)

    def __call__(self, mel) -> Tensor:
        return self.outer(ag.tanh(self.inner(mel)))


class Codebook(Module):
    def __init__(self, n_codes: int, d_con: int, rng: np.random.Generator):
        if n_codes < 2:
            raise ConfigurationError(f"codebook needs at least 2 entries, got {n_codes}")
        self.entries = ag.parameter(rng.uniform(-1.0, 1.0, size=(n_codes, d_con)))

    @property
    def size(self) -> int:
        return self.entries.shape[0]


class Quantized(NamedTuple):
    indices: np.ndarray
    quantized: Tensor
    commitment: Tensor
    codebook_loss: Tensor


def nearest_codes(z: np.ndarray, entries: np.ndarray) -> np.ndarray:
    """Index of the closest codeword per row; ties go to the lowest index."""
    flat = z.reshape(-1, z.shape[-1])
    dist = ((flat[:, None, :] - entries[None, :, :]) ** 2).sum(axis=-1)
    return dist.argmin(axis=-1).reshape(z.shape[:-1])


def vq_quantize(z: Tensor, codebook) -> Quantized:
    """Snap each row of ``z`` to its nearest codeword.

    The returned ``quantized`` equals the codewords in the forward pass while
    its gradient goes straight through to ``z``.  ``commitment`` is
    mean ||z - sg(q)||^2; ``codebook_loss`` is mean ||sg(z) - q||^2 and is what
    moves the codebook under gradient descent.
    """
    entries = codebook.entries if isinstance(codebook, Codebook) else codebook
    if not isinstance(entries, Tensor):
        entries = Tensor(np.asarray(entries))
    if entries.ndim != 2 or entries.shape[0] == 0:
        raise ConfigurationError(f"codebook must be a non-empty [K×d] matrix, got {entries.shape}")
    if z.shape[-1] != entries.shape[1]:
        raise DimensionError(f"content dim {z.shape[-1]} != codebook dim {entries.shape[1]}")
    indices = nearest_codes(z.data, entries.data)
    q = ag.take_rows(entries, indices)
    straight = ag.straight_through(z, q.data)
    d = z.shape[-1]
    commitment = ag.mean((z - ag.detach(q)) ** 2) * d
    codebook_loss = ag.mean((ag.detach(z) - q) ** 2) * d
    return Quantized(indices, straight, commitment, codebook_loss)


class CPCPredictor(Module):
    """One bias-free linear predictor per horizon 1..k_steps."""

    def __init__(self, d_con: int, k_steps: int, rng: np.random.Generator):
        if k_steps < 1:
            raise ConfigurationError("k_steps must be at least 1")
        self.steps = [Projection(d_con, d_con, rng) for _ in range(k_steps)]

    @property
    def k_steps(self) -> int:
        return len(self.steps)


def info_nce(scores: Tensor) -> Tensor:
    """InfoNCE with the positive candidate of row i in column i."""
    scores = scores if isinstance(scores, Tensor) else Tensor(np.asarray(scores))
    n = scores.shape[0]
    if scores.ndim != 2 or scores.shape[1] < 2:
        raise ValidationError(f"need at least two candidates per row, got scores {scores.shape}")
    logp = ag.log_softmax(scores, axis=-1)
    diag = ag.getitem(logp, (np.arange(n), np.arange(n)))
    return ag.mean(diag) * -1.0


def cpc_loss(z: Tensor, predictor: CPCPredictor) -> Tensor:
    """Contrastive predictive coding on a pre-quantisation content sequence.

    For horizon k, ``z[t]`` is mapped through the k-th predictor and scored
    against ``z[t+k]`` (positive) and every other target position in the
    batch (negatives).  Horizons are averaged.
    """
    z, _ = _batched(z)
    n, t, d = z.shape
    if t <= predictor.k_steps:
        raise ValidationError(f"sequence length {t} must exceed k_steps={predictor.k_steps}")
    if n * (t - predictor.k_steps) < 2:
        raise ValidationError("cpc needs at least two candidate positions for negatives")
    total = None
    for k, step in enumerate(predictor.steps, start=1):
        anchors = ag.reshape(step(z[:, : t - k, :]), (n * (t - k), d))
        targets = ag.reshape(z[:, k:, :], (n * (t - k), d))
        term = info_nce(ag.matmul(anchors, ag.swapaxes(targets, 0, 1)))
        total = term if total is None else total + term
    return total * (1.0 / predictor.k_steps)


class PitchEmbedding(Module):
    """Learned lookup over equal-width bins of normalised log-F0.

    Values on an edge land in the higher bin; values outside the range are
    clipped to the first/last bin; unvoiced frames use a dedicated row.
    """

    def __init__(self, n_bins: int, d_pitch: int, rng: np.random.Generator, low: float = -3.0, high: float = 3.0):
        if n_bins < 1 or not high > low:
            raise ConfigurationError("pitch bins need n_bins >= 1 and high > low")
        self.low, self.high, self.n_bins = float(low), float(high), int(n_bins)
        self.table = ag.parameter(rng.normal(0.0, 0.5, size=(n_bins, d_pitch)))
        self.unvoiced = ag.parameter(rng.normal(0.0, 0.5, size=(1, d_pitch)))

    @property
    def edges(self) -> np.ndarray:
        return np.linspace(self.low, self.high, self.n_bins + 1)

    def bin_index(self, values) -> np.ndarray:
        values = np.asarray(values, dtype=np.float64)
        idx = np.searchsorted(self.edges, values, side="right") - 1
        return np.clip(idx, 0, self.n_bins - 1)

    def __call__(self, lf0, voiced) -> Tensor:
        lf0 = np.asarray(lf0, dtype=np.float64)
        voiced = np.asarray(voiced, dtype=bool)
        if lf0.shape != voiced.shape:
            raise DimensionError(f"log-F0 shape {lf0.shape} != voiced-flag shape {voiced.shape}")
        safe = np.where(voiced, lf0, 0.0)
        rows = np.where(voiced, self.bin_index(safe), self.n_bins)
        full = ag.concat([self.table, self.unvoiced], axis=0)
        return ag.take_rows(full, rows)


class MelDecoder(Module):
    """Frame-wise 3-layer feed-forward decoder with a residual middle block."""

    def __init__(self, d_spk: int, d_con: int, d_pitch: int, hidden: int, d_mel: int, rng: np.random.Generator):
        self.d_spk, self.d_con, self.d_pitch = d_spk, d_con, d_pitch
        self.input = Linear(d_spk + d_con + d_pitch, hidden, rng)
        self.middle = Linear(hidden, hidden, rng)
        self.output = Linear(hidden, d_mel, rng)

    def __call__(self, spk, con, pitch) -> Tensor:
        con, squeeze = _batched(con)
        pitch, _ = _batched(pitch)
        spk = spk if isinstance(spk, Tensor) else Tensor(np.asarray(spk))
        if spk.ndim == 1:
            spk = ag.reshape(spk, (1, -1))
        if con.shape[:2] != pitch.shape[:2]:
            raise DimensionError(f"content {con.shape} and pitch {pitch.shape} lengths differ")
        if spk.shape[0] != con.shape[0]:
            raise DimensionError(f"{spk.shape[0]} speaker codes for {con.shape[0]} content sequences")
        n, t = con.shape[0], con.shape[1]
        spk_rows = ag.broadcast_to(ag.reshape(spk, (n, 1, spk.shape[-1])), (n, t, spk.shape[-1]))
        x = ag.concat([spk_rows, con, pitch], axis=-1)
        h = ag.tanh(self.input(x))
        h = h + ag.tanh(self.middle(h))
        out = self.output(h)
        return ag.reshape(out, out.shape[1:]) if squeeze else out


class FaceVoiceMap(Module):
    """Soft attention over a learned key/value memory of speaker codes."""

    def __init__(self, d_spk: int, n_slots: int, rng: np.random.Generator):
        # queries arrive unit-normalised; keys of norm ~d_spk give unit-variance scores
        self.keys = ag.parameter(rng.normal(0.0, math.sqrt(d_spk), size=(n_slots, d_spk)))
        # unit-variance entries put slot norms (~sqrt(d_spk)) at the scale speaker codes reach
        self.values = ag.parameter(rng.normal(0.0, 1.0, size=(n_slots, d_spk)))

    def weights(self, f_query) -> Tensor:
        f_query = f_query if isinstance(f_query, Tensor) else Tensor(np.asarray(f_query))
        if f_query.shape[-1] != self.keys.shape[1]:
            raise DimensionError(f"query dim {f_query.shape[-1]} != memory dim {self.keys.shape[1]}")
        scores = ag.matmul(f_query if f_query.ndim > 1 else ag.reshape(f_query, (1, -1)), self.keys.T)
        w = ag.softmax(scores * (1.0 / math.sqrt(self.keys.shape[1])), axis=-1)
        return w if f_query.ndim > 1 else ag.reshape(w, (-1,))

    def __call__(self, f_query) -> Tensor:
        w = self.weights(f_query)
        if w.ndim == 1:
            return ag.reshape(ag.matmul(ag.reshape(w, (1, -1)), self.values), (-1,))
        return ag.matmul(w, self.values)
