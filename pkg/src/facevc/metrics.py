"""Speaker-similarity metrics and edit-distance error rates."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .exceptions import ValidationError

_MIN_NORM = 1e-9


@dataclass
class EmbeddingSet:
    vectors: np.ndarray  # [N × d]
    speakers: np.ndarray  # [N]

    def __post_init__(self):
        self.vectors = np.asarray(self.vectors, dtype=np.float64)
        self.speakers = np.asarray(self.speakers)
        if self.vectors.ndim != 2:
            raise ValidationError(f"embeddings must be [N×d], got {self.vectors.shape}")
        if self.speakers.shape != (self.vectors.shape[0],):
            raise ValidationError(f"{self.speakers.shape[0]} speaker ids for {self.vectors.shape[0]} embeddings")
        norms = np.linalg.norm(self.vectors, axis=1)
        if np.any(norms <= _MIN_NORM):
            raise ValidationError("embedding with (near-)zero norm cannot be compared by cosine")

    def unit(self) -> np.ndarray:
        return self.vectors / np.linalg.norm(self.vectors, axis=1, keepdims=True)

    @property
    def speaker_ids(self) -> list:
        return sorted(set(self.speakers.tolist()))


def cosine(a, b) -> float:
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na <= _MIN_NORM or nb <= _MIN_NORM:
        raise ValidationError("cosine similarity is undefined for a zero vector")
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def secs(gen: EmbeddingSet, ref: EmbeddingSet) -> float:
    """Mean cosine between each generated embedding and its speaker's mean reference."""
    centroids = {}
    for spk in gen.speaker_ids:
        rows = ref.vectors[ref.speakers == spk]
        if rows.shape[0] == 0:
            raise ValidationError(f"no reference embeddings for speaker {spk!r}")
        centroids[spk] = rows.mean(axis=0)
    return float(np.mean([cosine(v, centroids[s]) for v, s in zip(gen.vectors, gen.speakers.tolist())]))


def _pair_cosines(es: EmbeddingSet, same: bool) -> np.ndarray:
    u = es.unit()
    sims = u @ u.T
    i, j = np.triu_indices(len(u), k=1)
    match = es.speakers[i] == es.speakers[j]
    return np.clip(sims[i, j][match if same else ~match], -1.0, 1.0)


def sec(es: EmbeddingSet) -> float:
    """Consistency: mean cosine over all same-speaker pairs."""
    values = _pair_cosines(es, same=True)
    if values.size == 0:
        raise ValidationError("SEC needs at least one speaker with two embeddings")
    return float(values.mean())


def sed(es: EmbeddingSet) -> float:
    """Diversity: mean cosine over all cross-speaker pairs (lower is more diverse)."""
    if len(es.speaker_ids) < 2:
        raise ValidationError("SED needs embeddings from at least two speakers")
    return float(_pair_cosines(es, same=False).mean())


def levenshtein(ref: Sequence, hyp: Sequence) -> int:
    """Unit-cost edit distance with a rolling row."""
    prev = list(range(len(hyp) + 1))
    for i, r in enumerate(ref, start=1):
        cur = [i] + [0] * len(hyp)
        for j, h in enumerate(hyp, start=1):
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (r != h))
        prev = cur
    return prev[-1]


def edit_error_rate(ref: Sequence[str], hyp: Sequence[str]) -> float:
    if len(ref) == 0:
        raise ValidationError("reference sequence must be non-empty")
    return levenshtein(ref, hyp) / len(ref)


def wer(ref: str, hyp: str) -> float:
    return edit_error_rate(ref.split(), hyp.split())


def cer(ref: str, hyp: str) -> float:
    return edit_error_rate(list(ref), list(hyp))
