"""Inference, face interpolation and evaluation on top of a trained network."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .corpus import Corpus
from .dsp import StftConfig, extract_f0, griffin_lim, mel_spectrogram
from .exceptions import DimensionError, ValidationError
from .metrics import EmbeddingSet, sec, secs, sed
from .network import FaceVCNetwork

REPORT_KEYS = ("secs", "sec", "sed", "n_utterances", "n_speakers")


@dataclass
class Conversion:
    speaker_code: np.ndarray
    mel: np.ndarray  # log-mel, [T × n_mels]
    waveform: np.ndarray | None = None


def _check_faces(net: FaceVCNetwork, face_frames) -> np.ndarray:
    face_frames = np.asarray(face_frames, dtype=np.float32)
    if face_frames.ndim != 2 or face_frames.shape[0] < 1:
        raise ValidationError(f"face frames must be a non-empty [T×D] matrix, got {face_frames.shape}")
    if face_frames.shape[1] != net.config.d_face:
        raise ValidationError(f"face frames have dim {face_frames.shape[1]}, checkpoint expects {net.config.d_face}")
    return face_frames


def face_query(net: FaceVCNetwork, face_frames) -> np.ndarray:
    with ag.no_grad():
        return net.face_query(Tensor(_check_faces(net, face_frames))).data


def speaker_code_from_query(net: FaceVCNetwork, f_query) -> np.ndarray:
    with ag.no_grad():
        return net.face_to_speaker(Tensor(np.asarray(f_query))).data


def speaker_code_from_face(net: FaceVCNetwork, face_frames) -> np.ndarray:
    return speaker_code_from_query(net, face_query(net, face_frames))


def convert_features(net: FaceVCNetwork, speaker_code, source_mel, lf0, voiced) -> np.ndarray:
    """Decode a log-mel from a speaker code and the source's content and pitch."""
    source_mel = np.asarray(source_mel, dtype=np.float32)
    if source_mel.ndim != 2:
        raise DimensionError(f"source mel must be [T×n_mels], got {source_mel.shape}")
    with ag.no_grad():
        mel_norm = net.normalize_mel(source_mel)
        _, vq = net.content(mel_norm)
        out = net.decode(Tensor(np.asarray(speaker_code)), vq.quantized, lf0, voiced)
    return net.denormalize_mel(out)


def source_features(waveform, stft: StftConfig = StftConfig()):
    mel = mel_spectrogram(waveform, stft)
    track = extract_f0(waveform, stft)
    return mel, track.lf0, track.voiced


def infer(net: FaceVCNetwork, face_frames, source_waveform, stft: StftConfig = StftConfig(),
          vocode: bool = True, gl_iters: int = 60, seed: int = 0) -> Conversion:
    """Convert ``source_waveform`` to the voice suggested by ``face_frames``."""
    code = speaker_code_from_face(net, face_frames)
    mel, lf0, voiced = source_features(source_waveform, stft)
    out = convert_features(net, code, mel, lf0, voiced)
    wav = griffin_lim(out, stft, gl_iters, seed) if vocode else None
    return Conversion(code, out, wav)


def blend_queries(query_a, query_b, alpha: float) -> np.ndarray:
    """``(1-alpha)·a + alpha·b``, left unnormalised.

    The face-voice mapping normalises its input, so the endpoints reproduce
    single-face codes bit for bit; normalising here as well would not.
    """
    if not 0.0 <= alpha <= 1.0:
        raise ValidationError(f"alpha must lie in [0, 1], got {alpha}")
    a = np.asarray(query_a, dtype=np.float32)
    b = np.asarray(query_b, dtype=np.float32)
    if a.shape != b.shape:
        raise DimensionError(f"queries differ in shape: {a.shape} vs {b.shape}")
    return np.float32(1.0 - alpha) * a + np.float32(alpha) * b


def interp_faces(net: FaceVCNetwork, face_a, face_b, alpha: float, source_waveform=None,
                 stft: StftConfig = StftConfig(), vocode: bool = False) -> Conversion:
    """Speaker code (and optionally a conversion) for a blend of two faces.

    The blend happens on the queried face features, so at ``alpha`` 0 or 1
    the result is bit-identical to using that face alone.
    """
    qa, qb = face_query(net, face_a), face_query(net, face_b)
    code = speaker_code_from_query(net, blend_queries(qa, qb, alpha))
    if source_waveform is None:
        return Conversion(code, None)
    mel, lf0, voiced = source_features(source_waveform, stft)
    out = convert_features(net, code, mel, lf0, voiced)
    return Conversion(code, out, griffin_lim(out, stft) if vocode else None)


def embed_mels(net: FaceVCNetwork, mels) -> np.ndarray:
    """Speaker-encoder embeddings of log-mels, [N×T×n_mels] -> [N×d_spk]."""
    with ag.no_grad():
        return net.speaker_code(net.normalize_mel(np.asarray(mels))).data


def evaluate(net: FaceVCNetwork, heldout: Corpus, source: Corpus) -> dict:
    """Convert one fixed source utterance with every held-out face.

    The generated mels are re-embedded by the speaker encoder; SEC/SED use
    those embeddings, SECS compares them to embeddings of the held-out
    speakers' real recordings.
    """
    if len(heldout.speaker_ids) < 2:
        raise ValidationError("evaluation needs at least two held-out speakers")
    src_mel, src_lf0, src_voiced = source.mels[0], source.lf0[0], source.voiced[0]
    with ag.no_grad():
        queries = net.face_query(Tensor(heldout.faces)).data
        codes = net.face_to_speaker(Tensor(queries)).data
    n = len(heldout)
    mels = np.stack([convert_features(net, codes[i], src_mel, src_lf0, src_voiced) for i in range(n)])
    gen = EmbeddingSet(embed_mels(net, mels), heldout.speakers)
    ref = EmbeddingSet(embed_mels(net, heldout.mels), heldout.speakers)
    return {
        "secs": secs(gen, ref),
        "sec": sec(gen),
        "sed": sed(gen),
        "n_utterances": n,
        "n_speakers": len(heldout.speaker_ids),
    }


def metrics_from_embeddings(vectors, speakers, kinds) -> dict:
    """Report from a pooled embedding table whose rows are tagged ``gen`` or ``ref``."""
    vectors = np.asarray(vectors)
    speakers = np.asarray(speakers)
    kinds = np.asarray(kinds)
    if not (len(vectors) == len(speakers) == len(kinds)):
        raise ValidationError("embedding rows, speaker labels and kinds must have equal length")
    bad = sorted(set(kinds.tolist()) - {"gen", "ref"})
    if bad:
        raise ValidationError(f"unknown row kinds {bad}; expected 'gen' or 'ref'")
    g, r = kinds == "gen", kinds == "ref"
    gen = EmbeddingSet(vectors[g], speakers[g])
    ref = EmbeddingSet(vectors[r], speakers[r])
    return {"secs": secs(gen, ref), "sec": sec(gen), "sed": sed(gen),
            "n_utterances": int(g.sum()), "n_speakers": len(gen.speaker_ids)}


def write_report(path, report: dict) -> None:
    if set(report) != set(REPORT_KEYS):
        raise ValidationError(f"report keys {sorted(report)} != {sorted(REPORT_KEYS)}")
    Path(path).write_text(json.dumps({k: report[k] for k in REPORT_KEYS}, indent=2) + "\n")
