"""The full face-to-voice network assembled from the model bodies."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from . import autograd as ag
from .autograd import Linear, Module, Tensor
from .config import TrainConfig, format_config, parse_config_text
from .exceptions import DimensionError, FormatError, ValidationError
from .io import load_tensors, save_tensors
from .losses import VariationalNet
from .model import (
    SAFPQ,
    Codebook,
    ContentEncoder,
    CPCPredictor,
    FaceVoiceMap,
    MelDecoder,
    PitchEmbedding,
    SpeakerEncoder,
    average_face_frames,
    vq_quantize,
)

MI_PREFIX = "club."


class FaceVCNetwork(Module):
    """Every trainable part, plus the mel standardisation buffers."""

    def __init__(self, config: TrainConfig, n_speakers: int):
        if n_speakers < 2:
            raise ValidationError(f"need at least 2 training speakers, got {n_speakers}")
        c = config
        rng = np.random.default_rng(c.seed)
        self.config = c
        self.n_speakers = n_speakers
        self.face_safpq = SAFPQ(c.d_face, c.d_model, c.d_k, c.d_spk, c.n_prompts, c.ffn_hidden, rng)
        self.speaker_encoder = SpeakerEncoder(c.n_mels, c.d_audio, c.d_model, c.d_k, c.d_spk,
                                              c.n_prompts, c.ffn_hidden, rng)
        self.content_encoder = ContentEncoder(c.n_mels, c.content_hidden, c.d_con, rng)
        self.codebook = Codebook(c.n_codes, c.d_con, rng)
        self.cpc = CPCPredictor(c.d_con, c.cpc_steps, rng)
        self.pitch = PitchEmbedding(c.pitch_bins, c.d_pitch, rng)
        self.decoder = MelDecoder(c.d_spk, c.d_con, c.d_pitch, c.decoder_hidden, c.n_mels, rng)
        self.fv_map = FaceVoiceMap(c.d_spk, c.n_slots, rng)
        self.face_head = Linear(c.d_spk, n_speakers, rng)
        self.speech_head = Linear(c.d_spk, n_speakers, rng)
        self.club = VariationalNet(c.d_spk, c.d_con, c.club_hidden, rng)
        self.mel_mean = np.zeros(c.n_mels, dtype=np.float32)
        self.mel_std = np.ones(c.n_mels, dtype=np.float32)

    # -- parameter groups -------------------------------------------------
    def main_parameters(self) -> list[tuple[str, Tensor]]:
        return [(n, p) for n, p in self.named_parameters() if not n.startswith(MI_PREFIX)]

    def mi_parameters(self) -> list[tuple[str, Tensor]]:
        return [(n, p) for n, p in self.named_parameters() if n.startswith(MI_PREFIX)]

    # -- mel scaling ------------------------------------------------------
    def fit_mel_stats(self, mels: np.ndarray) -> None:
        flat = np.asarray(mels, dtype=np.float64).reshape(-1, self.config.n_mels)
        self.mel_mean = flat.mean(axis=0).astype(np.float32)
        self.mel_std = np.maximum(flat.std(axis=0), 1e-3).astype(np.float32)

    def normalize_mel(self, mel) -> Tensor:
        mel = np.asarray(mel, dtype=np.float32)
        if mel.shape[-1] != self.config.n_mels:
            raise DimensionError(f"mel has {mel.shape[-1]} bands, model expects {self.config.n_mels}")
        return Tensor((mel - self.mel_mean) / self.mel_std)

    def denormalize_mel(self, mel_norm) -> np.ndarray:
        data = mel_norm.data if isinstance(mel_norm, Tensor) else np.asarray(mel_norm)
        return (data * self.mel_std + self.mel_mean).astype(np.float32)

    # -- forward pieces ---------------------------------------------------
    def face_query(self, face_frames) -> Tensor:
        """Face frames [T×D] or [N×T×D] -> queried face feature [d] or [N×d]."""
        avg = average_face_frames(face_frames)
        if avg.shape[-1] != self.config.d_face:
            raise DimensionError(f"face embeddings have dim {avg.shape[-1]}, model expects {self.config.d_face}")
        seq = ag.reshape(avg, avg.shape[:-1] + (1, avg.shape[-1]))
        return self.face_safpq(seq)

    def face_to_speaker(self, f_query: Tensor) -> Tensor:
        return self.fv_map(ag.l2_normalize(f_query))

    def speaker_code(self, mel_norm: Tensor) -> Tensor:
        return self.speaker_encoder(mel_norm)

    def content(self, mel_norm: Tensor):
        z = self.content_encoder(mel_norm)
        return z, vq_quantize(z, self.codebook)

    def decode(self, spk: Tensor, content: Tensor, lf0, voiced) -> Tensor:
        return self.decoder(spk, content, self.pitch(lf0, voiced))

    # -- persistence ------------------------------------------------------
    def state(self) -> dict:
        out = {name: p.data for name, p in self.named_parameters()}
        out["buffers.mel_mean"] = self.mel_mean
        out["buffers.mel_std"] = self.mel_std
        return out

    def save(self, directory) -> Path:
        meta = f"n_speakers={self.n_speakers}\n"
        return save_tensors(directory, self.state(), {"config.txt": format_config(self.config), "meta.txt": meta})

    @classmethod
    def load(cls, directory) -> "FaceVCNetwork":
        directory = Path(directory)
        if not directory.is_dir():
            raise FileNotFoundError(f"checkpoint directory {directory} does not exist")
        config = parse_config_text((directory / "config.txt").read_text())
        meta = dict(line.split("=", 1) for line in (directory / "meta.txt").read_text().split())
        net = cls(config, int(meta["n_speakers"]))
        tensors = load_tensors(directory)
        params = dict(net.named_parameters())
        expected = set(params) | {"buffers.mel_mean", "buffers.mel_std"}
        if set(tensors) != expected:
            missing, extra = sorted(expected - set(tensors)), sorted(set(tensors) - expected)
            raise FormatError(f"checkpoint tensors do not match the model: missing {missing}, unexpected {extra}",
                              path=directory)
        for name, param in params.items():
            if tensors[name].shape != param.shape:
                raise FormatError(f"tensor {name!r} has shape {tensors[name].shape}, model wants {param.shape}",
                                  path=directory)
            param.data = tensors[name].copy()
        net.mel_mean = tensors["buffers.mel_mean"].copy()
        net.mel_std = tensors["buffers.mel_std"].copy()
        return net
