"""Waveform <-> log-mel conversion, Griffin-Lim inversion and F0 tracking."""

from __future__ import annotations

import math
import wave
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np
from scipy.optimize import nnls

from .exceptions import FormatError, ValidationError


@dataclass(frozen=True)
class StftConfig:
    sample_rate: int = 16000
    fft_size: int = 1024
    window: int = 1024
    hop: int = 256
    n_mels: int = 80
    fmin: float = 0.0
    fmax: float = 8000.0
    log_floor: float = math.log(1e-5)

    def __post_init__(self):
        if self.sample_rate <= 0:
            raise ValidationError("sample_rate must be positive")
        if not 0 < self.hop <= self.window <= self.fft_size:
            raise ValidationError(f"need 0 < hop <= window <= fft_size, got {self.hop}, {self.window}, {self.fft_size}")
        if not 0 <= self.fmin < self.fmax <= self.sample_rate / 2:
            raise ValidationError(f"need 0 <= fmin < fmax <= sample_rate/2, got {self.fmin}, {self.fmax}")
        if self.n_mels < 1:
            raise ValidationError("n_mels must be positive")

    @property
    def amplitude_floor(self) -> float:
        return math.exp(self.log_floor)


def n_frames(length: int, cfg: StftConfig) -> int:
    if length < cfg.window:
        raise ValidationError(f"waveform of {length} samples is shorter than one window ({cfg.window})")
    return 1 + (length - cfg.window) // cfg.hop


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_band_edges(cfg: StftConfig) -> np.ndarray:
    """n_mels + 2 frequencies (Hz): lower edge, centres, upper edge."""
    return mel_to_hz(np.linspace(hz_to_mel(cfg.fmin), hz_to_mel(cfg.fmax), cfg.n_mels + 2))


def mel_band_centers(cfg: StftConfig) -> np.ndarray:
    return mel_band_edges(cfg)[1:-1]


@lru_cache(maxsize=16)
def _filterbank(cfg: StftConfig) -> np.ndarray:
    edges = mel_band_edges(cfg)
    freqs = np.fft.rfftfreq(cfg.fft_size, d=1.0 / cfg.sample_rate)
    lower, center, upper = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (freqs[None, :] - lower) / (center - lower)
    falling = (upper - freqs[None, :]) / (upper - center)
    fb = np.maximum(0.0, np.minimum(rising, falling))
    # a band narrower than the bin spacing can miss every bin; give it its nearest bin
    for row, c in zip(fb, center[:, 0]):
        if not row.any():
            row[np.argmin(np.abs(freqs - c))] = 1.0
    fb.setflags(write=False)
    return fb


def mel_filterbank(cfg: StftConfig) -> np.ndarray:
    """Triangular filters, [n_mels × (fft_size//2 + 1)], peak height 1."""
    return _filterbank(cfg).copy()


@lru_cache(maxsize=16)
def _window(n: int) -> np.ndarray:
    w = np.hanning(n + 1)[:-1]  # periodic Hann
    w.setflags(write=False)
    return w


def _frames(x: np.ndarray, cfg: StftConfig) -> np.ndarray:
    t = n_frames(len(x), cfg)
    idx = np.arange(cfg.window)[None, :] + cfg.hop * np.arange(t)[:, None]
    return x[idx]


def stft(x: np.ndarray, cfg: StftConfig) -> np.ndarray:
    """Complex STFT without centre padding, [T × (fft_size//2 + 1)]."""
    frames = _frames(np.asarray(x, dtype=np.float64), cfg) * _window(cfg.window)
    return np.fft.rfft(frames, n=cfg.fft_size, axis=-1)


def istft(spec: np.ndarray, cfg: StftConfig, length: int | None = None) -> np.ndarray:
    """Weighted overlap-add inverse of :func:`stft`."""
    t = spec.shape[0]
    frames = np.fft.irfft(spec, n=cfg.fft_size, axis=-1)[:, : cfg.window]
    win = _window(cfg.window)
    total = cfg.window + cfg.hop * (t - 1)
    out = np.zeros(total)
    norm = np.zeros(total)
    for i in range(t):
        sl = slice(i * cfg.hop, i * cfg.hop + cfg.window)
        out[sl] += frames[i] * win
        norm[sl] += win * win
    out /= np.maximum(norm, 1e-8)
    if length is not None:
        out = out[:length] if length <= total else np.pad(out, (0, length - total))
    return out


def mel_spectrogram(waveform, cfg: StftConfig = StftConfig(), floor: bool = True) -> np.ndarray:
    """Log-amplitude mel spectrogram, [T × n_mels].

    Hann-windowed STFT magnitude, triangular mel filters, natural log.  With
    ``floor=False`` the log is taken without clamping (used by tests of the
    log-linearity property).
    """
    x = np.asarray(waveform, dtype=np.float64)
    if x.ndim != 1:
        raise ValidationError(f"waveform must be 1-d, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise ValidationError("waveform contains non-finite samples")
    mag = np.abs(stft(x, cfg))
    mel = mag @ _filterbank(cfg).T
    if floor:
        return np.log(np.maximum(mel, cfg.amplitude_floor)).astype(np.float32)
    with np.errstate(divide="ignore"):
        return np.log(mel)


@lru_cache(maxsize=8)
def _sinusoid_atoms(cfg: StftConfig, per_band: int = 4) -> tuple[np.ndarray, np.ndarray]:
    """Windowed-sinusoid magnitude spectra and their mel images.

    Atom frequencies are uniform on the mel scale (``per_band`` per filter
    spacing) but never closer than half an FFT bin.
    """
    bin_hz = cfg.sample_rate / cfg.fft_size
    grid = mel_to_hz(np.linspace(hz_to_mel(cfg.fmin), hz_to_mel(cfg.fmax), per_band * (cfg.n_mels + 1) + 1))
    keep = [grid[0]]
    for f in grid[1:]:
        if f - keep[-1] >= 0.5 * bin_hz:
            keep.append(f)
    freqs = np.asarray(keep) / bin_hz  # in bins
    t = np.arange(cfg.window)
    waves = np.cos(2 * np.pi * freqs[:, None] * t[None, :] / cfg.fft_size) * _window(cfg.window)
    spectra = np.abs(np.fft.rfft(waves, n=cfg.fft_size, axis=-1))
    images = spectra @ _filterbank(cfg).T
    spectra.setflags(write=False)
    images.setflags(write=False)
    return spectra, images


def mel_to_linear(mel: np.ndarray, cfg: StftConfig = StftConfig()) -> np.ndarray:
    """Linear-frequency magnitudes whose mel image matches ``mel``.

    Each frame is explained as a non-negative mixture of windowed sinusoids
    (non-negative least squares), which keeps spectral
    peaks sharper than the filterbank resolution.  Values at or below the
    log floor count as no energy.
    """
    spectra, images = _sinusoid_atoms(cfg)
    mel = np.asarray(mel, dtype=np.float64)
    amp = np.where(mel > cfg.log_floor + 1e-6, np.exp(mel), 0.0)
    out = np.zeros((amp.shape[0], spectra.shape[1]))
    basis = images.T
    for i, row in enumerate(amp):
        if not row.any():
            continue
        weights = nnls(basis, row, maxiter=10 * basis.shape[1])[0]
        out[i] = weights @ spectra
    return out


def griffin_lim(mel, cfg: StftConfig = StftConfig(), iters: int = 60, seed: int = 0) -> np.ndarray:
    """Estimate a waveform whose magnitude spectrum matches ``mel``.

    Starts from seeded random phase and alternates between the consistent
    STFT and the target magnitude.
    """
    if iters < 1:
        raise ValidationError(f"iters must be >= 1, got {iters}")
    mel = np.asarray(mel, dtype=np.float64)
    if mel.ndim != 2 or mel.shape[1] != cfg.n_mels:
        raise ValidationError(f"mel must be [T × {cfg.n_mels}], got {mel.shape}")
    if not np.all(np.isfinite(mel)):
        raise ValidationError("mel contains non-finite values")
    target = mel_to_linear(mel, cfg)
    length = cfg.window + cfg.hop * (mel.shape[0] - 1)
    rng = np.random.default_rng(seed)
    phase = np.exp(2j * np.pi * rng.random(target.shape))
    x = istft(target * phase, cfg, length)
    for _ in range(iters):
        spec = stft(x, cfg)
        phase = np.exp(1j * np.angle(spec))
        x = istft(target * phase, cfg, length)
    return x


def dominant_frequency(x: np.ndarray, sample_rate: int) -> float:
    """Frequency of the largest FFT magnitude, refined by parabolic interpolation."""
    x = np.asarray(x, dtype=np.float64)
    spec = np.abs(np.fft.rfft(x * np.hanning(len(x))))
    k = int(np.argmax(spec[1:])) + 1
    if 0 < k < len(spec) - 1:
        a, b, c = np.log(spec[k - 1 : k + 2] + 1e-30)
        denom = a - 2 * b + c
        k = k + (0.5 * (a - c) / denom if denom != 0 else 0.0)
    return k * sample_rate / len(x)


@dataclass
class PitchTrack:
    f0: np.ndarray  # Hz, 0 where unvoiced
    voiced: np.ndarray
    lf0: np.ndarray  # z-normalised log-F0, 0 where unvoiced


def extract_f0(
    waveform,
    cfg: StftConfig = StftConfig(),
    fmin: float = 60.0,
    fmax: float = 500.0,
    threshold: float = 0.3,
) -> PitchTrack:
    """Frame-wise autocorrelation pitch tracker aligned with the mel frames.

    The candidate lag is the shortest local maximum of the normalised
    autocorrelation within 85% of the best peak in [fmin, fmax]; its position
    is refined by a parabola through the neighbouring lags.
    """
    if cfg.sample_rate < 8000:
        raise ValidationError(f"pitch tracking needs sample_rate >= 8000, got {cfg.sample_rate}")
    x = np.asarray(waveform, dtype=np.float64)
    frames = _frames(x, cfg)
    frames = frames - frames.mean(axis=1, keepdims=True)
    sr, n = cfg.sample_rate, cfg.window
    lag_lo = max(2, int(math.floor(sr / fmax)))
    lag_hi = min(n - 2, int(math.ceil(sr / fmin)))

    nfft = 1 << int(math.ceil(math.log2(2 * n)))
    spec = np.fft.rfft(frames, n=nfft, axis=1)
    acf = np.fft.irfft(np.abs(spec) ** 2, n=nfft, axis=1)[:, : lag_hi + 2]
    # energy of the two overlapping segments for every lag
    csum = np.concatenate([np.zeros((frames.shape[0], 1)), np.cumsum(frames**2, axis=1)], axis=1)
    lags = np.arange(lag_hi + 2)
    head = csum[:, n - lags]
    tail = csum[:, n:n + 1] - csum[:, lags]
    denom = np.sqrt(np.maximum(head * tail, 0.0))
    with np.errstate(divide="ignore", invalid="ignore"):
        nacf = np.where(denom > 1e-12, acf / denom, 0.0)

    f0 = np.zeros(frames.shape[0])
    voiced = np.zeros(frames.shape[0], dtype=bool)
    for i, r in enumerate(nacf):
        window = r[lag_lo : lag_hi + 1]
        inner = np.arange(lag_lo, lag_hi + 1)
        is_peak = (r[inner] >= r[inner - 1]) & (r[inner] >= r[inner + 1])
        if not is_peak.any():
            continue
        best = window[is_peak].max()
        if best <= threshold:
            continue
        lag = int(inner[is_peak & (window >= 0.85 * best)][0])
        a, b, c = r[lag - 1], r[lag], r[lag + 1]
        denom_p = a - 2 * b + c
        shift = 0.5 * (a - c) / denom_p if denom_p < 0 else 0.0
        f0[i] = sr / (lag + shift)
        voiced[i] = True
    return PitchTrack(f0=f0, voiced=voiced, lf0=normalize_log_f0(f0, voiced))


def normalize_log_f0(f0: np.ndarray, voiced: np.ndarray) -> np.ndarray:
    """Per-utterance z-score of log-F0 over voiced frames; 0 elsewhere."""
    out = np.zeros_like(f0, dtype=np.float64)
    if voiced.any():
        logs = np.log(f0[voiced])
        std = logs.std()
        out[voiced] = (logs - logs.mean()) / std if std > 1e-6 else 0.0
    return out


def sine(freq: float, seconds: float, sample_rate: int = 16000, amplitude: float = 0.5) -> np.ndarray:
    t = np.arange(int(round(seconds * sample_rate))) / sample_rate
    return amplitude * np.sin(2 * np.pi * freq * t)


# ---------------------------------------------------------------------------
# WAV files (16-bit PCM, mono)
# ---------------------------------------------------------------------------

def write_wav(path, samples, sample_rate: int) -> None:
    x = np.clip(np.asarray(samples, dtype=np.float64), -1.0, 1.0)
    pcm = np.round(x * 32767.0).astype("<i2")
    with wave.open(str(path), "wb") as w:
        w.setnchannels(1)
        w.setsampwidth(2)
        w.setframerate(int(sample_rate))
        w.writeframes(pcm.tobytes())


def read_wav(path) -> tuple[np.ndarray, int]:
    path = Path(path)
    try:
        with wave.open(str(path), "rb") as w:
            if w.getnchannels() != 1 or w.getsampwidth() != 2:
                raise FormatError("only 16-bit mono PCM WAV is supported", path=path)
            rate = w.getframerate()
            raw = w.readframes(w.getnframes())
    except wave.Error as exc:
        raise FormatError(f"not a readable WAV file: {exc}", path=path) from exc
    return np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32767.0, rate
