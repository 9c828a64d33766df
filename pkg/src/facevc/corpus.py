"""Synthetic paired face/voice corpus.

Each speaker owns a random "timbre anchor" vector.  Face frames are the
anchor plus per-frame Gaussian nuisance.  Audio is a harmonic tone stack:
base F0 and spectral tilt are fixed functions of the anchor (speaker
identity), while each word of the transcript imposes its own two-formant
envelope (content).  Everything is a deterministic function of the seed.

On-disk layout::

    corpus.txt          key=value generation parameters
    utterances.csv      utt_id,speaker,transcript
    anchors.idfv        [K × D_face]
    faces/<utt>.idfv    [frames × D_face]
    wavs/<utt>.wav      16-bit mono PCM
"""

from __future__ import annotations

import csv
import io as _io
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dsp import StftConfig, extract_f0, mel_spectrogram, read_wav, write_wav
from .exceptions import FormatError, ValidationError
from .io import read_idfv, write_idfv

VOCAB_SIZE = 32
FACE_NOISE = 0.3
MAX_ANCHOR_COSINE = 0.5


@dataclass(frozen=True)
class CorpusSpec:
    seed: int = 0
    n_speakers: int = 4
    utts_per_speaker: int = 10
    face_frames: int = 8
    d_face: int = 64
    seconds: float = 0.75
    sample_rate: int = 16000

    def __post_init__(self):
        if self.n_speakers < 2:
            raise ValidationError(f"need at least 2 speakers, got {self.n_speakers}")
        if self.utts_per_speaker < 1:
            raise ValidationError(f"need at least 1 utterance per speaker, got {self.utts_per_speaker}")
        if self.face_frames < 1 or self.d_face < 2:
            raise ValidationError("face_frames must be >= 1 and d_face >= 2")
        if self.seconds * self.sample_rate < StftConfig().window:
            raise ValidationError("utterances must be at least one analysis window long")


def sample_anchors(rng: np.random.Generator, k: int, d: int, max_cos: float = MAX_ANCHOR_COSINE,
                   max_tries: int = 1000) -> np.ndarray:
    """Standard-normal anchors, each redrawn until its cosine to all earlier ones is below ``max_cos``."""
    anchors = []
    for _ in range(k):
        for _ in range(max_tries):
            cand = rng.standard_normal(d)
            unit = cand / np.linalg.norm(cand)
            if all(abs(unit @ a) / np.linalg.norm(a) < max_cos for a in anchors):
                anchors.append(cand)
                break
        else:
            raise ValidationError(f"could not draw {k} anchors with pairwise cosine < {max_cos} in {d} dims")
    return np.stack(anchors)


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


@dataclass(frozen=True)
class Voice:
    f0: float
    tilt_db_per_octave: float


def voice_of(anchor: np.ndarray, directions: np.ndarray) -> Voice:
    """Base F0 (Hz) and spectral tilt as smooth functions of the anchor."""
    s = directions @ anchor
    return Voice(f0=float(90.0 + 170.0 * _sigmoid(1.5 * s[0])),
                 tilt_db_per_octave=float(-2.0 - 10.0 * _sigmoid(1.5 * s[1])))


def _vocabulary(rng: np.random.Generator) -> tuple[list[str], np.ndarray]:
    syll = ["ka", "lo", "mi", "tu", "re", "sa", "no", "vi"]
    words = [syll[i // 8] + syll[i % 8] for i in range(VOCAB_SIZE)]
    f1 = rng.uniform(300.0, 900.0, VOCAB_SIZE)
    f2 = rng.uniform(1000.0, 2800.0, VOCAB_SIZE)
    return words, np.stack([f1, f2], axis=1)


def synth_waveform(voice: Voice, formants: np.ndarray, rng: np.random.Generator,
                   seconds: float, sample_rate: int) -> np.ndarray:
    n = int(round(seconds * sample_rate))
    t = np.arange(n) / sample_rate
    # slow intonation contour: declination plus a random-phase wobble
    contour = 1.0 + 0.06 * np.sin(2 * np.pi * rng.uniform(1.5, 3.5) * t + rng.uniform(0, 2 * np.pi)) - 0.05 * t / seconds
    f0 = voice.f0 * contour
    phase = 2 * np.pi * np.cumsum(f0) / sample_rate
    n_harm = int((sample_rate / 2 - 200) // (voice.f0 * 1.1))
    h = np.arange(1, n_harm + 1)
    segment = np.minimum((np.arange(n) * len(formants)) // n, len(formants) - 1)
    out = np.zeros(n)
    octaves = np.log2(h)
    tilt = 10 ** (voice.tilt_db_per_octave * octaves / 20.0)
    for k, (fa, fb) in enumerate(formants):
        idx = np.nonzero(segment == k)[0]
        freqs = h[:, None] * f0[None, idx]
        envelope = 1.0 + 4.0 * np.exp(-0.5 * ((freqs - fa) / 120.0) ** 2) + 3.0 * np.exp(-0.5 * ((freqs - fb) / 180.0) ** 2)
        amps = tilt[:, None] * envelope * (freqs < sample_rate / 2 - 100)
        out[idx] = (amps * np.sin(h[:, None] * phase[None, idx])).sum(axis=0)
    # 10 ms fades at word boundaries keep the segments click-free
    ramp = int(0.01 * sample_rate)
    gain = np.ones(n)
    for k in range(len(formants) + 1):
        edge = min(n - 1, (k * n) // len(formants))
        lo, hi = max(0, edge - ramp), min(n, edge + ramp)
        gain[lo:hi] = np.minimum(gain[lo:hi], np.abs(np.arange(lo, hi) - edge) / ramp)
    out = out * (0.25 + 0.75 * gain)
    out += 0.003 * rng.standard_normal(n) * np.abs(out).max()
    return 0.5 * out / np.abs(out).max()


def synth_corpus(out_dir, spec: CorpusSpec = CorpusSpec()) -> Path:
    """Generate the corpus under ``out_dir`` (created if needed)."""
    out = Path(out_dir)
    (out / "faces").mkdir(parents=True, exist_ok=True)
    (out / "wavs").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(spec.seed)
    anchors = sample_anchors(rng, spec.n_speakers, spec.d_face)
    directions = rng.standard_normal((2, spec.d_face))
    directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    words, formants = _vocabulary(rng)

    rows = []
    for spk in range(spec.n_speakers):
        voice = voice_of(anchors[spk], directions)
        for j in range(spec.utts_per_speaker):
            utt = f"s{spk:03d}_u{j:04d}"
            n_words = int(rng.integers(3, 5))
            chosen = rng.integers(0, VOCAB_SIZE, n_words)
            face = anchors[spk] + FACE_NOISE * rng.standard_normal((spec.face_frames, spec.d_face))
            wav = synth_waveform(voice, formants[chosen], rng, spec.seconds, spec.sample_rate)
            write_idfv(out / "faces" / f"{utt}.idfv", face)
            write_wav(out / "wavs" / f"{utt}.wav", wav, spec.sample_rate)
            rows.append((utt, spk, " ".join(words[c] for c in chosen)))

    write_idfv(out / "anchors.idfv", anchors)
    buf = _io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["utt_id", "speaker", "transcript"])
    writer.writerows(rows)
    (out / "utterances.csv").write_text(buf.getvalue())
    meta = {"seed": spec.seed, "n_speakers": spec.n_speakers, "utts_per_speaker": spec.utts_per_speaker,
            "face_frames": spec.face_frames, "d_face": spec.d_face, "seconds": spec.seconds,
            "sample_rate": spec.sample_rate}
    (out / "corpus.txt").write_text("".join(f"{k}={v}\n" for k, v in meta.items()))
    return out


@dataclass
class Corpus:
    utt_ids: list
    speakers: np.ndarray  # [N] int
    transcripts: list
    faces: np.ndarray  # [N × frames × D_face]
    waveforms: list
    mels: np.ndarray  # [N × T × n_mels]
    lf0: np.ndarray  # [N × T]
    voiced: np.ndarray  # [N × T]
    anchors: np.ndarray
    sample_rate: int
    root: Path | None = None
    stft: StftConfig = field(default_factory=StftConfig)

    def __len__(self) -> int:
        return len(self.utt_ids)

    @property
    def speaker_ids(self) -> list:
        return sorted(set(self.speakers.tolist()))

    def subset(self, index) -> "Corpus":
        index = np.asarray(index, dtype=np.int64)
        return Corpus(
            utt_ids=[self.utt_ids[i] for i in index],
            speakers=self.speakers[index],
            transcripts=[self.transcripts[i] for i in index],
            faces=self.faces[index],
            waveforms=[self.waveforms[i] for i in index],
            mels=self.mels[index],
            lf0=self.lf0[index],
            voiced=self.voiced[index],
            anchors=self.anchors,
            sample_rate=self.sample_rate,
            root=self.root,
            stft=self.stft,
        )

    def split_heldout(self, fraction: float) -> tuple["Corpus", "Corpus"]:
        """Speaker-disjoint split: the last speakers go to the held-out side.

        At least two speakers are kept on each side, since training needs two
        classes and diversity metrics need two speakers.
        """
        ids = self.speaker_ids
        n_out = max(2, int(np.ceil(fraction * len(ids))))
        if len(ids) - n_out < 2:
            raise ValidationError(f"{len(ids)} speakers cannot be split into >= 2 training and >= 2 held-out speakers")
        held = set(ids[-n_out:])
        mask = np.array([s in held for s in self.speakers.tolist()])
        return self.subset(np.nonzero(~mask)[0]), self.subset(np.nonzero(mask)[0])


def load_corpus(root, stft: StftConfig = StftConfig()) -> Corpus:
    root = Path(root)
    meta_path = root / "utterances.csv"
    if not meta_path.is_file():
        raise FileNotFoundError(f"{root} is not a corpus directory (missing utterances.csv)")
    with meta_path.open(newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != ["utt_id", "speaker", "transcript"]:
            raise FormatError(f"unexpected columns {reader.fieldnames}", path=meta_path)
        rows = list(reader)
    if not rows:
        raise ValidationError(f"corpus {root} has no utterances")
    anchors = read_idfv(root / "anchors.idfv")
    faces, waves, mels, lf0s, voiced = [], [], [], [], []
    rate = None
    for row in rows:
        face = read_idfv(root / "faces" / f"{row['utt_id']}.idfv")
        wav, sr = read_wav(root / "wavs" / f"{row['utt_id']}.wav")
        if sr != stft.sample_rate:
            raise ValidationError(f"{row['utt_id']}: sample rate {sr} != {stft.sample_rate}")
        rate = sr
        track = extract_f0(wav, stft)
        faces.append(face)
        waves.append(wav)
        mels.append(mel_spectrogram(wav, stft))
        lf0s.append(track.lf0)
        voiced.append(track.voiced)
    try:
        stacked = (np.stack(faces), np.stack(mels), np.stack(lf0s), np.stack(voiced))
    except ValueError as exc:
        raise ValidationError("utterances in a corpus must share face-frame count and duration") from exc
    speakers = np.array([int(r["speaker"]) for r in rows])
    if speakers.min() < 0 or speakers.max() >= anchors.shape[0]:
        raise ValidationError("utterance references a speaker without an anchor")
    return Corpus(
        utt_ids=[r["utt_id"] for r in rows],
        speakers=speakers,
        transcripts=[r["transcript"].split() for r in rows],
        faces=stacked[0],
        waveforms=waves,
        mels=stacked[1],
        lf0=stacked[2].astype(np.float32),
        voiced=stacked[3],
        anchors=anchors,
        sample_rate=rate,
        root=root,
        stft=stft,
    )
