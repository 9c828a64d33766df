"""Command-line entry point.

Exit codes: 0 success, 2 validation error, 3 I/O error, 4 numeric error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import pipeline
from .config import TrainConfig, load_config
from .corpus import CorpusSpec, load_corpus, synth_corpus
from .dsp import StftConfig, mel_spectrogram, read_wav, write_wav
from .exceptions import FormatError, NumericError, ValidationError
from .io import read_idfv, write_idfv
from .network import FaceVCNetwork
from .training import label_map, train_network

log = logging.getLogger("facevc")

EXIT_OK, EXIT_VALIDATION, EXIT_IO, EXIT_NUMERIC = 0, 2, 3, 4


def _out_dir(path) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _face(path) -> np.ndarray:
    face = read_idfv(path)
    if face.ndim != 2:
        raise ValidationError(f"{path}: face file must hold a [frames × D] matrix, got shape {face.shape}")
    return face


def cmd_synth_data(args) -> None:
    spec = CorpusSpec(seed=args.seed, n_speakers=args.speakers, utts_per_speaker=args.utterances,
                      face_frames=args.frames, d_face=args.d_face, seconds=args.seconds)
    root = synth_corpus(args.out, spec)
    print(f"wrote {spec.n_speakers * spec.utts_per_speaker} utterances to {root}")


def cmd_train(args) -> None:
    cfg = load_config(args.config) if args.config else TrainConfig()
    if args.seed is not None:
        cfg = cfg.replace(seed=args.seed)
    corpus = load_corpus(args.corpus)
    train, held = corpus.split_heldout(cfg.heldout_fraction)
    log.info("training on speakers %s, holding out %s", train.speaker_ids, held.speaker_ids)
    out = _out_dir(args.out)
    net = FaceVCNetwork(cfg, len(label_map(train.speakers)))
    history = train_network(net, train, log_path=out / "loss.csv", checkpoint_dir=out / "checkpoint")
    means = history.epoch_means()
    if means:
        first, last = means[min(means)], means[max(means)]
        print(f"epoch 1 mean total {first:.4f}, final epoch mean {last:.4f}")
    print(f"checkpoint: {out / 'checkpoint'}")


def cmd_infer(args) -> None:
    net = FaceVCNetwork.load(args.checkpoint)
    wav, rate = read_wav(args.source)
    stft = StftConfig()
    if rate != stft.sample_rate:
        raise ValidationError(f"{args.source}: sample rate {rate}, expected {stft.sample_rate}")
    result = pipeline.infer(net, _face(args.face), wav, stft, vocode=not args.no_vocode,
                            gl_iters=args.gl_iters, seed=args.seed)
    out = _out_dir(args.out)
    write_idfv(out / "mel.idfv", result.mel)
    write_idfv(out / "speaker_code.idfv", result.speaker_code)
    if result.waveform is not None:
        write_wav(out / "converted.wav", result.waveform, stft.sample_rate)
    print(f"wrote {result.mel.shape[0]} mel frames to {out}")


def cmd_interp(args) -> None:
    net = FaceVCNetwork.load(args.checkpoint)
    source = None
    if args.source:
        source, rate = read_wav(args.source)
        if rate != StftConfig().sample_rate:
            raise ValidationError(f"{args.source}: sample rate {rate}, expected {StftConfig().sample_rate}")
    result = pipeline.interp_faces(net, _face(args.face_a), _face(args.face_b), args.alpha, source,
                                   vocode=args.vocode)
    out = _out_dir(args.out)
    write_idfv(out / "speaker_code.idfv", result.speaker_code)
    if result.mel is not None:
        write_idfv(out / "mel.idfv", result.mel)
    if result.waveform is not None:
        write_wav(out / "converted.wav", result.waveform, StftConfig().sample_rate)
    print(f"alpha={args.alpha}: wrote speaker code to {out}")


def _read_labels(path) -> tuple[list, list]:
    with Path(path).open(newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != ["row", "speaker", "kind"]:
            raise FormatError(f"expected columns row,speaker,kind, got {reader.fieldnames}", path=path)
        rows = list(reader)
    try:
        order = [int(r["row"]) for r in rows]
    except ValueError as exc:
        raise FormatError("row column must hold integers", path=path) from exc
    if sorted(order) != list(range(len(rows))):
        raise ValidationError(f"{path}: rows must number 0..{len(rows) - 1} exactly once")
    by_row = {int(r["row"]): r for r in rows}
    return [by_row[i]["speaker"] for i in range(len(rows))], [by_row[i]["kind"] for i in range(len(rows))]


def cmd_eval(args) -> None:
    if args.embeddings:
        if not args.labels:
            raise ValidationError("--embeddings needs --labels")
        vectors = read_idfv(args.embeddings)
        if vectors.ndim != 2:
            raise ValidationError(f"embedding table must be 2-D, got shape {vectors.shape}")
        speakers, kinds = _read_labels(args.labels)
        report = pipeline.metrics_from_embeddings(vectors, speakers, kinds)
    else:
        if not (args.checkpoint and args.corpus):
            raise ValidationError("eval needs --checkpoint and --corpus, or --embeddings and --labels")
        net = FaceVCNetwork.load(args.checkpoint)
        train, held = load_corpus(args.corpus).split_heldout(net.config.heldout_fraction)
        report = pipeline.evaluate(net, held, train)
    for key in ("secs", "sec", "sed"):
        if not np.isfinite(report[key]):
            raise NumericError(f"metric {key} is not finite")
    out = _out_dir(args.out)
    pipeline.write_report(out / "report.json", report)
    print(json.dumps(report))


def cmd_export_mel_csv(args) -> None:
    src = Path(args.input)
    if src.suffix.lower() == ".wav":
        wav, rate = read_wav(src)
        if rate != StftConfig().sample_rate:
            raise ValidationError(f"{src}: sample rate {rate}, expected {StftConfig().sample_rate}")
        mel = mel_spectrogram(wav)
    else:
        mel = read_idfv(src)
    if mel.ndim != 2:
        raise ValidationError(f"mel must be [frames × bands], got shape {mel.shape}")
    out = _out_dir(args.out) / (src.stem + "_mel.csv")
    with out.open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["frame"] + [f"mel_{b}" for b in range(mel.shape[1])])
        for t, row in enumerate(mel):
            writer.writerow([t] + [repr(float(v)) for v in row])
    print(f"wrote {out}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="facevc", description="Face-conditioned voice conversion toolkit.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-data", help="generate a synthetic paired face/voice corpus")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--speakers", type=int, default=4)
    p.add_argument("--utterances", type=int, default=50, help="utterances per speaker")
    p.add_argument("--frames", type=int, default=8, help="face frames per utterance")
    p.add_argument("--d-face", type=int, default=64)
    p.add_argument("--seconds", type=float, default=0.75)
    p.set_defaults(func=cmd_synth_data)

    p = sub.add_parser("train", help="train on the non-held-out speakers of a corpus")
    p.add_argument("--corpus", required=True)
    p.add_argument("--config")
    p.add_argument("--seed", type=int, help="overrides the config seed")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="convert a source waveform to the voice of a face")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--face", required=True, help="IDFV face frames [frames × D]")
    p.add_argument("--source", required=True, help="16 kHz mono WAV")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0, help="phase initialisation seed")
    p.add_argument("--gl-iters", type=int, default=60)
    p.add_argument("--no-vocode", action="store_true", help="skip waveform reconstruction")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("interp", help="speaker code for a blend of two faces")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--face-a", required=True)
    p.add_argument("--face-b", required=True)
    p.add_argument("--alpha", type=float, required=True)
    p.add_argument("--source", help="optional WAV to convert with the blended code")
    p.add_argument("--vocode", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_interp)

    p = sub.add_parser("eval", help="SECS/SEC/SED report on held-out speakers")
    p.add_argument("--checkpoint")
    p.add_argument("--corpus")
    p.add_argument("--embeddings", help="IDFV [N × d] embedding table instead of a checkpoint")
    p.add_argument("--labels", help="CSV row,speaker,kind (kind is gen or ref)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("export-mel-csv", help="write a log-mel (IDFV or WAV input) as CSV")
    p.add_argument("input")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_export_mel_csv)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
