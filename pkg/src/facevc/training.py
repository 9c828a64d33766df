"""Training loop: alternate variational-net fitting with steps on the full objective."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autograd as ag
from .autograd import SGD, Adam, Tensor, clip_grad_norm
from .corpus import Corpus
from .exceptions import NumericError, ValidationError
from .losses import (
    PART_NAMES,
    VariationalNet,
    club_mi_upper,
    contrastive_loss,
    fv_mapping_loss,
    id_supervision_loss,
    qnet_nll,
    recon_loss,
    total_loss,
)
from .model import cpc_loss
from .network import FaceVCNetwork

log = logging.getLogger(__name__)

CSV_HEADER = "step,L_rec,L_con,L_MI,L_id-f,L_id-s,L_F,total\n"


@dataclass
class History:
    rows: list = field(default_factory=list)  # (step, epoch, parts dict, total)

    def epoch_means(self) -> dict:
        out: dict[int, list] = {}
        for _, epoch, _, total in self.rows:
            out.setdefault(epoch, []).append(total)
        return {e: float(np.mean(v)) for e, v in sorted(out.items())}


def label_map(speakers) -> dict:
    return {s: i for i, s in enumerate(sorted(set(np.asarray(speakers).tolist())))}


def check_compatible(net: FaceVCNetwork, corpus: Corpus) -> None:
    c = net.config
    if corpus.faces.shape[-1] != c.d_face:
        raise ValidationError(f"corpus faces have dim {corpus.faces.shape[-1]}, config d_face={c.d_face}")
    if corpus.mels.shape[-1] != c.n_mels:
        raise ValidationError(f"corpus mels have {corpus.mels.shape[-1]} bands, config n_mels={c.n_mels}")
    if corpus.mels.shape[1] <= c.cpc_steps:
        raise ValidationError(f"utterances have {corpus.mels.shape[1]} frames, need more than cpc_steps={c.cpc_steps}")


def batch_losses(net: FaceVCNetwork, corpus: Corpus, index: np.ndarray, labels: np.ndarray):
    """Forward one batch; return (weighted loss terms, auxiliary objective, speaker codes, pooled content)."""
    cfg = net.config
    mel = net.normalize_mel(corpus.mels[index])
    faces = Tensor(corpus.faces[index])
    f_query = net.face_query(faces)
    f_spk = net.speaker_code(mel)
    z, vq = net.content(mel)
    mel_hat = net.decode(f_spk, vq.quantized, corpus.lf0[index], corpus.voiced[index])
    pooled = ag.mean(vq.quantized, axis=1)
    parts = {
        "rec": recon_loss(mel, mel_hat),
        "con": contrastive_loss(f_query, f_spk, labels, cfg.tau),
        "mi": club_mi_upper(f_spk, pooled, net.club),
        "id_f": id_supervision_loss(f_query, net.face_head, labels),
        "id_s": id_supervision_loss(f_spk, net.speech_head, labels),
        "F": fv_mapping_loss(net.face_to_speaker(f_query), f_spk, labels, cfg.hinge_margin),
    }
    aux = cpc_loss(z, net.cpc) * cfg.cpc_weight + vq.commitment * cfg.commitment_weight + vq.codebook_loss
    return parts, aux, f_spk, pooled


def fit_variational(net: FaceVCNetwork, opt, spk: np.ndarray, con: np.ndarray, steps: int) -> float:
    spk_t, con_t = Tensor(spk), Tensor(con)
    value = float("nan")
    for _ in range(steps):
        opt.zero_grad()
        nll = qnet_nll(spk_t, con_t, net.club)
        nll.backward()
        opt.step()
        value = nll.item()
    return value


def train_network(net: FaceVCNetwork, corpus: Corpus, log_path=None, checkpoint_dir=None) -> History:
    """Train ``net`` in place on ``corpus`` (its training split).

    Per batch: ``q_steps`` updates of the variational net on detached codes,
    then one SGD step on the weighted objective plus the CPC/VQ terms.  The
    checkpoint (if requested) is rewritten after every epoch and once before
    the first, so zero epochs leaves the initialisation on disk.
    """
    cfg = net.config
    check_compatible(net, corpus)
    mapping = label_map(corpus.speakers)
    if len(mapping) != net.n_speakers:
        raise ValidationError(f"corpus has {len(mapping)} speakers, network was built for {net.n_speakers}")
    labels_all = np.array([mapping[s] for s in corpus.speakers.tolist()])
    net.fit_mel_stats(corpus.mels)

    main_opt = SGD([p for _, p in net.main_parameters()], lr=cfg.lr, momentum=cfg.momentum)
    mi_opt = Adam([p for _, p in net.mi_parameters()], lr=cfg.q_lr)
    rng = np.random.default_rng(cfg.seed + 1)
    history = History()
    log_file = None
    if log_path is not None:
        log_file = Path(log_path).open("w", newline="")
        log_file.write(CSV_HEADER)
    if checkpoint_dir is not None:
        net.save(checkpoint_dir)
    step = 0
    try:
        for epoch in range(1, cfg.epochs + 1):
            order = rng.permutation(len(corpus))
            for start in range(0, len(order), cfg.batch_size):
                index = np.sort(order[start : start + cfg.batch_size])
                labels = labels_all[index]
                with ag.no_grad():
                    spk_now, con_now = batch_codes(net, corpus, index)
                fit_variational(net, mi_opt, spk_now, con_now, cfg.q_steps)

                main_opt.zero_grad()
                mi_opt.zero_grad()
                parts, aux, _, _ = batch_losses(net, corpus, index, labels)
                total = total_loss(parts, cfg.weights)
                objective = total + aux
                if not np.isfinite(objective.data).all():
                    raise NumericError("auxiliary CPC/VQ objective is not finite")
                objective.backward()
                clip_grad_norm(main_opt.params, cfg.clip_norm)
                main_opt.step()
                step += 1
                values = {k: v.item() for k, v in parts.items()}
                history.rows.append((step, epoch, values, total.item()))
                if log_file is not None:
                    cells = [repr(values[k]) for k in PART_NAMES] + [repr(total.item())]
                    log_file.write(f"{step}," + ",".join(cells) + "\n")
            log.info("epoch %d mean total %.4f", epoch, history.epoch_means()[epoch])
            _require_finite_params(net)
            if checkpoint_dir is not None:
                net.save(checkpoint_dir)
    finally:
        if log_file is not None:
            log_file.close()
    return history


def batch_codes(net: FaceVCNetwork, corpus: Corpus, index: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Speaker codes and time-pooled content codes for a batch."""
    mel = net.normalize_mel(corpus.mels[index])
    f_spk = net.speaker_code(mel)
    _, vq = net.content(mel)
    return f_spk.data, ag.mean(vq.quantized, axis=1).data


def _require_finite_params(net: FaceVCNetwork) -> None:
    for name, p in net.named_parameters():
        if not np.all(np.isfinite(p.data)):
            raise NumericError(f"parameter {name!r} became non-finite")


def mi_estimate(net: FaceVCNetwork, corpus: Corpus, steps: int = 1000, lr: float = 1e-2, seed: int = 0) -> float:
    """CLUB estimate between final speaker codes and pooled content codes.

    Both code sets are standardised per dimension (which leaves mutual
    information unchanged), a fresh variational net is fitted on the
    even-indexed utterances and the bound is evaluated on the odd ones, so
    the number reflects neither the co-trained q nor q's own overfitting.
    """
    if len(corpus) < 4:
        raise ValidationError("need at least 4 utterances for a split MI estimate")
    cfg = net.config
    with ag.no_grad():
        spk, con = batch_codes(net, corpus, np.arange(len(corpus)))
    spk = (spk - spk.mean(0)) / np.maximum(spk.std(0), 1e-6)
    con = (con - con.mean(0)) / np.maximum(con.std(0), 1e-6)
    fit, held = np.arange(0, len(corpus), 2), np.arange(1, len(corpus), 2)
    q = VariationalNet(cfg.d_spk, cfg.d_con, cfg.club_hidden, np.random.default_rng(seed))
    opt = Adam([p for _, p in q.named_parameters()], lr=lr)
    spk_t, con_t = Tensor(spk[fit]), Tensor(con[fit])
    for _ in range(steps):
        opt.zero_grad()
        qnet_nll(spk_t, con_t, q).backward()
        opt.step()
    with ag.no_grad():
        return club_mi_upper(Tensor(spk[held]), Tensor(con[held]), q).item()
