import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from facevc import autograd as ag
from facevc.autograd import Adam, Linear, Tensor, grad_check
from facevc.exceptions import DimensionError, NumericError, ValidationError
from facevc.losses import (
    LOG_2PI,
    PART_NAMES,
    LossWeights,
    VariationalNet,
    club_mi_upper,
    contrastive_loss,
    fv_mapping_loss,
    id_supervision_loss,
    qnet_nll,
    recon_loss,
    total_loss,
)


class FixedGaussian:
    """q(con | spk) = N(spk, exp(logvar)), no parameters."""

    def __init__(self, logvar=0.0):
        self.logvar = logvar

    def __call__(self, spk):
        spk = spk if isinstance(spk, Tensor) else Tensor(np.asarray(spk))
        return spk, Tensor(np.full(spk.shape, self.logvar, dtype=spk.dtype))


def club_oracle(spk, con, q):
    """Direct double summation of the log-ratio bound."""
    mu, logvar = (t.data.astype(np.float64) for t in q(Tensor(spk)))
    n = len(spk)

    def logq(c, i):
        return float(np.sum(-0.5 * ((c - mu[i]) ** 2 / np.exp(logvar[i]) + logvar[i] + LOG_2PI)))

    total = 0.0
    for i in range(n):
        for j in range(n):
            total += logq(con[i], i) - logq(con[j], i)
    return total / n**2


# -- contrastive ---------------------------------------------------------------

def test_contrastive_single_sample_is_zero():
    assert contrastive_loss(np.ones((1, 3)), np.ones((1, 3)), [0]).item() == pytest.approx(0.0, abs=1e-7)


def test_contrastive_equal_similarities_give_log_n():
    n = 5
    face = np.tile([1.0, 0.0], (n, 1))
    assert contrastive_loss(face, face, np.arange(n), tau=0.5).item() == pytest.approx(math.log(n), abs=1e-6)


def test_contrastive_two_speaker_closed_form():
    eye = np.eye(2)
    loss = contrastive_loss(eye, eye, [0, 1], tau=1.0).item()
    assert loss == pytest.approx(math.log(1 + math.exp(-1)), abs=1e-6)
    assert loss == pytest.approx(0.3133, abs=1e-4)


def test_contrastive_uses_cosine():
    rng = np.random.default_rng(0)
    face, speech = rng.normal(size=(4, 3)), rng.normal(size=(4, 3))
    scaled = contrastive_loss(face * 7.0, speech * 0.1, [0, 1, 0, 2]).item()
    assert scaled == pytest.approx(contrastive_loss(face, speech, [0, 1, 0, 2]).item(), rel=1e-5)


def test_contrastive_rejects_bad_tau_and_shapes():
    with pytest.raises(ValidationError):
        contrastive_loss(np.ones((2, 2)), np.ones((2, 2)), [0, 1], tau=0.0)
    with pytest.raises(DimensionError):
        contrastive_loss(np.ones((2, 2)), np.ones((3, 2)), [0, 1])
    with pytest.raises(DimensionError):
        contrastive_loss(np.ones((2, 2)), np.ones((2, 2)), [0, 1, 2])


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_contrastive_joint_permutation_invariance(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(2, 9))
    face, speech = rng.normal(size=(n, 4)), rng.normal(size=(n, 4))
    labels = rng.integers(0, 3, size=n)
    perm = rng.permutation(n)
    a = contrastive_loss(face, speech, labels).item()
    b = contrastive_loss(face[perm], speech[perm], labels[perm]).item()
    assert a == pytest.approx(b, rel=1e-5, abs=1e-6)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.integers(2, 6))
def test_contrastive_decreases_as_positive_similarity_rises(seed, n):
    # orthonormal speech rows; face[0] trades its off-basis component for e_0,
    # so sim(0,0) rises while every other similarity stays fixed
    rng = np.random.default_rng(seed)
    speech = np.eye(n + 1)[:n]
    face = rng.normal(size=(n, n + 1))
    off = rng.uniform(-0.3, 0.3, size=n - 1)
    labels = np.arange(n)
    losses = []
    for a in (0.1, 0.4, 0.7):
        c = math.sqrt(1.0 - a**2 - float(off @ off))
        face[0] = np.concatenate([[a], off, [c]])
        losses.append(contrastive_loss(face, speech, labels).item())
    assert losses[0] > losses[1] > losses[2]


def test_contrastive_gradients():
    rng = np.random.default_rng(1)
    face, speech = ag.parameter(rng.normal(size=(5, 4))), ag.parameter(rng.normal(size=(5, 4)))
    labels = [0, 1, 0, 2, 1]
    assert grad_check(lambda: contrastive_loss(face, speech, labels), [face, speech]) < 1e-3


# -- speaker-id supervision ----------------------------------------------------

def head_with(weight, bias=None):
    weight = np.asarray(weight, dtype=np.float32)
    head = Linear(weight.shape[0], weight.shape[1], np.random.default_rng(0))
    head.weight.data = weight
    if bias is not None:
        head.bias.data = np.asarray(bias, dtype=np.float32)
    return head


def test_id_uniform_eight_classes():
    loss = id_supervision_loss(np.ones((3, 4)), head_with(np.zeros((4, 8))), [0, 5, 7]).item()
    assert loss == pytest.approx(math.log(8), abs=1e-6)
    assert loss == pytest.approx(2.0794, abs=1e-4)


def test_id_saturated():
    head = head_with(np.eye(3) * 30.0)
    assert id_supervision_loss(np.eye(3), head, [0, 1, 2]).item() < 1e-10


def test_id_closed_form():
    loss = id_supervision_loss([[2.0, 0.0]], head_with(np.eye(2)), [0]).item()
    assert loss == pytest.approx(-math.log(math.exp(2) / (math.exp(2) + 1)), abs=1e-6)


def test_id_label_and_class_checks():
    with pytest.raises(ValidationError):
        id_supervision_loss(np.ones((1, 2)), head_with(np.eye(2)), [2])
    with pytest.raises(ValidationError):
        id_supervision_loss(np.ones((1, 2)), head_with(np.ones((2, 1))), [0])


def test_id_gradients():
    rng = np.random.default_rng(2)
    head = Linear(4, 3, rng)
    x = ag.parameter(rng.normal(size=(6, 4)))
    assert grad_check(lambda: id_supervision_loss(x, head, [0, 1, 2, 2, 1, 0]), list(head.parameters()) + [x]) < 1e-3


# -- CLUB ----------------------------------------------------------------------

def test_club_single_sample_is_zero():
    assert club_mi_upper([[0.3]], [[1.2]], FixedGaussian()).item() == 0.0


def test_club_independent_q_is_exactly_zero():
    rng = np.random.default_rng(3)
    q = VariationalNet(3, 2, 5, rng)
    q.mean_inner.weight.data[:] = 0.0
    q.logvar_inner.weight.data[:] = 0.0
    assert club_mi_upper(rng.normal(size=(6, 3)), rng.normal(size=(6, 2)), q).item() == pytest.approx(0.0, abs=1e-6)


def test_club_two_point_example():
    spk = np.array([[0.0], [1.0]])
    value = club_mi_upper(spk, spk.copy(), FixedGaussian()).item()
    # matched pairs have zero distance, the two mismatched ones distance 1: (1/4)(0.5 + 0.5)
    assert value == pytest.approx(0.25, abs=1e-7)
    assert value == pytest.approx(club_oracle(spk, spk, FixedGaussian()), abs=1e-9)


@pytest.mark.parametrize("n", [1, 2, 7, 32])
def test_club_matches_double_loop(n):
    rng = np.random.default_rng(n)
    q = VariationalNet(3, 2, 8, rng)
    spk, con = rng.normal(size=(n, 3)), rng.normal(size=(n, 2))
    assert club_mi_upper(spk, con, q).item() == pytest.approx(club_oracle(spk, con, q), abs=1e-5)


def test_club_gradients():
    rng = np.random.default_rng(4)
    q = VariationalNet(3, 2, 6, rng)
    spk, con = ag.parameter(rng.normal(size=(5, 3))), ag.parameter(rng.normal(size=(5, 2)))
    assert grad_check(lambda: club_mi_upper(spk, con, q), list(q.parameters()) + [spk, con]) < 1e-3


def test_club_separates_dependent_from_shuffled_pairs():
    rng = np.random.default_rng(5)
    spk = rng.normal(size=(200, 1))
    con = spk + rng.normal(scale=0.2, size=(200, 1))
    q = VariationalNet(1, 1, 16, rng)
    opt = Adam(q.parameters(), lr=0.02)
    for _ in range(300):
        opt.zero_grad()
        qnet_nll(spk, con, q).backward()
        opt.step()
    dependent = club_mi_upper(spk, con, q).item()
    shuffled = club_mi_upper(spk, con[rng.permutation(200)], q).item()
    assert dependent > shuffled


# -- q-net likelihood ----------------------------------------------------------

def test_qnet_nll_at_mean():
    assert qnet_nll([[0.7]], [[0.7]], FixedGaussian()).item() == pytest.approx(0.5 * math.log(2 * math.pi), abs=1e-6)
    assert qnet_nll([[0.7]], [[0.7]], FixedGaussian()).item() == pytest.approx(0.9189, abs=1e-4)


def test_qnet_nll_grows_with_distance():
    q = FixedGaussian()
    near = qnet_nll([[0.0]], [[0.5]], q).item()
    far = qnet_nll([[0.0]], [[1.0]], q).item()
    assert far > near


def test_logvar_clamp_keeps_nll_finite():
    rng = np.random.default_rng(6)
    for sign in (1.0, -1.0):
        q = VariationalNet(2, 2, 4, rng)
        q.logvar_outer.bias.data[:] = sign * 1e4
        mu, logvar = q(np.ones((3, 2)))
        assert np.all(np.abs(logvar.data) == 8.0)
        assert math.isfinite(qnet_nll(np.ones((3, 2)), np.full((3, 2), 4.0), q).item())


def test_club_rejects_non_finite_q():
    with pytest.raises(NumericError):
        club_mi_upper([[0.0], [1.0]], [[0.0], [1.0]], FixedGaussian(logvar=np.nan))


def test_qnet_nll_gradients():
    rng = np.random.default_rng(7)
    q = VariationalNet(3, 2, 6, rng)
    spk, con = Tensor(rng.normal(size=(5, 3))), Tensor(rng.normal(size=(5, 2)))
    assert grad_check(lambda: qnet_nll(spk, con, q), q) < 1e-3


# -- reconstruction ------------------------------------------------------------

def test_recon_examples():
    a = np.array([[1.0, 2.0], [3.0, 4.0]])
    assert recon_loss(a, a).item() == 0.0
    assert recon_loss(np.ones((3, 5, 2)), np.zeros((3, 5, 2))).item() == pytest.approx(1.0, abs=1e-6)
    assert recon_loss(a, [[1.0, 2.0], [3.0, 0.0]]).item() == pytest.approx(4.0, abs=1e-6)


def test_recon_shape_mismatch():
    with pytest.raises(DimensionError):
        recon_loss(np.ones((2, 3)), np.ones((3, 2)))


def test_recon_gradients():
    rng = np.random.default_rng(8)
    x = ag.parameter(rng.normal(size=(4, 6)))
    target = Tensor(rng.normal(size=(4, 6)))
    assert grad_check(lambda: recon_loss(target, x), [x]) < 1e-3


# -- face-voice mapping loss ---------------------------------------------------

def test_fv_mapping_zero_when_matched_single_speaker():
    codes = np.random.default_rng(9).normal(size=(4, 3))
    assert fv_mapping_loss(codes, codes, [1, 1, 1, 1]).item() == 0.0


def test_fv_mapping_hinge_inactive_beyond_margin():
    mapped = np.array([[0.0, 0.0], [3.0, 0.0]])
    assert fv_mapping_loss(mapped, mapped, [0, 1]).item() == pytest.approx(0.0, abs=1e-7)


def test_fv_mapping_hinge_hand_value():
    mapped = np.array([[0.0, 0.0], [0.4, 0.0]])
    assert fv_mapping_loss(mapped, mapped, [0, 1], margin=1.0).item() == pytest.approx(0.6, abs=1e-6)


def test_fv_mapping_target_is_detached():
    mapped = ag.parameter([[1.0, 0.0], [0.0, 1.0]])
    target = ag.parameter([[0.0, 0.0], [0.0, 0.0]])
    fv_mapping_loss(mapped, target, [0, 0]).backward()
    assert target.grad is None
    assert mapped.grad is not None


def test_fv_mapping_gradients():
    rng = np.random.default_rng(10)
    mapped = ag.parameter(rng.normal(scale=0.3, size=(5, 3)))
    target = Tensor(rng.normal(size=(5, 3)))
    assert grad_check(lambda: fv_mapping_loss(mapped, target, [0, 1, 0, 2, 1]), [mapped]) < 1e-3


# -- total ---------------------------------------------------------------------

def test_total_examples():
    zeros = dict.fromkeys(PART_NAMES, 0.0)
    assert total_loss(zeros) == 0.0
    assert total_loss(dict.fromkeys(PART_NAMES, 1.0)) == pytest.approx(2.31, abs=1e-12)
    assert total_loss({**zeros, "rec": 2.0}) == 2.0


def test_total_default_weights():
    assert LossWeights().as_dict() == {"con": 0.1, "mi": 0.01, "id_f": 0.1, "id_s": 0.1, "F": 1.0}


@settings(max_examples=50)
@given(st.lists(st.floats(-100, 100), min_size=6, max_size=6), st.sampled_from(PART_NAMES))
def test_total_is_linear_in_each_part(values, name):
    parts = dict(zip(PART_NAMES, values))
    weight = 1.0 if name == "rec" else getattr(LossWeights(), name)
    doubled = {**parts, name: 2 * parts[name]}
    assert total_loss(doubled) - total_loss(parts) == pytest.approx(weight * parts[name], abs=1e-9)


def test_total_names_the_non_finite_term():
    parts = {**dict.fromkeys(PART_NAMES, 1.0), "id_s": float("inf")}
    with pytest.raises(NumericError, match="id_s"):
        total_loss(parts)
    with pytest.raises(ValidationError, match="mi"):
        total_loss({k: 1.0 for k in PART_NAMES if k != "mi"})


def test_loss_weights_validation():
    with pytest.raises(ValidationError):
        LossWeights(con=-1.0)
