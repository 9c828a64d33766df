import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from facevc import autograd as ag
from facevc.autograd import Adam, Tensor, grad_check
from facevc.config import TrainConfig
from facevc.exceptions import ConfigurationError, DimensionError, ValidationError
from facevc.losses import recon_loss
from facevc.model import (
    SAFPQ,
    Codebook,
    CPCPredictor,
    FaceVoiceMap,
    MelDecoder,
    PitchEmbedding,
    SpeakerEncoder,
    SpeakerSAFPQ,
    average_face_frames,
    cpc_loss,
    info_nce,
    nearest_codes,
    vq_quantize,
)
from facevc.network import FaceVCNetwork


def np_softmax(x):
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def np_attend(q, k, v):
    return np_softmax(q @ k.T / math.sqrt(q.shape[-1])) @ v


def np_ffn(x, ffn):
    w1, b1 = ffn.inner.weight.data.astype(np.float64), ffn.inner.bias.data.astype(np.float64)
    w2, b2 = ffn.outer.weight.data.astype(np.float64), ffn.outer.bias.data.astype(np.float64)
    return np.tanh(x @ w1 + b1) @ w2 + b2


def w(proj):
    return proj.weight.data.astype(np.float64)


def dense_safpq(m: SAFPQ, faces):
    p = m.prompts.data.astype(np.float64)
    sa = m.self_attn
    a_self = np_attend(p @ w(sa.w_q), p @ w(sa.w_k), p @ w(sa.w_v))
    a_cross = np_attend(a_self @ w(m.cross_q), faces @ w(m.cross_k), faces @ w(m.cross_v))
    return np_ffn(a_cross, m.ffn)


def dense_speaker_safpq(m: SpeakerSAFPQ, audio):
    row = audio.mean(axis=0) @ w(m.audio_proj) + m.audio_proj.bias.data
    tokens = np.vstack([m.prompts.data.astype(np.float64), row])
    sa = m.self_attn
    return np_ffn(np_attend(tokens @ w(sa.w_q), tokens @ w(sa.w_k), tokens @ w(sa.w_v)), m.ffn)


# -- frame averaging -----------------------------------------------------------

def test_average_single_frame_unchanged():
    v = np.array([[0.3, -1.2, 4.0]], dtype=np.float32)
    assert np.array_equal(average_face_frames(v).data, v[0])


def test_average_identical_frames():
    v = np.array([1.5, -2.0], dtype=np.float32)
    assert np.array_equal(average_face_frames(np.stack([v, v])).data, v)


def test_average_hand_example():
    assert average_face_frames([[1.0, 3.0], [3.0, 5.0]]).data.tolist() == [2.0, 4.0]


def test_average_empty_and_bad_rank():
    with pytest.raises(ValidationError):
        average_face_frames(np.zeros((0, 4)))
    with pytest.raises(DimensionError):
        average_face_frames(np.zeros(4))


# -- SAFPQ ---------------------------------------------------------------------

def make_safpq(seed=7, p=4, d=8, d_face=8):
    return SAFPQ(d_face, d, d, d, p, 16, np.random.default_rng(seed))


def test_safpq_matches_dense_reference():
    m = make_safpq()
    faces = np.random.default_rng(70).normal(size=(3, 8))
    expected = dense_safpq(m, faces)
    np.testing.assert_allclose(m.unpooled(faces).data, expected, atol=1e-5)
    np.testing.assert_allclose(m(faces).data, expected.mean(axis=0), atol=1e-5)


def test_safpq_batched_equals_unbatched():
    m = make_safpq()
    faces = np.random.default_rng(1).normal(size=(5, 3, 8)).astype(np.float32)
    batched = m(faces).data
    for i in range(5):
        np.testing.assert_allclose(batched[i], m(faces[i]).data, atol=1e-6)


@pytest.mark.parametrize("p, l", [(1, 1), (3, 5), (6, 2)])
def test_safpq_output_shape(p, l):
    m = SAFPQ(10, 12, 6, 7, p, 9, np.random.default_rng(0))
    assert m(np.ones((l, 10))).shape == (7,)


def test_safpq_single_key_with_identity_value():
    m = make_safpq()
    m.cross_v.weight.data = np.eye(8, dtype=np.float32)
    face = np.random.default_rng(2).normal(size=(1, 8)).astype(np.float32)
    a_self = m.prompt_attention()
    a_cross = ag.scaled_dot_attention(m.cross_q(a_self), m.cross_k(Tensor(face)), m.cross_v(Tensor(face)))
    np.testing.assert_allclose(a_cross.data, np.repeat(face, 4, axis=0), rtol=1e-6)


def test_safpq_prompt_permutation_equivariance():
    m = make_safpq(p=5)
    faces = np.random.default_rng(3).normal(size=(4, 8)).astype(np.float32)
    before = m.unpooled(faces).data
    perm = np.array([3, 0, 4, 1, 2])
    m.prompts.data = m.prompts.data[perm]
    np.testing.assert_allclose(m.unpooled(faces).data, before[perm], atol=1e-6)


def test_safpq_dimension_error():
    with pytest.raises(DimensionError):
        make_safpq()(np.ones((3, 5)))
    with pytest.raises(ConfigurationError):
        make_safpq(p=0)


def test_safpq_gradients():
    m = make_safpq()
    faces = Tensor(np.random.default_rng(4).normal(size=(2, 3, 8)))
    target = Tensor(np.random.default_rng(5).normal(size=(2, 8)))
    assert grad_check(lambda: ag.mean((m(faces) - target) ** 2), m) < 1e-3


# -- speaker SAFPQ -------------------------------------------------------------

def make_speaker_safpq(seed=7, p=4, d=8):
    return SpeakerSAFPQ(d, d, d, d, p, 16, np.random.default_rng(seed))


def test_speaker_safpq_matches_dense_reference():
    m = make_speaker_safpq()
    audio = np.random.default_rng(71).normal(size=(6, 8))
    expected = dense_speaker_safpq(m, audio)
    np.testing.assert_allclose(m.unpooled(audio).data, expected, atol=1e-5)
    np.testing.assert_allclose(m(audio).data, expected.mean(axis=0), atol=1e-5)


@pytest.mark.parametrize("length", [1, 4, 33])
def test_speaker_safpq_shape_independent_of_length(length):
    assert make_speaker_safpq()(np.ones((length, 8))).shape == (8,)


def test_speaker_safpq_all_zero_case():
    m = make_speaker_safpq()
    m.prompts.data[:] = 0.0
    m.audio_proj.bias.data[:] = 0.0
    m.ffn.inner.bias.data[:] = 0.0
    m.ffn.outer.bias.data[:] = 0.0
    assert np.array_equal(m(np.zeros((5, 8))).data, np.zeros(8))


def test_speaker_safpq_prompt_permutation_equivariance():
    m = make_speaker_safpq(p=4)
    audio = np.random.default_rng(8).normal(size=(7, 8)).astype(np.float32)
    before = m.unpooled(audio).data
    perm = np.array([2, 3, 1, 0])
    m.prompts.data = m.prompts.data[perm]
    # the audio row stays last
    np.testing.assert_allclose(m.unpooled(audio).data, before[np.append(perm, 4)], atol=1e-6)


def test_speaker_encoder_gradients():
    enc = SpeakerEncoder(6, 5, 8, 4, 3, 2, 7, np.random.default_rng(9))
    mel = Tensor(np.random.default_rng(10).normal(size=(2, 5, 6)))
    assert grad_check(lambda: ag.tsum(enc(mel) ** 2), enc) < 1e-3


# -- vector quantisation -------------------------------------------------------

def test_vq_hand_example():
    q = vq_quantize(Tensor([[0.2, 0.1]]), np.array([[0.0, 0.0], [1.0, 1.0]]))
    assert q.indices.tolist() == [0]
    assert q.quantized.data.tolist() == [[0.0, 0.0]]


def test_vq_exact_codeword_has_zero_commitment():
    book = np.array([[0.0, 0.0], [1.0, -2.0], [3.0, 3.0]], dtype=np.float32)
    q = vq_quantize(Tensor(book[[1]]), book)
    assert q.indices.tolist() == [1]
    assert q.commitment.item() == 0.0


def test_vq_tie_goes_to_lowest_index():
    q = vq_quantize(Tensor([[0.5, 0.5]]), np.array([[0.0, 0.0], [1.0, 1.0]]))
    assert q.indices.tolist() == [0]


def test_vq_empty_codebook_and_dim_mismatch():
    with pytest.raises(ConfigurationError):
        vq_quantize(Tensor([[0.0, 0.0]]), np.zeros((0, 2)))
    with pytest.raises(DimensionError):
        vq_quantize(Tensor([[0.0, 0.0]]), np.zeros((3, 4)))
    with pytest.raises(ConfigurationError):
        Codebook(1, 4, np.random.default_rng(0))


def test_vq_matches_brute_force_scan():
    rng = np.random.default_rng(11)
    book = rng.normal(size=(64, 16)).astype(np.float32)
    z = rng.normal(size=(1000, 16)).astype(np.float32)
    expected = [min(range(64), key=lambda j: float(np.sum((v - book[j]) ** 2))) for v in z]
    assert nearest_codes(z, book).tolist() == expected


def test_vq_quantized_rows_are_codewords_and_batched_shapes():
    book = Codebook(8, 4, np.random.default_rng(12))
    z = Tensor(np.random.default_rng(13).normal(size=(3, 5, 4)))
    q = vq_quantize(z, book)
    assert q.indices.shape == (3, 5)
    assert np.array_equal(q.quantized.data, book.entries.data[q.indices])
    assert len({row.tobytes() for row in book.entries.data}) == 8


def test_straight_through_gradient_equals_downstream_gradient():
    rng = np.random.default_rng(14)
    book = Codebook(6, 3, rng)
    z = ag.parameter(rng.normal(size=(5, 3)))
    target = Tensor(rng.normal(size=(5, 3)))
    q = vq_quantize(z, book)
    ag.tsum((q.quantized - target) ** 2).backward()
    # gradient of the same loss taken directly at the quantised values
    probe = ag.parameter(q.quantized.data)
    ag.tsum((probe - target) ** 2).backward()
    np.testing.assert_array_equal(z.grad, probe.grad)


def test_vq_loss_gradients():
    rng = np.random.default_rng(15)
    book = Codebook(6, 3, rng)
    z = ag.parameter(rng.normal(size=(4, 3)))
    assert grad_check(lambda: vq_quantize(z, book).commitment, [z]) < 1e-3
    assert grad_check(lambda: vq_quantize(z, book).codebook_loss, book) < 1e-3


# -- CPC -----------------------------------------------------------------------

def test_info_nce_uniform_scores():
    assert info_nce(Tensor(np.full((5, 5), 0.3))).item() == pytest.approx(math.log(5), abs=1e-6)


def test_info_nce_saturated():
    scores = np.zeros((3, 3))
    np.fill_diagonal(scores, 30.0)
    assert info_nce(Tensor(scores)).item() < 1e-10


def test_info_nce_two_candidates():
    loss = info_nce(Tensor([[1.0, 0.0], [0.0, 1.0]])).item()
    assert loss == pytest.approx(-math.log(math.e / (math.e + 1)), abs=1e-6)
    assert loss == pytest.approx(0.3133, abs=1e-4)


def test_cpc_loss_length_checks():
    pred = CPCPredictor(4, 2, np.random.default_rng(0))
    with pytest.raises(ValidationError):
        cpc_loss(Tensor(np.ones((1, 2, 4))), pred)
    with pytest.raises(ConfigurationError):
        CPCPredictor(4, 0, np.random.default_rng(0))


def test_cpc_loss_nonnegative_and_gradients():
    rng = np.random.default_rng(16)
    pred = CPCPredictor(4, 2, rng)
    z = ag.parameter(rng.normal(size=(2, 6, 4)))
    assert cpc_loss(z, pred).item() >= 0
    assert grad_check(lambda: cpc_loss(z, pred), list(pred.parameters()) + [z]) < 1e-3


# -- pitch ---------------------------------------------------------------------

def test_pitch_hand_binning():
    table = PitchEmbedding(4, 3, np.random.default_rng(0), low=-1.0, high=1.0)
    assert table.bin_index(0.1) == 2


def test_pitch_edge_goes_to_higher_bin():
    table = PitchEmbedding(4, 3, np.random.default_rng(0), low=-1.0, high=1.0)
    assert table.bin_index([-0.5, 0.0, 0.5]).tolist() == [1, 2, 3]
    assert table.bin_index([-5.0, 1.0, 9.0]).tolist() == [0, 3, 3]
    assert np.all(np.diff(table.edges) > 0)


def test_pitch_unvoiced_rows():
    table = PitchEmbedding(4, 3, np.random.default_rng(0))
    out = table(np.array([0.3, np.nan, 2.0]), np.zeros(3, dtype=bool)).data
    assert np.array_equal(out, np.repeat(table.unvoiced.data, 3, axis=0))


def test_pitch_voiced_rows_pick_their_bin():
    table = PitchEmbedding(4, 3, np.random.default_rng(0), low=-1.0, high=1.0)
    out = table(np.array([0.1, -0.9]), np.array([True, True])).data
    np.testing.assert_array_equal(out, table.table.data[[2, 0]])


# -- decoder -------------------------------------------------------------------

def make_decoder(seed=0):
    return MelDecoder(4, 3, 2, 16, 6, np.random.default_rng(seed))


@settings(max_examples=20, deadline=None)
@given(st.integers(1, 512))
def test_decoder_is_length_preserving(t):
    out = make_decoder()(np.ones(4), np.zeros((t, 3)), np.zeros((t, 2)))
    assert out.shape == (t, 6)


def test_decoder_zero_inputs_zero_output():
    out = make_decoder()(np.zeros(4), np.zeros((7, 3)), np.zeros((7, 2)))
    assert np.array_equal(out.data, np.zeros((7, 6)))


def test_decoder_length_mismatch():
    with pytest.raises(DimensionError):
        make_decoder()(np.zeros(4), np.zeros((7, 3)), np.zeros((6, 2)))


def test_decoder_gradients():
    dec = make_decoder()
    rng = np.random.default_rng(17)
    spk, con, pitch = Tensor(rng.normal(size=(2, 4))), Tensor(rng.normal(size=(2, 5, 3))), Tensor(rng.normal(size=(2, 5, 2)))
    target = Tensor(rng.normal(size=(2, 5, 6)))
    assert grad_check(lambda: recon_loss(target, dec(spk, con, pitch)), dec) < 1e-3


def test_decoder_single_sample_overfit():
    rng = np.random.default_rng(18)
    dec = MelDecoder(32, 16, 8, 128, 80, rng)
    spk = Tensor(rng.normal(size=32))
    con, pitch = Tensor(rng.normal(size=(20, 16))), Tensor(rng.normal(size=(20, 8)))
    target = Tensor(rng.normal(size=(20, 80)))
    opt = Adam(dec.parameters(), lr=1e-3)
    for _ in range(500):
        opt.zero_grad()
        loss = recon_loss(target, dec(spk, con, pitch))
        loss.backward()
        opt.step()
    assert recon_loss(target, dec(spk, con, pitch)).item() < 0.01


# -- face-voice mapping --------------------------------------------------------

def test_fv_map_matches_dense_reference():
    m = FaceVoiceMap(8, 4, np.random.default_rng(7))
    f = np.random.default_rng(72).normal(size=(3, 8))
    keys, values = m.keys.data.astype(np.float64), m.values.data.astype(np.float64)
    expected = np_softmax(f @ keys.T / math.sqrt(8)) @ values
    np.testing.assert_allclose(m(f).data, expected, atol=1e-5)
    np.testing.assert_allclose(m(f[0]).data, expected[0], atol=1e-5)


def test_fv_map_single_slot():
    m = FaceVoiceMap(5, 1, np.random.default_rng(0))
    for f in np.random.default_rng(1).normal(size=(4, 5)):
        np.testing.assert_allclose(m(f).data, m.values.data[0], rtol=1e-6)


def test_fv_map_orthogonal_query_gives_uniform_weights():
    m = FaceVoiceMap(4, 3, np.random.default_rng(0))
    m.keys.data[:, 0] = 0.0
    weights = m.weights(np.array([2.0, 0.0, 0.0, 0.0])).data
    np.testing.assert_allclose(weights, np.full(3, 1 / 3), atol=1e-7)


def test_fv_map_gradients():
    m = FaceVoiceMap(6, 4, np.random.default_rng(19))
    f = Tensor(np.random.default_rng(20).normal(size=(3, 6)))
    assert grad_check(lambda: ag.tsum(m(ag.l2_normalize(f)) ** 2), m) < 1e-3


# -- whole network -------------------------------------------------------------

def test_network_checkpoint_round_trip_is_bit_identical(tmp_path):
    net = FaceVCNetwork(TrainConfig(seed=5), 3)
    net.mel_mean = np.linspace(-3, 1, 80).astype(np.float32)
    net.save(tmp_path / "ckpt")
    back = FaceVCNetwork.load(tmp_path / "ckpt")
    for (name, a), (name_b, b) in zip(net.named_parameters(), back.named_parameters()):
        assert name == name_b
        assert a.data.tobytes() == b.data.tobytes()
    assert back.mel_mean.tobytes() == net.mel_mean.tobytes()
    assert back.config == net.config


def test_network_needs_two_speakers():
    with pytest.raises(ValidationError):
        FaceVCNetwork(TrainConfig(), 1)


def test_network_parameter_groups_partition():
    net = FaceVCNetwork(TrainConfig(), 2)
    main, mi = net.main_parameters(), net.mi_parameters()
    assert mi and all(n.startswith("club.") for n, _ in mi)
    assert len(main) + len(mi) == len(list(net.named_parameters()))
