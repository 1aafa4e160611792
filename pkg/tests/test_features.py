import hashlib
import struct

import numpy as np
import pytest

from sasrnet import tensor as tn
from sasrnet.errors import ContractError, CorruptionError, FormatError
from sasrnet.features import (Dims, FeatureBundle, read_dataset, serialize_dataset, encode_question, encode_questions,
                              project_audio, write_dataset, Dataset, stack_bundles)

VOCAB = ["<pad>", "a", "b", "c"]
ANSWERS = ["yes", "no"]


def _bundle(rng, dims, sid="s0"):
    f32 = lambda *s: rng.normal(size=s).astype(np.float32).astype(np.float64)
    n = int(rng.integers(1, dims.L_max + 1))
    return FeatureBundle(sid, f32(dims.T, dims.D_a), f32(dims.T, dims.D), f32(dims.T, dims.P, dims.D),
                         list(rng.integers(1, len(VOCAB), size=n)), int(rng.integers(len(ANSWERS))),
                         (rng.random(dims.C) < 0.5).astype(np.int64), 1)


def _lstm_params(rng, n_words, D, scale=0.5):
    return {"embed": tn.parameter(rng.normal(size=(n_words, D)) * scale),
            "W_ih": tn.parameter(rng.normal(size=(D, 4 * D)) * scale),
            "W_hh": tn.parameter(rng.normal(size=(D, 4 * D)) * scale),
            "b": tn.parameter(rng.normal(size=4 * D) * scale)}


def _numpy_lstm(words, p):
    """Plain numpy LSTM cell, gate order i, f, g, o."""
    E, Wi, Wh, b = (p[k].values for k in ("embed", "W_ih", "W_hh", "b"))
    D = Wh.shape[0]
    h, c = np.zeros(D), np.zeros(D)
    sig = lambda x: 1.0 / (1.0 + np.exp(-x))
    for w in words:
        z = E[w] @ Wi + h @ Wh + b
        i, f, g, o = sig(z[:D]), sig(z[D:2 * D]), np.tanh(z[2 * D:3 * D]), sig(z[3 * D:])
        c = f * c + i * g
        h = o * np.tanh(c)
    return h


def test_single_bundle_round_trip(tmp_path):
    dims = Dims(T=2, P=1, L_max=4, D_a=3, D=4, C=2)
    b = _bundle(np.random.default_rng(0), dims)
    write_dataset([b], tmp_path / "one.sasr", dims, VOCAB, ANSWERS, ["t0", "t1"])
    ds = read_dataset(tmp_path / "one.sasr")
    assert len(ds) == 1 and ds.dims == dims
    assert ds[0] == b
    assert ds.manifest.question_vocab == VOCAB and ds.manifest.answer_vocab == ANSWERS
    assert (tmp_path / "one.sasr.json").exists()


def test_header_layout():
    dims = Dims(T=2, P=1, L_max=4, D_a=3, D=4, C=2)
    raw = serialize_dataset([_bundle(np.random.default_rng(1), dims)], dims, VOCAB, ANSWERS)
    assert raw[:4] == bytes([0x53, 0x41, 0x53, 0x52])
    assert struct.unpack("<H", raw[4:6]) == (1,)
    assert struct.unpack("<6I", raw[6:30]) == (2, 1, 4, 3, 4, 2)


def test_bad_magic_is_format_error(tmp_path):
    dims = Dims(T=1, P=1, L_max=2, D_a=1, D=1, C=1)
    raw = serialize_dataset([], dims, VOCAB, ANSWERS)
    (tmp_path / "x.sasr").write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(FormatError, match="magic"):
        read_dataset(tmp_path / "x.sasr")


def test_bad_version_is_format_error():
    dims = Dims(T=1, P=1, L_max=2, D_a=1, D=1, C=1)
    raw = bytearray(serialize_dataset([], dims, VOCAB, ANSWERS))
    raw[4:6] = struct.pack("<H", 2)
    with pytest.raises(FormatError, match="version"):
        Dataset(bytes(raw))


def test_truncated_payload_names_sample():
    dims = Dims(T=2, P=2, L_max=3, D_a=2, D=3, C=2)
    rng = np.random.default_rng(2)
    raw = serialize_dataset([_bundle(rng, dims, "first"), _bundle(rng, dims, "last-one")], dims, VOCAB, ANSWERS)
    with pytest.raises(CorruptionError, match="last-one"):
        Dataset(raw[:-5])


def test_thousand_bundles_reserialize_identically():
    dims = Dims(T=2, P=2, L_max=4, D_a=3, D=4, C=3)
    rng = np.random.default_rng(3)
    bundles = [_bundle(rng, dims, f"s{i:04d}") for i in range(1000)]
    raw = serialize_dataset(bundles, dims, VOCAB, ANSWERS, ["t"])
    again = Dataset(raw).to_bytes()
    assert hashlib.sha256(again).hexdigest() == hashlib.sha256(raw).hexdigest()
    reparsed = serialize_dataset(Dataset(raw).bundles(), dims, VOCAB, ANSWERS, ["t"])
    assert reparsed == raw


def test_write_rejects_out_of_vocabulary_tokens():
    dims = Dims(T=1, P=1, L_max=3, D_a=1, D=1, C=1)
    b = _bundle(np.random.default_rng(4), dims)
    b.question_tokens = [len(VOCAB)]
    with pytest.raises(ContractError):
        serialize_dataset([b], dims, VOCAB, ANSWERS)


def test_lstm_zero_weights_give_zero_state():
    D = 5
    p = {k: tn.parameter(np.zeros(s)) for k, s in
         (("embed", (4, D)), ("W_ih", (D, 4 * D)), ("W_hh", (D, 4 * D)), ("b", (4 * D,)))}
    p["embed"].values = np.random.default_rng(5).normal(size=(4, D))
    assert np.array_equal(encode_question([1, 2, 3], p).values, np.zeros(D))


def test_single_token_is_one_lstm_step():
    p = _lstm_params(np.random.default_rng(6), 4, 3)
    np.testing.assert_allclose(encode_question([2], p).values, _numpy_lstm([2], p), rtol=0, atol=1e-14)


def test_multi_token_matches_reference_cell():
    p = _lstm_params(np.random.default_rng(7), 4, 3)
    np.testing.assert_allclose(encode_question([1, 3, 2, 2, 1], p).values, _numpy_lstm([1, 3, 2, 2, 1], p),
                               rtol=0, atol=1e-13)


def test_padding_never_enters_recurrence():
    p = _lstm_params(np.random.default_rng(8), 4, 3)
    padded = encode_questions(np.array([[1, 2, 0, 0, 0], [3, 1, 2, 1, 2]]), np.array([2, 5]), p)
    np.testing.assert_array_equal(padded.values[0], encode_question([1, 2], p).values)
    np.testing.assert_array_equal(padded.values[1], encode_question([3, 1, 2, 1, 2], p).values)


def test_empty_question_is_contract_error():
    with pytest.raises(ContractError):
        encode_question([], _lstm_params(np.random.default_rng(9), 4, 3))


def test_lstm_gradient_five_tokens():
    p = _lstm_params(np.random.default_rng(10), 4, 3)
    R = tn.constant(np.random.default_rng(11).normal(size=3))
    f = lambda: tn.sum_all(tn.mul(encode_question([1, 2, 3, 1, 2], p), R))
    assert tn.grad_check(f, list(p.values()), samples=10_000) < 1e-5


def test_project_audio_examples_and_gradient():
    x = tn.constant(np.random.default_rng(12).normal(size=(3, 4)))
    np.testing.assert_array_equal(project_audio(x, tn.constant(np.eye(4)), tn.constant(np.zeros(4))).values, x.values)
    rows = project_audio(x, tn.constant(np.zeros((4, 2))), tn.constant([1.5, -2.0])).values
    assert np.array_equal(rows, np.tile([1.5, -2.0], (3, 1)))
    rng = np.random.default_rng(13)
    W, b = tn.parameter(rng.normal(size=(4, 2))), tn.parameter(rng.normal(size=2))
    R = tn.constant(rng.normal(size=(3, 2)))
    assert tn.grad_check(lambda: tn.sum_all(tn.mul(project_audio(x, W, b), R)), [W, b]) < 1e-6


def test_stacked_batch_promotes_to_float64():
    dims = Dims(T=2, P=2, L_max=4, D_a=3, D=4, C=3)
    rng = np.random.default_rng(14)
    batch = stack_bundles([_bundle(rng, dims, f"s{i}") for i in range(3)], dims)
    assert batch.audio.dtype == np.float64 and batch.visual_map.shape == (3, 2, 2, 4)
    assert all(batch.tokens[i, batch.lengths[i]:].sum() == 0 for i in range(3))
