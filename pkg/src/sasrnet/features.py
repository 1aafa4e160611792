"""Per-sample feature bundles, the SASR dataset file format, and input encoders.

Dataset layout (all integers little-endian)::

    b"SASR"  u16 version=1
    u32 T, P, L_max, D_a, D, C
    u32 n_words,    then n_words strings        (question vocabulary)
    u32 n_answers,  then n_answers strings      (answer vocabulary)
    u32 n_templates, then n_templates strings   (question template names)
    u32 n_samples
    per sample: string id, u64 payload offset, u32 payload length
    payloads

A string is a u16 byte length followed by UTF-8 bytes. A payload holds
``audio_raw`` (T*D_a), ``visual_vec`` (T*D) and ``visual_map`` (T*P*D) as f32,
then u16 question length, L_max u16 token ids (zero padded), u16 answer id,
C u8 presence flags and a u8 template id (255 when unknown).
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import tensor as tn
from .errors import ContractError, CorruptionError, FormatError, ShapeError
from .tensor import Tensor

MAGIC = b"SASR"
VERSION = 1
NO_TEMPLATE = 255


@dataclass
class FeatureBundle:
    sample_id: str
    audio_raw: np.ndarray  # T x D_a
    visual_vec: np.ndarray  # T x D
    visual_map: np.ndarray  # T x P x D
    question_tokens: list[int]
    answer_id: int
    source_presence: np.ndarray  # C, 0/1
    template_id: int = NO_TEMPLATE

    def __eq__(self, other):
        if not isinstance(other, FeatureBundle):
            return NotImplemented
        return (
            self.sample_id == other.sample_id
            and np.array_equal(self.audio_raw, other.audio_raw)
            and np.array_equal(self.visual_vec, other.visual_vec)
            and np.array_equal(self.visual_map, other.visual_map)
            and list(self.question_tokens) == list(other.question_tokens)
            and self.answer_id == other.answer_id
            and np.array_equal(self.source_presence, other.source_presence)
            and self.template_id == other.template_id
        )


@dataclass(frozen=True)
class Dims:
    T: int
    P: int
    L_max: int
    D_a: int
    D: int
    C: int

    def as_dict(self) -> dict:
        return {"T": self.T, "P": self.P, "L_max": self.L_max, "D_a": self.D_a, "D": self.D, "C": self.C}


@dataclass
class DatasetManifest:
    dims: Dims
    question_vocab: list[str]
    answer_vocab: list[str]
    templates: list[str]
    sample_ids: list[str] = field(default_factory=list)
    offsets: list[tuple[int, int]] = field(default_factory=list)

    @property
    def payload_size(self) -> int:
        return payload_size(self.dims)

    def to_json(self) -> dict:
        return {
            "format": "SASR",
            "version": VERSION,
            "dims": self.dims.as_dict(),
            "question_vocab": self.question_vocab,
            "answer_vocab": self.answer_vocab,
            "templates": self.templates,
            "samples": self.sample_ids,
        }


def payload_size(d: Dims) -> int:
    floats = d.T * d.D_a + d.T * d.D + d.T * d.P * d.D
    return 4 * floats + 2 + 2 * d.L_max + 2 + d.C + 1


def _pack_str(s: str) -> bytes:
    raw = s.encode("utf-8")
    return struct.pack("<H", len(raw)) + raw


def _check_bundle(b: FeatureBundle, d: Dims, n_words: int, n_answers: int) -> None:
    if b.audio_raw.shape != (d.T, d.D_a) or b.visual_vec.shape != (d.T, d.D) or b.visual_map.shape != (d.T, d.P, d.D):
        raise ShapeError(f"sample {b.sample_id}: feature shapes do not match dims {d.as_dict()}")
    if not 1 <= len(b.question_tokens) <= d.L_max:
        raise ContractError(f"sample {b.sample_id}: question length {len(b.question_tokens)} outside [1, {d.L_max}]")
    if any(not 0 <= t < n_words for t in b.question_tokens):
        raise ContractError(f"sample {b.sample_id}: question token outside vocabulary of {n_words}")
    if not 0 <= b.answer_id < n_answers:
        raise ContractError(f"sample {b.sample_id}: answer id {b.answer_id} outside vocabulary of {n_answers}")
    if np.shape(b.source_presence) != (d.C,):
        raise ShapeError(f"sample {b.sample_id}: presence vector must have length {d.C}")


def encode_payload(b: FeatureBundle, d: Dims) -> bytes:
    tokens = np.zeros(d.L_max, dtype="<u2")
    tokens[: len(b.question_tokens)] = b.question_tokens
    parts = [
        np.asarray(b.audio_raw, dtype="<f4").tobytes(),
        np.asarray(b.visual_vec, dtype="<f4").tobytes(),
        np.asarray(b.visual_map, dtype="<f4").tobytes(),
        struct.pack("<H", len(b.question_tokens)),
        tokens.tobytes(),
        struct.pack("<H", b.answer_id),
        np.asarray(b.source_presence, dtype="u1").tobytes(),
        struct.pack("<B", b.template_id),
    ]
    return b"".join(parts)


def serialize_dataset(bundles: Sequence[FeatureBundle], dims: Dims, question_vocab: Sequence[str],
                      answer_vocab: Sequence[str], templates: Sequence[str] = ()) -> bytes:
    for b in bundles:
        _check_bundle(b, dims, len(question_vocab), len(answer_vocab))
    head = [MAGIC, struct.pack("<H", VERSION), struct.pack("<6I", dims.T, dims.P, dims.L_max, dims.D_a, dims.D, dims.C)]
    for vocab in (question_vocab, answer_vocab, templates):
        head.append(struct.pack("<I", len(vocab)))
        head.extend(_pack_str(w) for w in vocab)
    head.append(struct.pack("<I", len(bundles)))
    index_len = sum(2 + len(b.sample_id.encode("utf-8")) + 12 for b in bundles)
    offset = sum(len(h) for h in head) + index_len
    size = payload_size(dims)
    index = []
    for b in bundles:
        index.append(_pack_str(b.sample_id) + struct.pack("<QI", offset, size))
        offset += size
    payloads = [encode_payload(b, dims) for b in bundles]
    return b"".join(head + index + payloads)


def write_dataset(bundles: Sequence[FeatureBundle], path, dims: Dims, question_vocab: Sequence[str],
                  answer_vocab: Sequence[str], templates: Sequence[str] = (), sidecar: bool = True) -> None:
    """Write bundles to ``path`` and, by default, a JSON manifest at ``path + '.json'``."""
    data = serialize_dataset(bundles, dims, question_vocab, answer_vocab, templates)
    path = Path(path)
    path.write_bytes(data)
    if sidecar:
        manifest = DatasetManifest(dims, list(question_vocab), list(answer_vocab), list(templates),
                                   [b.sample_id for b in bundles])
        Path(str(path) + ".json").write_text(json.dumps(manifest.to_json(), indent=1) + "\n")


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise CorruptionError(f"truncated header while reading {what}")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))

    def string(self, what: str) -> str:
        (n,) = self.unpack("<H", what)
        return self.take(n, what).decode("utf-8")


class Dataset:
    """Read-only view of a SASR file; bundles are decoded on access."""

    def __init__(self, buf: bytes, source: str = "<bytes>"):
        self.source = source
        self._buf = bytes(buf)
        self.manifest = _parse_header(self._buf)
        self._by_id = {sid: i for i, sid in enumerate(self.manifest.sample_ids)}

    @property
    def dims(self) -> Dims:
        return self.manifest.dims

    def __len__(self) -> int:
        return len(self.manifest.sample_ids)

    def index_of(self, sample_id: str) -> int:
        try:
            return self._by_id[sample_id]
        except KeyError:
            raise KeyError(f"no sample {sample_id!r} in {self.source}") from None

    def __getitem__(self, i: int) -> FeatureBundle:
        d = self.dims
        sid = self.manifest.sample_ids[i]
        off, size = self.manifest.offsets[i]
        raw = self._buf[off:off + size]
        if len(raw) != size:
            raise CorruptionError(f"payload of sample {sid} is truncated")
        pos = 0

        def floats(*shape):
            nonlocal pos
            n = int(np.prod(shape))
            arr = np.frombuffer(raw, dtype="<f4", count=n, offset=pos).astype(np.float64).reshape(shape)
            pos += 4 * n
            return arr

        audio = floats(d.T, d.D_a)
        vvec = floats(d.T, d.D)
        vmap = floats(d.T, d.P, d.D)
        (qlen,) = struct.unpack_from("<H", raw, pos)
        pos += 2
        tokens = np.frombuffer(raw, dtype="<u2", count=d.L_max, offset=pos)
        pos += 2 * d.L_max
        (answer,) = struct.unpack_from("<H", raw, pos)
        pos += 2
        presence = np.frombuffer(raw, dtype="u1", count=d.C, offset=pos).astype(np.int64)
        pos += d.C
        (template,) = struct.unpack_from("<B", raw, pos)
        if not 1 <= qlen <= d.L_max:
            raise CorruptionError(f"sample {sid}: question length {qlen} outside [1, {d.L_max}]")
        return FeatureBundle(sid, audio, vvec, vmap, [int(t) for t in tokens[:qlen]], int(answer), presence, int(template))

    def __iter__(self):
        return (self[i] for i in range(len(self)))

    def bundles(self) -> list[FeatureBundle]:
        return list(self)

    def to_bytes(self) -> bytes:
        m = self.manifest
        return serialize_dataset(self.bundles(), m.dims, m.question_vocab, m.answer_vocab, m.templates)

    def arrays(self, indices: Sequence[int] | None = None) -> "Batch":
        idx = range(len(self)) if indices is None else indices
        return stack_bundles([self[i] for i in idx], self.dims)


def _parse_header(buf: bytes) -> DatasetManifest:
    r = _Reader(buf)
    if r.take(4, "magic") != MAGIC:
        raise FormatError("not a SASR dataset (bad magic)")
    (version,) = r.unpack("<H", "version")
    if version != VERSION:
        raise FormatError(f"unsupported SASR version {version}")
    dims = Dims(*r.unpack("<6I", "dims"))
    vocabs = []
    for what in ("question vocabulary", "answer vocabulary", "templates"):
        (n,) = r.unpack("<I", what)
        vocabs.append([r.string(what) for _ in range(n)])
    (n,) = r.unpack("<I", "sample count")
    ids, offsets = [], []
    for _ in range(n):
        sid = r.string("sample index")
        off, size = r.unpack("<QI", "sample index")
        ids.append(sid)
        offsets.append((off, size))
    size_expected = payload_size(dims)
    for sid, (off, size) in zip(ids, offsets):
        if size != size_expected or off + size > len(buf):
            raise CorruptionError(f"payload of sample {sid} is truncated or out of bounds")
    return DatasetManifest(dims, *vocabs, sample_ids=ids, offsets=offsets)


def read_dataset(path) -> Dataset:
    path = Path(path)
    return Dataset(path.read_bytes(), source=str(path))


@dataclass
class Batch:
    """Stacked float64 arrays for a group of samples."""

    sample_ids: list[str]
    audio: np.ndarray  # B x T x D_a
    visual_vec: np.ndarray  # B x T x D
    visual_map: np.ndarray  # B x T x P x D
    tokens: np.ndarray  # B x L_max, zero padded
    lengths: np.ndarray  # B
    answers: np.ndarray  # B
    presence: np.ndarray  # B x C
    templates: np.ndarray  # B

    def __len__(self) -> int:
        return len(self.sample_ids)

    def subset(self, idx) -> "Batch":
        idx = np.asarray(idx)
        return Batch([self.sample_ids[i] for i in idx], self.audio[idx], self.visual_vec[idx], self.visual_map[idx],
                     self.tokens[idx], self.lengths[idx], self.answers[idx], self.presence[idx], self.templates[idx])


def stack_bundles(bundles: Sequence[FeatureBundle], dims: Dims) -> Batch:
    n = len(bundles)
    tokens = np.zeros((n, dims.L_max), dtype=np.int64)
    lengths = np.zeros(n, dtype=np.int64)
    for i, b in enumerate(bundles):
        tokens[i, : len(b.question_tokens)] = b.question_tokens
        lengths[i] = len(b.question_tokens)
    return Batch(
        [b.sample_id for b in bundles],
        np.stack([b.audio_raw for b in bundles]) if n else np.zeros((0, dims.T, dims.D_a)),
        np.stack([b.visual_vec for b in bundles]) if n else np.zeros((0, dims.T, dims.D)),
        np.stack([b.visual_map for b in bundles]) if n else np.zeros((0, dims.T, dims.P, dims.D)),
        tokens,
        lengths,
        np.array([b.answer_id for b in bundles], dtype=np.int64),
        np.stack([np.asarray(b.source_presence, dtype=np.int64) for b in bundles]) if n else np.zeros((0, dims.C), dtype=np.int64),
        np.array([b.template_id for b in bundles], dtype=np.int64),
    )


# --- encoders -------------------------------------------------------------


def lstm_step(x_proj: Tensor, h: Tensor, c: Tensor, W_hh: Tensor) -> tuple[Tensor, Tensor]:
    """One LSTM step; ``x_proj`` already holds ``x @ W_ih + b`` (gate order i, f, g, o)."""
    D = h.shape[-1]
    gates = tn.add(x_proj, tn.matmul(h, W_hh))
    i = tn.sigmoid(tn.slice_axis(gates, 0, D))
    f = tn.sigmoid(tn.slice_axis(gates, D, 2 * D))
    g = tn.tanh(tn.slice_axis(gates, 2 * D, 3 * D))
    o = tn.sigmoid(tn.slice_axis(gates, 3 * D, 4 * D))
    c_new = tn.add(tn.mul(f, c), tn.mul(i, g))
    h_new = tn.mul(o, tn.tanh(c_new))
    return h_new, c_new


def encode_questions(tokens: np.ndarray, lengths: np.ndarray, params: Mapping[str, Tensor]) -> Tensor:
    """Final LSTM hidden state for each padded question in a batch (B x D).

    Steps past a question's length leave its state untouched, so padding never
    enters the recurrence.
    """
    tokens = np.asarray(tokens, dtype=np.int64)
    lengths = np.asarray(lengths, dtype=np.int64)
    if tokens.ndim != 2 or lengths.shape != tokens.shape[:1]:
        raise ShapeError(f"encode_questions: tokens {tokens.shape} and lengths {lengths.shape} disagree")
    if lengths.size and (lengths.min() < 1 or lengths.max() > tokens.shape[1]):
        raise ContractError("encode_questions: every question needs 1 <= length <= L_max")
    B = tokens.shape[0]
    steps = int(lengths.max()) if B else 0
    D = params["W_hh"].shape[0]
    emb = tn.take(params["embed"], tokens[:, :steps], axis=0)  # B x L x D
    x_proj = tn.linear(emb, params["W_ih"], params["b"])  # B x L x 4D
    h = tn.constant(np.zeros((B, D)))
    c = tn.constant(np.zeros((B, D)))
    for step in range(steps):
        h_new, c_new = lstm_step(tn.take(x_proj, step, axis=1), h, c, params["W_hh"])
        live = lengths > step
        if live.all():
            h, c = h_new, c_new
        else:
            h = tn.select(live, h_new, h)
            c = tn.select(live, c_new, c)
    return h


def encode_question(words: Sequence[int], params: Mapping[str, Tensor]) -> Tensor:
    if len(words) == 0:
        raise ContractError("encode_question: empty question")
    out = encode_questions(np.asarray([list(words)]), np.asarray([len(words)]), params)
    return tn.reshape(out, (out.shape[-1],))


def project_audio(audio_raw: Tensor, W: Tensor, b: Tensor) -> Tensor:
    return tn.linear(audio_raw, W, b)
