"""Audio-guided spatial attention, match supervision, and question-guided temporal pooling."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping

import numpy as np

from . import tensor as tn
from .errors import ContractError, ShapeError
from .tensor import Tensor


@dataclass
class SpatialOutputs:
    f_attn: Tensor  # [..., T, D]
    f_sa: Tensor  # [..., T, D]
    weights: Tensor  # [..., T, P], rows sum to 1


@dataclass
class TemporalOutputs:
    f_ta_A: Tensor  # [..., D]
    f_ta_V: Tensor
    weights_A: Tensor  # [..., T]
    weights_V: Tensor


def spatial_attend(X: Tensor, fg_A: Tensor, fg_V: Tensor, params: Mapping[str, Tensor],
                   pos: Tensor | None = None) -> SpatialOutputs:
    """Localize the sounding object on each segment's feature map.

    The score of position p at segment t is ``X[t, p] . fg_A[t] / sqrt(D)``,
    i.e. the audio vector used as a 1x1 kernel over the map. ``pos`` (P x D),
    when given, is added to the attended values only, so it never changes
    where attention goes.
    """
    if X.values.ndim < 3 or X.shape[:-2] != fg_A.shape[:-1] or X.shape[-1] != fg_A.shape[-1] or fg_A.shape != fg_V.shape:
        raise ShapeError(f"spatial_attend: map {X.shape}, audio {fg_A.shape}, visual {fg_V.shape} disagree")
    lead = fg_A.shape[:-1]
    P, D = X.shape[-2:]
    scores = tn.reshape(tn.matmul(X, tn.reshape(fg_A, lead + (D, 1))), lead + (P,))
    w = tn.softmax(tn.scale(scores, 1.0 / math.sqrt(D)))
    values = X if pos is None else tn.add(X, tn.expand(pos, lead))
    f_attn = tn.reshape(tn.matmul(tn.reshape(w, lead + (1, P)), values), lead + (D,))
    f_sa = tn.linear(tn.tanh(tn.concat([fg_V, f_attn], axis=-1)), params["W"], params["b"])
    return SpatialOutputs(f_attn, f_sa, w)


def make_negative_pair(batch_size: int, rng: np.random.Generator) -> np.ndarray | None:
    """A derangement of ``range(batch_size)``: sample i gets the visuals of ``perm[i]``."""
    if batch_size < 2:
        return None
    while True:
        perm = rng.permutation(batch_size)
        if not np.any(perm == np.arange(batch_size)):
            return perm


def match_logits(f_sa: Tensor, params: Mapping[str, Tensor]) -> Tensor:
    return tn.linear(f_sa, params["W"], params["b"])


def loss_match(f_sa_pos: Tensor, f_sa_neg: Tensor, params: Mapping[str, Tensor]) -> Tensor:
    """Two-way cross-entropy: matched segments are class 1, mismatched class 0."""
    if f_sa_pos.shape != f_sa_neg.shape:
        raise ShapeError(f"loss_match: streams {f_sa_pos.shape} and {f_sa_neg.shape} differ")
    logits = tn.concat([match_logits(f_sa_pos, params), match_logits(f_sa_neg, params)], axis=-2)
    T = f_sa_pos.shape[-2]
    labels = np.concatenate([np.ones(T, dtype=np.int64), np.zeros(T, dtype=np.int64)])
    return tn.cross_entropy(logits, np.broadcast_to(labels, logits.shape[:-1]))


def _pool(fQ: Tensor, feats: Tensor) -> tuple[Tensor, Tensor]:
    lead = fQ.shape[:-1]
    D = fQ.shape[-1]
    T = feats.shape[-2]
    scores = tn.matmul(tn.reshape(fQ, lead + (1, D)), tn.transpose(feats))
    w = tn.softmax(tn.scale(scores, 1.0 / math.sqrt(D)))
    pooled = tn.reshape(tn.matmul(w, feats), lead + (D,))
    return pooled, tn.reshape(w, lead + (T,))


def temporal_attend(fQ: Tensor, fg_A: Tensor, fsa_V: Tensor) -> TemporalOutputs:
    """Question-weighted average over segments for each modality; no parameters."""
    if fg_A.shape != fsa_V.shape or fQ.shape != fg_A.shape[:-2] + fg_A.shape[-1:]:
        raise ShapeError(f"temporal_attend: question {fQ.shape}, audio {fg_A.shape}, visual {fsa_V.shape} disagree")
    a, wa = _pool(fQ, fg_A)
    v, wv = _pool(fQ, fsa_V)
    return TemporalOutputs(a, v, wa, wv)


def match_accuracy(f_sa_pos: Tensor, f_sa_neg: Tensor, params: Mapping[str, Tensor]) -> float:
    """Fraction of clips classified correctly from their segment logits averaged over time."""
    if f_sa_pos.shape != f_sa_neg.shape:
        raise ContractError("match_accuracy: streams must have the same shape")
    pos = match_logits(f_sa_pos, params).values.mean(axis=-2)
    neg = match_logits(f_sa_neg, params).values.mean(axis=-2)
    hits = np.concatenate([(pos[..., 1] > pos[..., 0]).ravel(), (neg[..., 0] >= neg[..., 1]).ravel()])
    return float(hits.mean())
