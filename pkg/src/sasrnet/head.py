"""Shortcut fusion, answer classification and the combined objective."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping

import numpy as np

from . import tensor as tn
from .errors import ContractError, NumericAbort, ShapeError
from .tensor import Tensor

LOSS_TERMS = ("l_avqa", "l_source", "l_reg", "l_match")


@dataclass
class Prediction:
    logits: Tensor  # [..., A]
    probs: Tensor  # [..., A]

    @property
    def answer_id(self):
        ids = self.probs.values.argmax(axis=-1)
        return int(ids) if ids.ndim == 0 else ids


def fuse_and_classify(fta_A: Tensor, fta_V: Tensor, fg_A: Tensor, fg_V: Tensor, fQ: Tensor,
                      params: Mapping[str, Tensor]) -> Prediction:
    if not (fta_A.shape == fta_V.shape == fQ.shape and fg_A.shape == fg_V.shape and fg_A.shape[:-2] + fg_A.shape[-1:] == fQ.shape):
        raise ShapeError(f"fuse_and_classify: pooled {fta_A.shape}/{fta_V.shape}, sequences {fg_A.shape}/{fg_V.shape}, question {fQ.shape} disagree")
    a = tn.add(fta_A, tn.mean_axis(fg_A, axis=-2))
    v = tn.add(fta_V, tn.mean_axis(fg_V, axis=-2))
    f_av = tn.linear(tn.tanh(tn.concat([a, v], axis=-1)), params["fuse.W"], params["fuse.b"])
    logits = tn.linear(tn.tanh(tn.mul(f_av, fQ)), params["out.W"], params["out.b"])
    return Prediction(logits, tn.softmax(logits))


def loss_avqa(pred: Prediction, y) -> Tensor:
    """Mean of ``-log prob[y]`` computed from the logits."""
    y = np.asarray(y, dtype=np.int64)
    A = pred.logits.shape[-1]
    if y.size and (y.min() < 0 or y.max() >= A):
        raise ContractError(f"loss_avqa: answer id outside [0, {A})")
    return tn.cross_entropy(pred.logits, y)


@dataclass
class LossBundle:
    l_avqa: float
    l_source: float
    l_reg: float
    l_match: float
    total: float
    lambdas: tuple[float, float, float]
    tensor: Tensor | None = None

    def as_dict(self) -> dict:
        return {k: getattr(self, k) for k in LOSS_TERMS + ("total",)}


def total_loss(parts: Mapping[str, Tensor | None], lambdas=(0.5, 0.5, 0.5)) -> LossBundle:
    """Weighted objective as one tape node; absent terms count as zero."""
    l1, l2, l3 = (float(x) for x in lambdas)
    for name in LOSS_TERMS:
        t = parts.get(name)
        if t is not None and not math.isfinite(t.item()):
            raise NumericAbort(f"loss term {name} is not finite", term=name)
    if parts.get("l_avqa") is None:
        raise ContractError("total_loss: l_avqa is required")
    terms, weights = [], []
    for name, w in zip(LOSS_TERMS, (1.0, l1, l2, l3)):
        if parts.get(name) is not None:
            terms.append(parts[name])
            weights.append(w)
    total = tn.weighted_sum(terms, weights)
    vals = {name: (parts[name].item() if parts.get(name) is not None else 0.0) for name in LOSS_TERMS}
    return LossBundle(vals["l_avqa"], vals["l_source"], vals["l_reg"], vals["l_match"], total.item(),
                      (l1, l2, l3), tensor=total)
