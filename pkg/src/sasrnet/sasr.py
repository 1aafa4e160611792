"""Source-aware semantic representation: token/feature cross-attention and token losses."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping

import numpy as np

from . import tensor as tn
from .errors import ContractError, ShapeError
from .slt import SourceAwareEmbeddings
from .tensor import Tensor


@dataclass
class EnrichedEmbeddings:
    fg_A: Tensor  # [..., T, D]
    fg_V: Tensor  # [..., T, D]
    G_a: Tensor  # [..., C, D], after the residual update
    G_v: Tensor


def scope(params: Mapping[str, Tensor], prefix: str) -> dict[str, Tensor]:
    """Parameters under ``prefix.`` with the prefix stripped."""
    cut = len(prefix) + 1
    return {k[cut:]: v for k, v in params.items() if k.startswith(prefix + ".")}


def cross_attend(a: Tensor, b: Tensor, params: Mapping[str, Tensor], return_weights: bool = False):
    """Queries from ``a``, keys and values from ``b``, each through its own affine map."""
    if a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"cross_attend: leading shapes of {a.shape} and {b.shape} differ")
    q = tn.linear(a, params["q.W"], params["q.b"])
    k = tn.linear(b, params["k.W"], params["k.b"])
    v = tn.linear(b, params["v.W"], params["v.b"])
    D = q.shape[-1]
    w = tn.softmax(tn.scale(tn.matmul(q, tn.transpose(k)), 1.0 / math.sqrt(D)))
    out = tn.matmul(w, v)
    return (out, w) if return_weights else out


def _stream(fs: Tensor, G: Tensor, p: Mapping[str, Tensor], layer_norm: bool) -> tuple[Tensor, Tensor]:
    upd = cross_attend(G, fs, scope(p, "tok"))
    G_new = tn.add(G, tn.linear(upd, p["tok_out.W"], p["tok_out.b"]))
    if layer_norm:
        G_new = tn.layer_norm(G_new)
    enriched = cross_attend(fs, G_new, scope(p, "feat"))
    return tn.linear(enriched, p["feat_out.W"], p["feat_out.b"]), G_new


def sasr_forward(src: SourceAwareEmbeddings, params: Mapping[str, Tensor], layer_norm: bool = False) -> EnrichedEmbeddings:
    """``params`` holds ``a.*`` and ``v.*`` groups for the audio and visual streams."""
    fg_A, G_a = _stream(src.fs_A, src.G_a, scope(params, "a"), layer_norm)
    fg_V, G_v = _stream(src.fs_V, src.G_v, scope(params, "v"), layer_norm)
    return EnrichedEmbeddings(fg_A, fg_V, G_a, G_v)


def token_logits(G: Tensor, W: Tensor, b: Tensor) -> Tensor:
    return tn.reshape(tn.linear(G, W, b), G.shape[:-1])


def loss_source(G_a: Tensor, G_v: Tensor, presence, params: Mapping[str, Tensor]) -> Tensor:
    """BCE of per-token presence logits, mean over tokens, summed over the two modalities."""
    p = np.asarray(presence, dtype=np.float64)
    if p.shape[-1:] != G_a.shape[-2:-1] or p.shape != G_a.shape[:-1]:
        raise ContractError(f"loss_source: presence shape {p.shape} does not match tokens {G_a.shape}")
    la = tn.bce_with_logits(token_logits(G_a, params["a.W"], params["a.b"]), p)
    lv = tn.bce_with_logits(token_logits(G_v, params["v.W"], params["v.b"]), p)
    return tn.add(la, lv)


def loss_reg(G: Tensor, params: Mapping[str, Tensor]) -> Tensor:
    """Cross-entropy classifying token i as category i through one shared affine map."""
    C = G.shape[0]
    if C < 1:
        raise ContractError("loss_reg: need at least one token")
    return tn.cross_entropy(tn.linear(G, params["W"], params["b"]), np.arange(C))


def token_accuracy(G: Tensor, params: Mapping[str, Tensor]) -> float:
    logits = G.values @ params["W"].values + params["b"].values
    return float(np.mean(logits.argmax(axis=-1) == np.arange(G.shape[0])))
