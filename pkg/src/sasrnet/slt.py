"""Source-wise learnable tokens: joint self-attention of segments and the token bank."""

from __future__ import annotations

import math
from dataclasses import dataclass

from . import tensor as tn
from .errors import ShapeError
from .tensor import Tensor


@dataclass
class SourceAwareEmbeddings:
    fs_A: Tensor  # [..., T, D]
    fs_V: Tensor  # [..., T, D]
    G_a: Tensor  # [..., C, D]
    G_v: Tensor  # [..., C, D]


def self_attend(f: Tensor) -> Tensor:
    """``softmax(f f^T / sqrt(D)) f`` over the last two axes; no parameters."""
    if f.values.ndim < 2 or f.shape[-2] < 1:
        raise ShapeError(f"self_attend: expected [..., m, D] with m >= 1, got {f.shape}")
    D = f.shape[-1]
    weights = tn.softmax(tn.scale(tn.matmul(f, tn.transpose(f)), 1.0 / math.sqrt(D)))
    return tn.matmul(weights, f)


def attend_with_tokens(f: Tensor, G: Tensor) -> tuple[Tensor, Tensor]:
    """Run each segment of ``f`` [..., T, D] jointly with the C tokens of ``G``.

    Returns the updated segments [..., T, D] and the per-segment token rows
    averaged over T, [..., C, D].
    """
    if f.shape[-1:] != G.shape[-1:] or G.values.ndim != 2:
        raise ShapeError(f"slt: features {f.shape} and token bank {G.shape} disagree")
    lead = f.shape[:-1]
    D = f.shape[-1]
    C = G.shape[0]
    seq = tn.concat([tn.reshape(f, lead + (1, D)), tn.expand(G, lead)], axis=-2)
    out = self_attend(seq)
    fs = tn.reshape(tn.slice_axis(out, 0, 1, axis=-2), lead + (D,))
    tokens = tn.slice_axis(out, 1, 1 + C, axis=-2)
    return fs, tn.mean_axis(tokens, axis=-3)


def slt_forward(fr_A: Tensor, fr_V: Tensor, G: Tensor) -> SourceAwareEmbeddings:
    if fr_A.shape != fr_V.shape:
        raise ShapeError(f"slt_forward: audio {fr_A.shape} and visual {fr_V.shape} differ")
    fs_A, G_a = attend_with_tokens(fr_A, G)
    fs_V, G_v = attend_with_tokens(fr_V, G)
    return SourceAwareEmbeddings(fs_A, fs_V, G_a, G_v)
