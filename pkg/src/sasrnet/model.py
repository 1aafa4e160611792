"""Parameter layout and the end-to-end forward pass."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Mapping

import numpy as np

from . import tensor as tn
from .errors import ContractError
from .features import Batch, Dims, encode_questions, project_audio
from .head import Prediction, fuse_and_classify, loss_avqa
from .sasr import EnrichedEmbeddings, loss_reg, loss_source, sasr_forward, scope
from .slt import SourceAwareEmbeddings, slt_forward
from .st_attention import loss_match, spatial_attend, temporal_attend
from .tensor import Tensor


@dataclass
class ModelConfig:
    T: int = 8
    P: int = 16
    L_max: int = 12
    D_a: int = 32
    D: int = 64
    C: int = 4
    n_words: int = 16
    n_answers: int = 11
    slt_on: bool = True
    sasr_on: bool = True
    sa_on: bool = True
    ta_on: bool = True
    layer_norm: bool = False
    # learned position codes on spatial values and temporal keys/values
    pos_embed: bool = True
    pos_scale: float = 1.0  # init std of the spatial codes; temporal codes start at zero
    # raw features are multiplied by this before entering the network; None -> sqrt(D)
    input_scale: float | None = None

    @property
    def feature_gain(self) -> float:
        return math.sqrt(self.D) if self.input_scale is None else float(self.input_scale)

    @property
    def dims(self) -> Dims:
        return Dims(self.T, self.P, self.L_max, self.D_a, self.D, self.C)

    @classmethod
    def for_dataset(cls, dims: Dims, n_words: int, n_answers: int, **flags) -> "ModelConfig":
        return cls(T=dims.T, P=dims.P, L_max=dims.L_max, D_a=dims.D_a, D=dims.D, C=dims.C,
                   n_words=n_words, n_answers=n_answers, **flags)

    def to_dict(self) -> dict:
        return asdict(self)


Params = dict  # name -> Tensor, in a fixed order

PARAM_GROUPS = ("tokens", "lstm", "audio_proj", "sasr", "source", "reg", "spatial", "match", "temporal", "head")


def _shapes(cfg: ModelConfig) -> list[tuple[str, tuple[int, ...], str]]:
    D, C = cfg.D, cfg.C
    out = [("tokens.G", (C, D), "token")]
    out += [("lstm.embed", (cfg.n_words, D), "embed"), ("lstm.W_ih", (D, 4 * D), "fan"),
            ("lstm.W_hh", (D, 4 * D), "fan"), ("lstm.b", (4 * D,), "fan")]
    out += [("audio_proj.W", (cfg.D_a, D), "fan"), ("audio_proj.b", (D,), "fan")]
    for m in ("a", "v"):
        for blk in ("tok", "feat"):
            for proj in ("q", "k", "v"):
                out += [(f"sasr.{m}.{blk}.{proj}.W", (D, D), "fan"), (f"sasr.{m}.{blk}.{proj}.b", (D,), "fan")]
            out += [(f"sasr.{m}.{blk}_out.W", (D, D), "fan"), (f"sasr.{m}.{blk}_out.b", (D,), "fan")]
    out += [("source.a.W", (D, 1), "fan"), ("source.a.b", (1,), "fan"),
            ("source.v.W", (D, 1), "fan"), ("source.v.b", (1,), "fan")]
    out += [("reg.W", (D, C), "fan"), ("reg.b", (C,), "fan")]
    out += [("spatial.W", (2 * D, D), "fan"), ("spatial.b", (D,), "fan")]
    out += [("match.W", (D, 2), "fan"), ("match.b", (2,), "fan")]
    if cfg.pos_embed:
        out += [("spatial.pos", (cfg.P, D), "pos"), ("temporal.pos_a", (cfg.T, D), "zero"),
                ("temporal.pos_v", (cfg.T, D), "zero")]
    out += [("head.fuse.W", (2 * D, D), "fan"), ("head.fuse.b", (D,), "fan"),
            ("head.out.W", (D, cfg.n_answers), "fan"), ("head.out.b", (cfg.n_answers,), "fan")]
    return out


def init_params(cfg: ModelConfig, seed: int = 0) -> Params:
    """Uniform(+-1/sqrt(fan_in)) for affine maps, uniform(+-1/sqrt(D)) for tokens, N(0,1) embeddings.

    Spatial position codes start at N(0, pos_scale); temporal ones at zero.
    """
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x7A3]))
    params: Params = {}
    layout = _shapes(cfg)
    shapes = {name: shape for name, shape, _ in layout}
    for name, shape, kind in layout:
        if kind == "token":
            bound = 1.0 / math.sqrt(cfg.D)
            vals = rng.uniform(-bound, bound, size=shape)
        elif kind == "embed":
            vals = rng.normal(0.0, 1.0, size=shape)
        elif kind == "pos":
            vals = rng.normal(0.0, cfg.pos_scale, size=shape)
        elif kind == "zero":
            vals = np.zeros(shape)
        else:
            fan_in = shapes[name[:-2] + ".W"][0] if name.endswith(".b") and name[:-2] + ".W" in shapes else shape[0]
            if name == "lstm.b":
                fan_in = cfg.D
            bound = 1.0 / math.sqrt(fan_in)
            vals = rng.uniform(-bound, bound, size=shape)
        params[name] = tn.parameter(vals, name=name)
    return params


def group_of(name: str) -> str:
    return name.split(".", 1)[0]


@dataclass
class ForwardResult:
    pred: Prediction
    parts: dict = field(default_factory=dict)
    fQ: Tensor | None = None
    src: SourceAwareEmbeddings | None = None
    enriched: EnrichedEmbeddings | None = None
    spatial_weights: Tensor | None = None
    temporal_weights_A: Tensor | None = None
    temporal_weights_V: Tensor | None = None
    f_sa: Tensor | None = None
    f_sa_neg: Tensor | None = None


def forward(params: Mapping[str, Tensor], batch: Batch, cfg: ModelConfig, neg_perm=None,
            with_losses: bool = True) -> ForwardResult:
    """Run the network on a batch.

    ``neg_perm`` pairs sample i's audio with the visual stream of sample
    ``neg_perm[i]`` for the match loss; without it that term is absent.
    """
    if batch.audio.shape[1:] != (cfg.T, cfg.D_a) or batch.visual_map.shape[1:] != (cfg.T, cfg.P, cfg.D):
        raise ContractError(f"batch features {batch.audio.shape[1:]}/{batch.visual_map.shape[1:]} do not match "
                            f"model dims T={cfg.T} D_a={cfg.D_a} P={cfg.P} D={cfg.D}")
    B = len(batch)
    fQ = encode_questions(batch.tokens, batch.lengths, scope(params, "lstm"))
    k = cfg.feature_gain
    fr_A = project_audio(tn.constant(batch.audio * k), params["audio_proj.W"], params["audio_proj.b"])
    fr_V = tn.constant(batch.visual_vec * k)
    X = tn.constant(batch.visual_map * k)
    G = params["tokens.G"]

    if cfg.slt_on:
        src = slt_forward(fr_A, fr_V, G)
    else:
        G_b = tn.expand(G, (B,))
        src = SourceAwareEmbeddings(fr_A, fr_V, G_b, G_b)

    if cfg.sasr_on:
        enr = sasr_forward(src, scope(params, "sasr"), layer_norm=cfg.layer_norm)
    else:
        enr = EnrichedEmbeddings(src.fs_A, src.fs_V, src.G_a, src.G_v)

    pos = params.get("spatial.pos") if cfg.pos_embed else None
    res = ForwardResult(pred=None, fQ=fQ, src=src, enriched=enr)
    if cfg.sa_on:
        sp = spatial_attend(X, enr.fg_A, enr.fg_V, scope(params, "spatial"), pos=pos)
        f_sa = sp.f_sa
        res.spatial_weights = sp.weights
        if neg_perm is not None:
            neg = spatial_attend(tn.take(X, neg_perm, axis=0), enr.fg_A, tn.take(enr.fg_V, neg_perm, axis=0),
                                 scope(params, "spatial"), pos=pos)
            res.f_sa_neg = neg.f_sa
    else:
        f_sa = enr.fg_V
    res.f_sa = f_sa

    if cfg.ta_on:
        keys_A, keys_V = enr.fg_A, f_sa
        if cfg.pos_embed:
            keys_A = tn.add(keys_A, tn.expand(params["temporal.pos_a"], (B,)))
            keys_V = tn.add(keys_V, tn.expand(params["temporal.pos_v"], (B,)))
        ta = temporal_attend(fQ, keys_A, keys_V)
        fta_A, fta_V = ta.f_ta_A, ta.f_ta_V
        res.temporal_weights_A, res.temporal_weights_V = ta.weights_A, ta.weights_V
    else:
        fta_A, fta_V = tn.mean_axis(enr.fg_A, axis=-2), tn.mean_axis(f_sa, axis=-2)

    res.pred = fuse_and_classify(fta_A, fta_V, enr.fg_A, enr.fg_V, fQ, scope(params, "head"))

    if with_losses:
        res.parts["l_avqa"] = loss_avqa(res.pred, batch.answers)
        if cfg.sasr_on:
            res.parts["l_source"] = loss_source(enr.G_a, enr.G_v, batch.presence, scope(params, "source"))
            res.parts["l_reg"] = loss_reg(G, scope(params, "reg"))
        if res.f_sa_neg is not None:
            res.parts["l_match"] = loss_match(f_sa, res.f_sa_neg, scope(params, "match"))
    return res


def count_parameters(params: Mapping[str, Tensor]) -> int:
    return sum(p.size for p in params.values())
