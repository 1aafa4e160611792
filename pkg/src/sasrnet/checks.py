"""Finite-difference checks of every block's backward pass on tiny random inputs."""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Callable

import numpy as np

from . import tensor as tn
from .features import Batch, encode_questions
from .head import fuse_and_classify, loss_avqa, total_loss
from .model import ModelConfig, forward, init_params
from .sasr import loss_reg, loss_source, sasr_forward, scope
from .slt import SourceAwareEmbeddings, slt_forward
from .st_attention import loss_match, spatial_attend, temporal_attend
from .tensor import Tensor

BLOCKS = ("slt", "sasr", "spatial", "temporal", "head", "lstm")
TOLERANCE = 1e-4

# Small enough for a few thousand forward passes, large enough that every
# block exposes more than 100 coordinates.
TINY = ModelConfig(T=4, P=4, L_max=5, D_a=5, D=8, C=3, n_words=9, n_answers=6)


@dataclass
class BlockResult:
    block: str
    worst: float
    coords: int
    param: str
    index: int

    @property
    def passed(self) -> bool:
        return self.worst < TOLERANCE

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (f"{self.block:<11} worst_rel_err={self.worst:.3e} coords={self.coords:<5} "
                f"worst_at={self.param}[{self.index}] {status}")


def random_batch(cfg: ModelConfig, B: int, rng: np.random.Generator) -> Batch:
    lengths = rng.integers(2, cfg.L_max + 1, size=B)
    tokens = np.zeros((B, cfg.L_max), dtype=np.int64)
    for i, n in enumerate(lengths):
        tokens[i, :n] = rng.integers(1, cfg.n_words, size=n)
    vmap = rng.normal(size=(B, cfg.T, cfg.P, cfg.D)) * 0.3
    return Batch(sample_ids=[f"rand{i}" for i in range(B)], audio=rng.normal(size=(B, cfg.T, cfg.D_a)) * 0.3,
                 visual_vec=vmap.mean(axis=2), visual_map=vmap, tokens=tokens, lengths=lengths,
                 answers=rng.integers(0, cfg.n_answers, size=B),
                 presence=(rng.random((B, cfg.C)) < 0.5).astype(np.float64),
                 templates=np.zeros(B, dtype=np.int64))


def _readout(out: Tensor, rng: np.random.Generator) -> Callable[[Tensor], Tensor]:
    """A fixed random linear functional, so every output entry gets a distinct weight."""
    R = tn.constant(rng.normal(size=out.shape))
    return lambda x: tn.sum_all(tn.mul(x, R))


def _inputs(rng, *shapes, scale=0.5):
    return [tn.parameter(rng.normal(size=s) * scale, name=f"input{i}") for i, s in enumerate(shapes)]


def block_cases(cfg: ModelConfig = TINY, seed: int = 0, B: int = 2):
    """(block name, loss closure, named tensors to perturb) for each block and the whole model."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x6C]))
    params = init_params(cfg, seed)
    for p in params.values():
        p.values = p.values + rng.normal(size=p.shape) * 0.1  # move off the init (zero codes, etc.)
    T, P, D, C = cfg.T, cfg.P, cfg.D, cfg.C
    batch = random_batch(cfg, B, rng)
    cases = []

    fr_A, fr_V = _inputs(rng, (B, T, D), (B, T, D))
    G = params["tokens.G"]
    probe = slt_forward(fr_A, fr_V, G)
    heads = [_readout(x, rng) for x in (probe.fs_A, probe.fs_V, probe.G_a, probe.G_v)]

    def slt_loss():
        s = slt_forward(fr_A, fr_V, G)
        return tn.weighted_sum([h(x) for h, x in zip(heads, (s.fs_A, s.fs_V, s.G_a, s.G_v))], [1.0] * 4)

    cases.append(("slt", slt_loss, {"tokens.G": G, "fr_A": fr_A, "fr_V": fr_V}))

    fs_A, fs_V = _inputs(rng, (B, T, D), (B, T, D))
    Gs_a, Gs_v = _inputs(rng, (B, C, D), (B, C, D))
    sasr_p = scope(params, "sasr")
    src = SourceAwareEmbeddings(fs_A, fs_V, Gs_a, Gs_v)
    enr = sasr_forward(src, sasr_p)
    ha, hv = _readout(enr.fg_A, rng), _readout(enr.fg_V, rng)
    src_p, reg_p = scope(params, "source"), scope(params, "reg")

    def sasr_loss():
        e = sasr_forward(src, sasr_p)
        return tn.weighted_sum([ha(e.fg_A), hv(e.fg_V), loss_source(e.G_a, e.G_v, batch.presence, src_p),
                                loss_reg(G, reg_p)], [1.0, 1.0, 1.0, 1.0])

    sasr_named = {f"sasr.{k}": v for k, v in sasr_p.items()}
    sasr_named.update({f"source.{k}": v for k, v in src_p.items()})
    sasr_named.update({f"reg.{k}": v for k, v in reg_p.items()})
    sasr_named.update({"fs_A": fs_A, "fs_V": fs_V, "G_a": Gs_a, "G_v": Gs_v})
    cases.append(("sasr", sasr_loss, sasr_named))

    X, fg_A, fg_V = _inputs(rng, (B, T, P, D), (B, T, D), (B, T, D))
    sp_p, m_p = scope(params, "spatial"), scope(params, "match")
    pos = params["spatial.pos"]
    perm = np.roll(np.arange(B), 1)
    hs = _readout(spatial_attend(X, fg_A, fg_V, sp_p, pos=pos).f_sa, rng)

    def spatial_loss():
        a = spatial_attend(X, fg_A, fg_V, sp_p, pos=pos)
        neg = spatial_attend(tn.take(X, perm, axis=0), fg_A, tn.take(fg_V, perm, axis=0), sp_p, pos=pos)
        return tn.weighted_sum([hs(a.f_sa), loss_match(a.f_sa, neg.f_sa, m_p)], [1.0, 1.0])

    sp_named = {f"spatial.{k}": v for k, v in sp_p.items()}
    sp_named.update({f"match.{k}": v for k, v in m_p.items()})
    sp_named.update({"X": X, "fg_A": fg_A, "fg_V": fg_V})
    cases.append(("spatial", spatial_loss, sp_named))

    fQ, ta_A, ta_V = _inputs(rng, (B, D), (B, T, D), (B, T, D), scale=1.0)
    probe_t = temporal_attend(fQ, ta_A, ta_V)
    h1, h2 = _readout(probe_t.f_ta_A, rng), _readout(probe_t.f_ta_V, rng)

    def temporal_loss():
        t = temporal_attend(fQ, ta_A, ta_V)
        return tn.weighted_sum([h1(t.f_ta_A), h2(t.f_ta_V)], [1.0, 1.0])

    cases.append(("temporal", temporal_loss, {"fQ": fQ, "fg_A": ta_A, "fsa_V": ta_V}))

    hA, hV, hgA, hgV, hQ = _inputs(rng, (B, D), (B, D), (B, T, D), (B, T, D), (B, D))
    head_p = scope(params, "head")

    def head_loss():
        return loss_avqa(fuse_and_classify(hA, hV, hgA, hgV, hQ, head_p), batch.answers)

    head_named = {f"head.{k}": v for k, v in head_p.items()}
    head_named.update({"fta_A": hA, "fta_V": hV, "fg_A": hgA, "fg_V": hgV, "fQ": hQ})
    cases.append(("head", head_loss, head_named))

    lstm_p = scope(params, "lstm")
    hq = _readout(encode_questions(batch.tokens, batch.lengths, lstm_p), rng)

    def lstm_loss():
        return hq(encode_questions(batch.tokens, batch.lengths, lstm_p))

    cases.append(("lstm", lstm_loss, {f"lstm.{k}": v for k, v in lstm_p.items()}))

    perm_e2e = np.roll(np.arange(B), 1)

    def e2e_loss():
        res = forward(params, batch, cfg, neg_perm=perm_e2e)
        return total_loss(res.parts, (0.5, 0.5, 0.5)).tensor

    cases.append(("end-to-end", e2e_loss, dict(params)))

    ln_cfg = replace(cfg, layer_norm=True)

    def e2e_ln_loss():
        res = forward(params, batch, ln_cfg, neg_perm=perm_e2e)
        return total_loss(res.parts, (0.5, 0.5, 0.5)).tensor

    cases.append(("e2e+ln", e2e_ln_loss, dict(params)))
    return cases


def run_gradchecks(samples: int = 100, seed: int = 0, step: float = 1e-5, cfg: ModelConfig = TINY) -> list[BlockResult]:
    out = []
    for name, loss, named in block_cases(cfg, seed):
        tensors = list(named.values())
        report: dict = {}
        worst = tn.grad_check(loss, tensors, step=step, samples=samples, seed=seed, names=list(named), report=report)
        coords = min(samples, sum(t.size for t in tensors))
        out.append(BlockResult(name, worst, coords, report.get("name", "-"), int(report.get("index", -1))))
    return out
