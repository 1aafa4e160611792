"""Checks of what a trained model attends to against planted scene ground truth."""

from __future__ import annotations

from dataclasses import replace
from typing import Mapping, Sequence

import numpy as np

from .features import Batch, stack_bundles
from .model import ModelConfig, forward
from .sasr import scope, token_accuracy
from .st_attention import make_negative_pair, match_accuracy
from .synth import (EXIST, TEMPORAL, GenConfig, PrototypeBank, SceneSpec, answer_vocab, category_names,
                    generate_scene, question_vocab)
from .tensor import Tensor


def scenes_to_batch(specs: Sequence[SceneSpec], protos: PrototypeBank, noise_sigma: float, gen: GenConfig) -> Batch:
    return stack_bundles([generate_scene(s, protos, noise_sigma, gen) for s in specs], gen.dims)


def temporal_probe_batch(specs: Sequence[SceneSpec], protos: PrototypeBank, gen: GenConfig) -> Batch:
    """Noiseless single-source scenes asked "which source sounds first".

    The generator only poses that question with two or more sources; with one
    source the answer is that source and the queried interval is its own.
    """
    qv = {w: i for i, w in enumerate(question_vocab(gen.C))}
    av = {w: i for i, w in enumerate(answer_vocab(gen.C))}
    words = [qv[w] for w in ("which", "source", "sounds", "first")]
    bundles = []
    for s in specs:
        b = generate_scene(replace(s, template_id=EXIST, query_category=s.active_sources[0]), protos, 0.0, gen)
        b.question_tokens = list(words)
        b.answer_id = av[category_names(gen.C)[s.active_sources[0]]]
        b.template_id = TEMPORAL
        bundles.append(b)
    return stack_bundles(bundles, gen.dims)


def attention_maps(params: Mapping[str, Tensor], cfg: ModelConfig, batch: Batch) -> dict:
    res = forward(params, batch, cfg, with_losses=False)
    out = {}
    if res.spatial_weights is not None:
        out["spatial"] = res.spatial_weights.values
    if res.temporal_weights_A is not None:
        out["temporal_audio"] = res.temporal_weights_A.values
        out["temporal_visual"] = res.temporal_weights_V.values
    return out


def spatial_hit_rate(params: Mapping[str, Tensor], cfg: ModelConfig, specs: Sequence[SceneSpec], batch: Batch) -> float:
    """Share of sounding segments whose spatial arg-max is the sounding source's cell.

    Only segments with exactly one source sounding are counted.
    """
    weights = attention_maps(params, cfg, batch)["spatial"]
    hits = total = 0
    for i, spec in enumerate(specs):
        for t in range(cfg.T):
            active = spec.sounding_at(t)
            if len(active) != 1:
                continue
            total += 1
            hits += int(np.argmax(weights[i, t]) == spec.position_of[active[0]])
    return hits / total if total else float("nan")


def temporal_hit_rate(params: Mapping[str, Tensor], cfg: ModelConfig, specs: Sequence[SceneSpec], batch: Batch,
                      stream: str = "temporal_audio") -> float:
    """Share of scenes whose temporal arg-max lies in the queried source's interval.

    The queried source is the first-sounding one for temporal questions and
    the named category otherwise (falling back to the only source).
    """
    weights = attention_maps(params, cfg, batch)[stream]
    hits = 0
    for i, spec in enumerate(specs):
        if spec.template_id == TEMPORAL:
            target = spec.first_source()
        elif spec.query_category in spec.active_sources:
            target = spec.query_category
        else:
            target = spec.active_sources[0]
        s, e = spec.sounding[target]
        hits += int(s <= int(np.argmax(weights[i])) <= e)
    return hits / len(specs) if specs else float("nan")


def token_classification_accuracy(params: Mapping[str, Tensor]) -> float:
    return token_accuracy(params["tokens.G"], scope(params, "reg"))


def heldout_match_accuracy(params: Mapping[str, Tensor], cfg: ModelConfig, batch: Batch, batch_size: int = 16,
                           seed: int = 0) -> float:
    """Clip-level matched/mismatched accuracy over consecutive held-out batches."""
    rng = np.random.default_rng(seed)
    hits = []
    for start in range(0, len(batch) - batch_size + 1, batch_size):
        sub = batch.subset(np.arange(start, start + batch_size))
        perm = make_negative_pair(batch_size, rng)
        res = forward(params, sub, cfg, neg_perm=perm, with_losses=False)
        hits.append(match_accuracy(res.f_sa, res.f_sa_neg, scope(params, "match")))
    return float(np.mean(hits)) if hits else float("nan")


def single_source_scenes(n: int, gen: GenConfig, seed: int = 7, template_id: int = 0) -> list[SceneSpec]:
    """Scenes with one source whose question names that source."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x51]))
    T = gen.T
    lo, hi = max(1, T // 4), max(1, T // 2 + 1)
    specs = []
    for i in range(n):
        c = int(rng.integers(gen.C))
        length = int(rng.integers(lo, hi + 1))
        start = int(rng.integers(0, T - length + 1))
        specs.append(SceneSpec(f"single-{seed}-{i:04d}", [c], {c: int(rng.integers(gen.P))}, {c: (start, start + length - 1)},
                               int(rng.integers(2**62)), template_id, c))
    return specs
