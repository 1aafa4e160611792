"""Synthetic audio-visual scenes with planted sources and templated questions.

Each scene places 1-3 source categories on distinct grid cells and gives each
one a contiguous sounding interval. Audio at a segment is the sum of the
prototypes of the sources sounding then; a source's visual prototype sits on
its cell for the whole clip. Everything derives from ``(seed, scene index)``,
so generation is reproducible and order independent.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ContractError
from .features import Dims, FeatureBundle, write_dataset

TEMPLATES = ("exist", "count", "local", "temporal")
EXIST, COUNT, LOCAL, TEMPORAL = range(4)

_QUESTION_WORDS = ["<pad>", "is", "source", "sounding", "how", "many", "sources", "are", "where", "which", "sounds",
                   "first"]
_BASE_ANSWERS = ["yes", "no", "1", "2", "3", "left", "right"]
_INSTRUMENTS = ["guitar", "piano", "violin", "cello", "flute", "drum", "trumpet", "accordion", "saxophone",
                "clarinet", "xylophone", "tuba", "bagpipe", "banjo", "bassoon", "congas", "erhu", "guzheng", "pipa",
                "suona", "ukulele", "harp"]


def category_names(C: int) -> list[str]:
    return [_INSTRUMENTS[i] if i < len(_INSTRUMENTS) else f"source{i}" for i in range(C)]


def question_vocab(C: int) -> list[str]:
    return _QUESTION_WORDS + category_names(C)


def answer_vocab(C: int) -> list[str]:
    return _BASE_ANSWERS + category_names(C)


@dataclass
class GenConfig:
    n: int = 2500
    seed: int = 42
    noise_sigma: float = 0.1
    T: int = 8
    P: int = 16
    L_max: int = 12
    D_a: int = 32
    D: int = 64
    C: int = 4
    max_sources: int = 3
    test_fraction: float = 0.2

    @property
    def dims(self) -> Dims:
        return Dims(self.T, self.P, self.L_max, self.D_a, self.D, self.C)

    def validate(self) -> None:
        if self.n < 1:
            raise ContractError(f"n must be >= 1, got {self.n}")
        if min(self.T, self.P, self.D_a, self.D, self.C) < 1:
            raise ContractError("all dims must be positive")
        if self.L_max < 5:
            raise ContractError("L_max must fit the longest template (5 words)")
        if self.noise_sigma < 0:
            raise ContractError("noise_sigma must be non-negative")
        if not 0 <= self.test_fraction < 1:
            raise ContractError("test_fraction must lie in [0, 1)")
        if self.C + len(_QUESTION_WORDS) > 0xFFFF:
            raise ContractError("vocabulary too large for 16-bit ids")


@dataclass
class SceneSpec:
    scene_id: str
    active_sources: list[int]
    position_of: dict[int, int]
    sounding: dict[int, tuple[int, int]]  # inclusive [start, end]
    noise_seed: int
    template_id: int = EXIST
    query_category: int | None = None

    def validate(self, T: int, P: int, C: int) -> None:
        srcs = self.active_sources
        if not 1 <= len(srcs) <= 3 or len(set(srcs)) != len(srcs) or any(not 0 <= c < C for c in srcs):
            raise ContractError(f"{self.scene_id}: active sources {srcs} invalid for C={C}")
        cells = [self.position_of[c] for c in srcs]
        if len(set(cells)) != len(cells) or any(not 0 <= p < P for p in cells):
            raise ContractError(f"{self.scene_id}: positions {cells} must be distinct cells below {P}")
        for c in srcs:
            s, e = self.sounding[c]
            if not 0 <= s <= e < T:
                raise ContractError(f"{self.scene_id}: interval {(s, e)} of source {c} outside [0, {T})")
        starts = [self.sounding[c][0] for c in srcs]
        if len(set(starts)) != len(starts):
            raise ContractError(f"{self.scene_id}: sounding intervals must start at distinct times")

    def presence(self, C: int) -> np.ndarray:
        p = np.zeros(C, dtype=np.int64)
        p[list(self.active_sources)] = 1
        return p

    def sounding_at(self, t: int) -> list[int]:
        return [c for c in self.active_sources if self.sounding[c][0] <= t <= self.sounding[c][1]]

    def first_source(self) -> int:
        return min(self.active_sources, key=lambda c: self.sounding[c][0])

    def to_json(self) -> dict:
        return {
            "scene_id": self.scene_id,
            "active_sources": list(self.active_sources),
            "position_of": {str(c): p for c, p in self.position_of.items()},
            "sounding": {str(c): list(iv) for c, iv in self.sounding.items()},
            "noise_seed": self.noise_seed,
            "template_id": self.template_id,
            "query_category": self.query_category,
        }

    @classmethod
    def from_json(cls, d: dict) -> "SceneSpec":
        return cls(d["scene_id"], list(d["active_sources"]), {int(k): v for k, v in d["position_of"].items()},
                   {int(k): tuple(v) for k, v in d["sounding"].items()}, d["noise_seed"], d["template_id"],
                   d["query_category"])


@dataclass
class PrototypeBank:
    audio_proto: np.ndarray  # C x D_a
    visual_proto: np.ndarray  # C x D


def _unit_rows(rng: np.random.Generator, n: int, d: int, max_cos: float = 0.5) -> np.ndarray:
    rows = rng.uniform(-1.0, 1.0, size=(n, d))
    rows /= np.linalg.norm(rows, axis=1, keepdims=True)
    for _ in range(10_000):
        cos = rows @ rows.T
        np.fill_diagonal(cos, -np.inf)
        bad = np.argwhere(cos >= max_cos)
        if not len(bad):
            return rows
        i = int(bad[0].max())
        fresh = rng.uniform(-1.0, 1.0, size=d)
        rows[i] = fresh / np.linalg.norm(fresh)
    raise ContractError(f"cannot draw {n} prototypes of dimension {d} with cosine below {max_cos}")


def make_prototypes(seed: int, C: int, D_a: int, D: int) -> PrototypeBank:
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5A5A]))
    return PrototypeBank(_unit_rows(rng, C, D_a), _unit_rows(rng, C, D))


def _f32(a: np.ndarray) -> np.ndarray:
    # features live in f32 on disk; rounding here keeps bundles bit-identical after a round trip
    return np.asarray(a, dtype=np.float32).astype(np.float64)


def generate_scene(spec: SceneSpec, protos: PrototypeBank, noise_sigma: float, cfg: GenConfig) -> FeatureBundle:
    spec.validate(cfg.T, cfg.P, cfg.C)
    rng = np.random.default_rng(spec.noise_seed)
    T, P, D, D_a = cfg.T, cfg.P, cfg.D, cfg.D_a
    audio = np.zeros((T, D_a))
    for c in spec.active_sources:
        s, e = spec.sounding[c]
        audio[s:e + 1] += protos.audio_proto[c]
    vmap = np.zeros((T, P, D))
    for c in spec.active_sources:
        vmap[:, spec.position_of[c]] += protos.visual_proto[c]
    if noise_sigma > 0:
        audio += rng.normal(0.0, noise_sigma, size=audio.shape)
        vmap += rng.normal(0.0, noise_sigma, size=vmap.shape)
    vmap = _f32(vmap)
    tokens, answer = instantiate_question(spec, spec.template_id, cfg)
    return FeatureBundle(
        sample_id=spec.scene_id,
        audio_raw=_f32(audio),
        visual_vec=_f32(vmap.mean(axis=1)),
        visual_map=vmap,
        question_tokens=tokens,
        answer_id=answer,
        source_presence=spec.presence(cfg.C),
        template_id=spec.template_id,
    )


class TemplateNotApplicable(ContractError):
    pass


def instantiate_question(spec: SceneSpec, template_id: int, cfg: GenConfig) -> tuple[list[int], int]:
    names = category_names(cfg.C)
    qv = {w: i for i, w in enumerate(question_vocab(cfg.C))}
    av = {w: i for i, w in enumerate(answer_vocab(cfg.C))}
    cat = spec.query_category
    if template_id == EXIST:
        if cat is None:
            raise TemplateNotApplicable("exist template needs a query category")
        words = ["is", "source", names[cat], "sounding"]
        answer = "yes" if cat in spec.active_sources else "no"
    elif template_id == COUNT:
        words = ["how", "many", "sources", "are", "sounding"]
        answer = str(len(spec.active_sources))
    elif template_id == LOCAL:
        if cat is None or cat not in spec.active_sources:
            raise TemplateNotApplicable("local template needs an active query category")
        words = ["where", "is", "source", names[cat]]
        answer = "left" if spec.position_of[cat] < cfg.P / 2 else "right"
    elif template_id == TEMPORAL:
        if len(spec.active_sources) < 2:
            raise TemplateNotApplicable("temporal template needs at least two sources")
        words = ["which", "source", "sounds", "first"]
        answer = names[spec.first_source()]
    else:
        raise ContractError(f"unknown template id {template_id}")
    return [qv[w] for w in words], av[answer]


def sample_scene(index: int, template_id: int, cfg: GenConfig, rng: np.random.Generator | None = None) -> SceneSpec:
    """Draw a scene suited to ``template_id`` from the per-index random stream."""
    if rng is None:
        rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, index]))
    T, P, C = cfg.T, cfg.P, cfg.C
    k_max = min(cfg.max_sources, C, P, T)
    k_min = 2 if template_id == TEMPORAL else 1
    if k_min > k_max:
        raise TemplateNotApplicable(f"template {TEMPLATES[template_id]} needs {k_min} sources, at most {k_max} fit")
    k = int(rng.integers(k_min, k_max + 1))
    active = [int(c) for c in rng.choice(C, size=k, replace=False)]
    cells = [int(p) for p in rng.choice(P, size=k, replace=False)]
    starts = sorted(int(s) for s in rng.choice(T, size=k, replace=False))
    rng.shuffle(starts)
    sounding = {}
    lo, hi = max(1, T // 4), max(1, T // 2 + 1)
    for c, s in zip(active, starts):
        length = int(rng.integers(lo, hi + 1))
        sounding[c] = (s, min(T - 1, s + length - 1))
    query = None
    if template_id == EXIST:
        inactive = [c for c in range(C) if c not in active]
        if inactive and rng.random() < 0.5:
            query = int(rng.choice(inactive))
        else:
            query = int(rng.choice(active))
    elif template_id == LOCAL:
        query = int(rng.choice(active))
    noise_seed = int(rng.integers(0, 2**63 - 1))
    return SceneSpec(f"scene-{cfg.seed}-{index:06d}", active, dict(zip(active, cells)), sounding, noise_seed,
                     template_id, query)


def _split_key(scene_id: str) -> bytes:
    return hashlib.sha256(scene_id.encode("utf-8")).digest()


def split_ids(scene_ids: list[str], test_fraction: float) -> tuple[set[str], set[str]]:
    """Rank scenes by hash of their id; the lowest ``1 - test_fraction`` share trains."""
    ranked = sorted(scene_ids, key=_split_key)
    n_train = int(round(len(ranked) * (1.0 - test_fraction)))
    return set(ranked[:n_train]), set(ranked[n_train:])


@dataclass
class GeneratedDataset:
    train_path: Path
    test_path: Path
    scenes_path: Path
    train_ids: list[str] = field(default_factory=list)
    test_ids: list[str] = field(default_factory=list)
    template_counts: dict[str, int] = field(default_factory=dict)


def generate_scenes(cfg: GenConfig) -> list[SceneSpec]:
    cfg.validate()
    specs = []
    for i in range(cfg.n):
        template = i % len(TEMPLATES)
        for attempt in range(len(TEMPLATES)):
            try:
                specs.append(sample_scene(i, (template + attempt) % len(TEMPLATES), cfg))
                break
            except TemplateNotApplicable:
                continue
        else:
            raise ContractError(f"no template applies to scene {i}")
    return specs


def generate_dataset(cfg: GenConfig, out_dir) -> GeneratedDataset:
    """Generate ``cfg.n`` scenes and write ``train.sasr``, ``test.sasr`` and ``scenes.jsonl``."""
    cfg.validate()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    protos = make_prototypes(cfg.seed, cfg.C, cfg.D_a, cfg.D)
    specs = generate_scenes(cfg)
    bundles = [generate_scene(s, protos, cfg.noise_sigma, cfg) for s in specs]
    train_set, _ = split_ids([s.scene_id for s in specs], cfg.test_fraction)
    train = [b for b in bundles if b.sample_id in train_set]
    test = [b for b in bundles if b.sample_id not in train_set]
    qv, av = question_vocab(cfg.C), answer_vocab(cfg.C)
    result = GeneratedDataset(out_dir / "train.sasr", out_dir / "test.sasr", out_dir / "scenes.jsonl",
                              [b.sample_id for b in train], [b.sample_id for b in test])
    write_dataset(train, result.train_path, cfg.dims, qv, av, TEMPLATES)
    write_dataset(test, result.test_path, cfg.dims, qv, av, TEMPLATES)
    with open(result.scenes_path, "w") as fh:
        for s in specs:
            fh.write(json.dumps(s.to_json(), sort_keys=True) + "\n")
    for s in specs:
        name = TEMPLATES[s.template_id]
        result.template_counts[name] = result.template_counts.get(name, 0) + 1
    return result


def load_scenes(path) -> dict[str, SceneSpec]:
    out = {}
    with open(path) as fh:
        for line in fh:
            if line.strip():
                s = SceneSpec.from_json(json.loads(line))
                out[s.scene_id] = s
    return out


def answer_from_spec(spec: SceneSpec, cfg: GenConfig) -> int:
    """Independent re-labeling of a scene, used to cross-check the generator."""
    names = answer_vocab(cfg.C)
    if spec.template_id == EXIST:
        word = "yes" if spec.query_category in set(spec.active_sources) else "no"
    elif spec.template_id == COUNT:
        word = {1: "1", 2: "2", 3: "3"}[len(set(spec.active_sources))]
    elif spec.template_id == LOCAL:
        word = "right" if 2 * spec.position_of[spec.query_category] >= cfg.P else "left"
    else:
        first = sorted(spec.active_sources, key=lambda c: spec.sounding[c][0])[0]
        word = category_names(cfg.C)[first]
    return names.index(word)
