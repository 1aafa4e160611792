"""Adam with step decay, the training loop, checkpoints and evaluation."""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Mapping

import numpy as np

from . import tensor as tn
from .errors import ContractError, CorruptionError, FormatError, NumericAbort
from .features import Batch, Dataset
from .head import total_loss
from .model import ModelConfig, Params, forward, init_params
from .st_attention import make_negative_pair
from .tensor import Tensor

log = logging.getLogger(__name__)

CKPT_MAGIC = b"SCKP"


@dataclass
class TrainConfig:
    batch_size: int = 16
    epochs: int = 80
    lr: float = 1e-4
    decay_factor: float = 0.3
    decay_every: int = 16
    lambda_source: float = 0.5
    lambda_reg: float = 0.5
    lambda_match: float = 0.5
    seed: int = 0
    slt_on: bool = True
    sasr_on: bool = True
    sa_on: bool = True
    ta_on: bool = True
    layer_norm: bool = False
    pos_embed: bool = True
    pos_scale: float = 1.0
    input_scale: float | None = None

    def validate(self) -> None:
        if not self.lr > 0:
            raise ContractError(f"lr must be positive, got {self.lr}")
        if not 0 < self.decay_factor <= 1:
            raise ContractError(f"decay_factor must lie in (0, 1], got {self.decay_factor}")
        if self.batch_size < 1 or self.epochs < 0 or self.decay_every < 1:
            raise ContractError("batch_size and decay_every must be >= 1, epochs >= 0")

    @property
    def lambdas(self) -> tuple[float, float, float]:
        return self.lambda_source, self.lambda_reg, self.lambda_match

    def model_flags(self) -> dict:
        return {k: getattr(self, k) for k in ("slt_on", "sasr_on", "sa_on", "ta_on", "layer_norm", "pos_embed", "pos_scale", "input_scale")}

    @classmethod
    def from_dict(cls, d: Mapping) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ContractError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


def lr_at(epoch: int, cfg: TrainConfig) -> float:
    if epoch < 0:
        raise ContractError("epoch must be non-negative")
    return cfg.lr * cfg.decay_factor ** (epoch // cfg.decay_every)


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_step(params: Mapping[str, Tensor], state: AdamState, lr: float) -> None:
    """Bias-corrected Adam update in place; missing gradients count as zero."""
    for name, p in params.items():
        if p.grad is not None and not np.all(np.isfinite(p.grad)):
            raise NumericAbort(f"non-finite gradient for {name}", term=name, step=state.step)
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, p in params.items():
        g = p.grad if p.grad is not None else np.zeros(p.shape)
        m = state.m.setdefault(name, np.zeros(p.shape))
        v = state.v.setdefault(name, np.zeros(p.shape))
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.values -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


def zero_grads(params: Mapping[str, Tensor]) -> None:
    for p in params.values():
        p.grad = None


# --- checkpoints ----------------------------------------------------------


def save_checkpoint(path, params: Mapping[str, Tensor], model_cfg: ModelConfig, train_cfg: TrainConfig | None = None,
                    step: int = 0, epoch: int = 0, extra: dict | None = None) -> None:
    """``SCKP``, u32 header length, JSON header, u32 record count, tensor records."""
    header = {"model": model_cfg.to_dict(), "train": asdict(train_cfg) if train_cfg else None,
              "step": step, "epoch": epoch}
    if extra:
        header.update(extra)
    raw = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<I", len(raw)))
        fh.write(raw)
        fh.write(struct.pack("<I", len(params)))
        for name, p in params.items():
            tn.write_record(fh, name, p.values)


def load_checkpoint(path) -> tuple[Params, ModelConfig, dict]:
    with open(path, "rb") as fh:
        if fh.read(4) != CKPT_MAGIC:
            raise FormatError(f"{path}: not a checkpoint (bad magic)")
        head = fh.read(4)
        if len(head) != 4:
            raise CorruptionError(f"{path}: truncated header")
        (n,) = struct.unpack("<I", head)
        raw = fh.read(n)
        if len(raw) != n:
            raise CorruptionError(f"{path}: truncated header")
        header = json.loads(raw)
        (count,) = struct.unpack("<I", fh.read(4))
        params = {}
        for _ in range(count):
            name, values = tn.read_record(fh)
            params[name] = tn.parameter(values, name=name)
    return params, ModelConfig(**header["model"]), header


# --- evaluation -----------------------------------------------------------


def predict(params: Mapping[str, Tensor], cfg: ModelConfig, batch: Batch, chunk: int = 256) -> np.ndarray:
    out = []
    for start in range(0, len(batch), chunk):
        sub = batch.subset(np.arange(start, min(len(batch), start + chunk)))
        out.append(forward(params, sub, cfg, with_losses=False).pred.logits.values.argmax(axis=-1))
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


def check_dims(cfg: ModelConfig, dataset: Dataset) -> None:
    d, m = dataset.dims, cfg.dims
    if d != m or len(dataset.manifest.question_vocab) != cfg.n_words or len(dataset.manifest.answer_vocab) != cfg.n_answers:
        raise ContractError(
            f"checkpoint dims {m.as_dict()} (words={cfg.n_words}, answers={cfg.n_answers}) do not match dataset dims "
            f"{d.as_dict()} (words={len(dataset.manifest.question_vocab)}, answers={len(dataset.manifest.answer_vocab)})")


def accuracy_report(predictions: np.ndarray, batch: Batch, template_names) -> dict:
    """Overall and per-template accuracy of ``predictions`` against the batch answers."""
    hits = np.asarray(predictions) == batch.answers
    per = {}
    for tid in sorted(set(int(t) for t in batch.templates)):
        mask = batch.templates == tid
        name = template_names[tid] if tid < len(template_names) else f"template{tid}"
        per[name] = {"n": int(mask.sum()), "correct": int(hits[mask].sum()), "accuracy": float(hits[mask].mean())}
    return {"n": int(hits.size), "correct": int(hits.sum()),
            "overall": float(hits.mean()) if hits.size else 0.0, "per_template": per}


def evaluate(params: Mapping[str, Tensor], cfg: ModelConfig, dataset: Dataset) -> dict:
    check_dims(cfg, dataset)
    batch = dataset.arrays()
    return accuracy_report(predict(params, cfg, batch), batch, dataset.manifest.templates)


# --- training -------------------------------------------------------------


def epoch_order(n: int, seed: int, epoch: int) -> np.ndarray:
    return np.random.default_rng(np.random.SeedSequence([seed, epoch, 0xE0])).permutation(n)


def negative_rng(seed: int, step: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, step, 0xD3]))


def train_step(params: Params, state: AdamState, batch: Batch, model_cfg: ModelConfig, cfg: TrainConfig,
               lr: float, global_step: int):
    perm = make_negative_pair(len(batch), negative_rng(cfg.seed, global_step)) if model_cfg.sa_on else None
    zero_grads(params)
    with tn.Tape():
        res = forward(params, batch, model_cfg, neg_perm=perm)
        try:
            bundle = total_loss(res.parts, cfg.lambdas)
        except NumericAbort as exc:
            exc.step = global_step
            raise
        tn.backward(bundle.tensor)
    try:
        adam_step(params, state, lr)
    except NumericAbort as exc:
        exc.step = global_step
        raise
    return bundle, res


@dataclass
class TrainResult:
    params: Params
    model_cfg: ModelConfig
    checkpoints: list[Path]
    metrics_path: Path | None
    history: list[dict]


def train(dataset: Dataset, cfg: TrainConfig, out_dir=None, on_epoch=None) -> TrainResult:
    """Train from scratch; write one checkpoint per epoch and a JSON-lines metrics log.

    ``on_epoch(epoch, params, model_cfg)`` is called after each epoch when given.
    """
    cfg.validate()
    m = dataset.manifest
    model_cfg = ModelConfig.for_dataset(m.dims, len(m.question_vocab), len(m.answer_vocab), **cfg.model_flags())
    params = init_params(model_cfg, cfg.seed)
    state = AdamState()
    data = dataset.arrays()
    n = len(data)
    steps_per_epoch = n // cfg.batch_size
    if steps_per_epoch == 0 and cfg.epochs > 0:
        raise ContractError(f"dataset of {n} samples is smaller than one batch of {cfg.batch_size}")
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    metrics_path = out / "metrics.jsonl" if out is not None else None
    metrics_fh = open(metrics_path, "w") if metrics_path else None
    history, checkpoints = [], []
    step = 0
    try:
        for epoch in range(cfg.epochs):
            lr = lr_at(epoch, cfg)
            order = epoch_order(n, cfg.seed, epoch)
            for k in range(steps_per_epoch):
                batch = data.subset(order[k * cfg.batch_size:(k + 1) * cfg.batch_size])
                bundle, _ = train_step(params, state, batch, model_cfg, cfg, lr, step)
                row = {"step": step, "epoch": epoch, "lr": lr, **bundle.as_dict()}
                history.append(row)
                if metrics_fh:
                    metrics_fh.write(json.dumps(row) + "\n")
                step += 1
            if history:
                recent = [r["total"] for r in history[-steps_per_epoch:]]
                log.info("epoch %d lr %.3g mean loss %.4f", epoch, lr, sum(recent) / len(recent))
            if out is not None:
                path = out / f"epoch_{epoch + 1:03d}.ckpt"
                save_checkpoint(path, params, model_cfg, cfg, step=step, epoch=epoch + 1,
                                extra={"answer_vocab": m.answer_vocab, "templates": m.templates})
                checkpoints.append(path)
            if on_epoch is not None:
                on_epoch(epoch, params, model_cfg)
    finally:
        if metrics_fh:
            metrics_fh.close()
    return TrainResult(params, model_cfg, checkpoints, metrics_path, history)


def smoothed(values, window: int = 50) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64)
    if v.size < window:
        return np.array([v.mean()]) if v.size else v
    kernel = np.ones(window) / window
    return np.convolve(v, kernel, mode="valid")
