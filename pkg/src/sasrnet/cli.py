"""``sasrnet`` command line: gen | train | eval | gradcheck | export-attn.

Configuration is layered: built-in defaults, then the JSON file given with
``--config``, then ``SASR_SEED`` from the environment, then explicit flags.
The JSON file may hold a ``gen`` object (generator fields), a ``train``
object (trainer fields) and the path keys ``data``, ``out`` and ``ckpt``.

Exit codes: 0 ok, 2 configuration, 3 I/O, 4 numeric abort, 5 gradcheck failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from .errors import ContractError, FormatError, NumericAbort, SasrError

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC, EXIT_GRADCHECK = 0, 2, 3, 4, 5

log = logging.getLogger("sasrnet")


class ConfigError(ContractError):
    pass


PATH_KEYS = ("data", "out", "ckpt")


@dataclass
class CliConfig:
    gen: dict = field(default_factory=dict)
    train: dict = field(default_factory=dict)
    data: str | None = None
    out: str | None = None
    ckpt: str | None = None

    def gen_config(self):
        from .synth import GenConfig
        return _build(GenConfig, self.gen, "gen")

    def train_config(self):
        from .trainer import TrainConfig
        return _build(TrainConfig, self.train, "train")


def _build(cls, values: dict, section: str):
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(values) - known)
    if unknown:
        raise ConfigError(f"unknown {section} config keys: {unknown}")
    try:
        obj = cls(**values)
        obj.validate()
    except TypeError as exc:
        raise ConfigError(f"bad {section} config: {exc}") from exc
    return obj


def load_config(path: str | None, env=None) -> CliConfig:
    """Defaults overlaid by the JSON file and then by ``SASR_SEED``."""
    env = os.environ if env is None else env
    cfg = CliConfig()
    if path:
        try:
            raw = json.loads(Path(path).read_text())
        except OSError as exc:
            raise OSError(f"cannot read config {path}: {exc.strerror}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
        if not isinstance(raw, dict):
            raise ConfigError(f"config {path} must hold a JSON object")
        unknown = sorted(set(raw) - {"gen", "train", *PATH_KEYS})
        if unknown:
            raise ConfigError(f"unknown config keys: {unknown}")
        for section in ("gen", "train"):
            if not isinstance(raw.get(section, {}), dict):
                raise ConfigError(f"config section {section!r} must be an object")
        cfg.gen = dict(raw.get("gen", {}))
        cfg.train = dict(raw.get("train", {}))
        for key in PATH_KEYS:
            if key in raw:
                setattr(cfg, key, str(raw[key]))
    seed = env.get("SASR_SEED")
    if seed is not None and seed != "":
        try:
            seed = int(seed)
        except ValueError as exc:
            raise ConfigError(f"SASR_SEED must be an integer, got {seed!r}") from exc
        cfg.gen["seed"] = seed
        cfg.train["seed"] = seed
    return cfg


def _override(section: dict, **flags) -> None:
    for key, value in flags.items():
        if value is not None:
            section[key] = value


def _require(value, what: str) -> str:
    if not value:
        raise ConfigError(f"missing {what}")
    return value


def _dataset_path(data: str, split: str) -> Path:
    p = Path(data)
    if p.is_dir():
        p = p / f"{split}.sasr"
    if not p.exists():
        raise FileNotFoundError(f"dataset not found: {p}")
    return p


# --- subcommands ----------------------------------------------------------


def cmd_gen(args) -> int:
    from .synth import generate_dataset

    cfg = load_config(args.config)
    _override(cfg.gen, n=args.n, seed=args.seed)
    gen = cfg.gen_config()
    out = Path(_require(args.out or cfg.out, "--out directory"))
    result = generate_dataset(gen, out)
    print(f"wrote {out}: {len(result.train_ids)} train / {len(result.test_ids)} test samples")
    print("dims: " + " ".join(f"{k}={v}" for k, v in gen.dims.as_dict().items()))
    for name, count in result.template_counts.items():
        print(f"  {name:<9} {count}")
    return EXIT_OK


def cmd_train(args) -> int:
    from .features import read_dataset
    from .trainer import train

    cfg = load_config(args.config)
    _override(cfg.train, epochs=args.epochs, lr=args.lr, batch_size=args.batch_size, seed=args.seed)
    for flag in ("slt_on", "sasr_on", "sa_on", "ta_on"):
        value = getattr(args, flag)
        if value is not None:
            cfg.train[flag] = value
    tcfg = cfg.train_config()
    data = _require(args.data or cfg.data, "--data")
    out = Path(_require(args.out or cfg.out, "--out directory"))
    dataset = read_dataset(_dataset_path(data, "train"))
    result = train(dataset, tcfg, out)
    last = result.history[-1] if result.history else None
    print(f"trained {tcfg.epochs} epochs, {len(result.history)} steps; checkpoints in {out}")
    if last:
        print(f"final step loss: total={last['total']:.4f} avqa={last['l_avqa']:.4f}")
    test = Path(data) / "test.sasr" if Path(data).is_dir() else None
    if test is not None and test.exists() and result.checkpoints:
        from .trainer import evaluate
        rep = evaluate(result.params, result.model_cfg, read_dataset(test))
        print(f"test accuracy: {rep['overall']:.4f}")
    return EXIT_OK


def format_report(rep: dict) -> str:
    lines = [f"{'template':<10} {'n':>5} {'correct':>8} {'accuracy':>9}"]
    for name, row in rep["per_template"].items():
        lines.append(f"{name:<10} {row['n']:>5} {row['correct']:>8} {row['accuracy']:>9.4f}")
    lines.append(f"{'overall':<10} {rep['n']:>5} {rep['correct']:>8} {rep['overall']:>9.4f}")
    return "\n".join(lines)


def cmd_eval(args) -> int:
    from .features import read_dataset
    from .trainer import evaluate, load_checkpoint

    cfg = load_config(args.config)
    ckpt = _require(args.ckpt or cfg.ckpt, "--ckpt")
    data = _require(args.data or cfg.data, "--data")
    params, model_cfg, _ = load_checkpoint(ckpt)
    dataset = read_dataset(_dataset_path(data, "test"))
    rep = evaluate(params, model_cfg, dataset)
    rep["checkpoint"], rep["dataset"] = str(ckpt), str(_dataset_path(data, "test"))
    print(format_report(rep))
    out = Path(args.report) if args.report else Path(ckpt).with_suffix(".eval.json")
    out.write_text(json.dumps(rep, indent=2, sort_keys=True) + "\n")
    print(f"report written to {out}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .checks import run_gradchecks

    cfg = load_config(args.config)
    seed = args.seed if args.seed is not None else cfg.train.get("seed", 0)
    if args.samples < 1:
        raise ConfigError("--samples must be >= 1")
    results = run_gradchecks(samples=args.samples, seed=seed)
    for r in results:
        print(r.line())
    failed = [r for r in results if not r.passed]
    if failed:
        for r in failed:
            print(f"gradcheck failed in {r.block}: parameter {r.param} (entry {r.index}) "
                  f"relative error {r.worst:.3e}", file=sys.stderr)
        return EXIT_GRADCHECK
    print("all blocks pass")
    return EXIT_OK


def write_pgm(path: Path, weights: np.ndarray) -> None:
    """Binary greymap, one row per timestep, each row scaled by its own maximum."""
    T, P = weights.shape
    peak = weights.max(axis=1, keepdims=True)
    scaled = np.divide(weights, peak, out=np.zeros_like(weights), where=peak > 0)
    pixels = np.clip(np.rint(scaled * 255), 0, 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5 {P} {T} 255\n".encode("ascii"))
        fh.write(pixels.tobytes())


def write_csv(path: Path, rows) -> None:
    with open(path, "w") as fh:
        for row in np.atleast_2d(rows):
            fh.write(",".join(repr(float(v)) for v in row) + "\n")


def cmd_export_attn(args) -> int:
    from .analysis import attention_maps
    from .features import read_dataset, stack_bundles
    from .trainer import check_dims, load_checkpoint

    cfg = load_config(args.config)
    ckpt = _require(args.ckpt or cfg.ckpt, "--ckpt")
    data = _require(args.data or cfg.data, "--data")
    out = Path(_require(args.out or cfg.out, "--out directory"))
    params, model_cfg, _ = load_checkpoint(ckpt)
    dataset = read_dataset(_dataset_path(data, "test"))
    check_dims(model_cfg, dataset)
    try:
        bundle = dataset[dataset.index_of(args.sample)]
    except KeyError:
        raise ConfigError(f"sample {args.sample!r} not found in {data}") from None
    maps = attention_maps(params, model_cfg, stack_bundles([bundle], dataset.dims))
    out.mkdir(parents=True, exist_ok=True)
    written = []
    if "spatial" in maps:
        w = maps["spatial"][0]
        write_csv(out / f"{args.sample}_spatial.csv", w)
        write_pgm(out / f"{args.sample}_spatial.pgm", w)
        written += [f"{args.sample}_spatial.csv", f"{args.sample}_spatial.pgm"]
    if "temporal_audio" in maps:
        write_csv(out / f"{args.sample}_temporal_audio.csv", maps["temporal_audio"][0][None, :])
        write_csv(out / f"{args.sample}_temporal_visual.csv", maps["temporal_visual"][0][None, :])
        written += [f"{args.sample}_temporal_audio.csv", f"{args.sample}_temporal_visual.csv"]
    if not written:
        print("model has spatial and temporal attention disabled; nothing to export")
    for name in written:
        print(out / name)
    return EXIT_OK


# --- entry point ----------------------------------------------------------


def _bool(text: str) -> bool:
    if text.lower() in ("1", "true", "yes", "on"):
        return True
    if text.lower() in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_CONFIG)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="sasrnet", description="Source-aware audio-visual question answering on synthetic scenes.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen", help="generate a synthetic dataset")
    g.add_argument("--config")
    g.add_argument("--out")
    g.add_argument("--n", type=int)
    g.add_argument("--seed", type=int)
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", help="train a model")
    t.add_argument("--config")
    t.add_argument("--data", help="dataset directory (uses train.sasr) or a .sasr file")
    t.add_argument("--out", help="directory for checkpoints and metrics.jsonl")
    t.add_argument("--epochs", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--seed", type=int)
    for flag in ("slt_on", "sasr_on", "sa_on", "ta_on"):
        t.add_argument(f"--{flag.replace('_', '-')}", dest=flag, type=_bool, metavar="BOOL")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--config")
    e.add_argument("--ckpt")
    e.add_argument("--data", help="dataset directory (uses test.sasr) or a .sasr file")
    e.add_argument("--report", help="JSON report path (default: next to the checkpoint)")
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("gradcheck", help="finite-difference check of every block")
    c.add_argument("--config")
    c.add_argument("--samples", type=int, default=100)
    c.add_argument("--seed", type=int)
    c.set_defaults(func=cmd_gradcheck)

    x = sub.add_parser("export-attn", help="write attention maps of one sample as CSV and PGM")
    x.add_argument("--config")
    x.add_argument("--ckpt")
    x.add_argument("--data", help="dataset directory (uses test.sasr) or a .sasr file")
    x.add_argument("--sample", required=True)
    x.add_argument("--out")
    x.set_defaults(func=cmd_export_attn)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except NumericAbort as exc:
        print(f"error: numeric abort at step {exc.step} in {exc.term}: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (FormatError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ContractError, SasrError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
