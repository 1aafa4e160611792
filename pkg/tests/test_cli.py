import hashlib
import json

import numpy as np
import pytest

from sasrnet import tensor as tn
from sasrnet.cli import load_config, main
from sasrnet.errors import ContractError
from sasrnet.features import read_dataset

SMALL = {"T": 4, "P": 4, "D_a": 6, "D": 8}


def _config(tmp_path, **sections):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(sections))
    return str(path)


def _digest(folder):
    return {p.name: hashlib.sha256(p.read_bytes()).hexdigest() for p in sorted(folder.iterdir())}


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = _config(root, gen=SMALL, train={"batch_size": 8})
    assert main(["gen", "--config", cfg, "--out", str(root / "data"), "--n", "80", "--seed", "3"]) == 0
    assert main(["train", "--config", cfg, "--data", str(root / "data"), "--out", str(root / "run"),
                 "--epochs", "2"]) == 0
    return root, cfg


def test_gen_reports_split(tmp_path, capsys):
    assert main(["gen", "--out", str(tmp_path), "--n", "100", "--seed", "7"]) == 0
    out = capsys.readouterr().out
    assert "80 train / 20 test samples" in out
    assert {p.name for p in tmp_path.iterdir()} >= {"train.sasr", "test.sasr", "scenes.jsonl"}


def test_gen_is_byte_reproducible(tmp_path):
    cfg = _config(tmp_path, gen=SMALL)
    for name in ("a", "b"):
        assert main(["gen", "--config", cfg, "--out", str(tmp_path / name), "--n", "30", "--seed", "9"]) == 0
    assert _digest(tmp_path / "a") == _digest(tmp_path / "b")


def test_gen_zero_samples_is_config_error(tmp_path, capsys):
    assert main(["gen", "--out", str(tmp_path), "--n", "0"]) == 2
    assert "error" in capsys.readouterr().err


def test_bad_flags_exit_two(capsys):
    with pytest.raises(SystemExit) as info:
        main(["train", "--slt-on", "maybe"])
    assert info.value.code == 2
    with pytest.raises(SystemExit) as info:
        main(["frobnicate"])
    assert info.value.code == 2


def test_missing_dataset_is_io_error(tmp_path, capsys):
    assert main(["train", "--data", str(tmp_path / "nope"), "--out", str(tmp_path / "o"), "--epochs", "1"]) == 3


def test_train_writes_two_checkpoints(trained):
    root, _ = trained
    names = sorted(p.name for p in (root / "run").iterdir())
    assert names == ["epoch_001.ckpt", "epoch_002.ckpt", "metrics.jsonl"]
    rows = (root / "run" / "metrics.jsonl").read_text().splitlines()
    assert len(rows) == 2 * (64 // 8)


def test_eval_report_total_is_weighted_mean(trained, capsys):
    root, cfg = trained
    report = root / "report.json"
    assert main(["eval", "--ckpt", str(root / "run" / "epoch_002.ckpt"), "--data", str(root / "data"),
                 "--report", str(report)]) == 0
    assert "overall" in capsys.readouterr().out
    rep = json.loads(report.read_text())
    per = rep["per_template"].values()
    assert rep["n"] == sum(r["n"] for r in per) == 16
    assert rep["overall"] == pytest.approx(sum(r["accuracy"] * r["n"] for r in per) / rep["n"], abs=1e-12)


def test_eval_dims_mismatch_names_both(trained, tmp_path, capsys):
    root, _ = trained
    other = _config(tmp_path, gen={**SMALL, "T": 5})
    assert main(["gen", "--config", other, "--out", str(tmp_path / "d"), "--n", "10"]) == 0
    capsys.readouterr()
    code = main(["eval", "--ckpt", str(root / "run" / "epoch_001.ckpt"), "--data", str(tmp_path / "d")])
    err = capsys.readouterr().err
    assert code == 2
    assert "'T': 4" in err and "'T': 5" in err


def test_eval_corrupt_checkpoint_is_io_error(tmp_path):
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"nonsense")
    assert main(["eval", "--ckpt", str(bad), "--data", str(tmp_path)]) == 3


def test_gradcheck_default_passes(capsys):
    assert main(["gradcheck"]) == 0
    lines = capsys.readouterr().out.splitlines()
    blocks = [line for line in lines if "worst_rel_err" in line]
    assert len(blocks) >= 6 and all(line.endswith("PASS") for line in blocks)


def test_gradcheck_catches_corrupted_backward(monkeypatch, capsys):
    def bad_tanh(x):
        y = np.tanh(x.values)
        return tn._result(y, (x,), lambda g: (g * (1.0 - y),))

    monkeypatch.setattr(tn, "tanh", bad_tanh)
    assert main(["gradcheck", "--samples", "20"]) == 5
    captured = capsys.readouterr()
    assert "FAIL" in captured.out and "parameter" in captured.err


def test_export_attention_files(trained, tmp_path):
    root, _ = trained
    sample = read_dataset(root / "data" / "test.sasr").manifest.sample_ids[0]
    out = tmp_path / "maps"
    assert main(["export-attn", "--ckpt", str(root / "run" / "epoch_002.ckpt"), "--data", str(root / "data"),
                 "--sample", sample, "--out", str(out)]) == 0
    spatial = np.loadtxt(out / f"{sample}_spatial.csv", delimiter=",")
    assert spatial.shape == (4, 4)
    assert np.all(np.abs(spatial.sum(axis=1) - 1) < 1e-6)
    for stream in ("audio", "visual"):
        row = np.loadtxt(out / f"{sample}_temporal_{stream}.csv", delimiter=",")
        assert row.shape == (4,) and abs(row.sum() - 1) < 1e-6
    pgm = (out / f"{sample}_spatial.pgm").read_bytes()
    header = b"P5 4 4 255\n"
    assert pgm.startswith(header) and len(pgm) == len(header) + 16
    pixels = np.frombuffer(pgm[len(header):], dtype=np.uint8).reshape(4, 4)
    assert np.all(pixels.max(axis=1) == 255)
    np.testing.assert_array_equal(pixels.argmax(axis=1), spatial.argmax(axis=1))


def test_export_missing_sample_exit_two(trained, tmp_path):
    root, _ = trained
    assert main(["export-attn", "--ckpt", str(root / "run" / "epoch_001.ckpt"), "--data", str(root / "data"),
                 "--sample", "no-such-sample", "--out", str(tmp_path)]) == 2


def test_config_precedence(tmp_path):
    path = _config(tmp_path, gen={"seed": 1, "n": 50}, train={"seed": 1, "lr": 0.01}, data="d")
    assert load_config(None, env={}).gen == {}
    cfg = load_config(path, env={})
    assert cfg.gen_config().seed == 1 and cfg.train_config().lr == 0.01 and cfg.data == "d"
    cfg = load_config(path, env={"SASR_SEED": "5"})
    assert cfg.gen_config().seed == 5 and cfg.train_config().seed == 5 and cfg.gen_config().n == 50


def test_flag_beats_env_beats_file(tmp_path, monkeypatch, capsys):
    path = _config(tmp_path, gen={**SMALL, "seed": 1})
    monkeypatch.setenv("SASR_SEED", "2")
    for name, extra in (("env", []), ("flag", ["--seed", "3"])):
        assert main(["gen", "--config", path, "--out", str(tmp_path / name), "--n", "12", *extra]) == 0
    monkeypatch.delenv("SASR_SEED")
    for name, seed in (("env2", "2"), ("flag3", "3")):
        assert main(["gen", "--config", path, "--out", str(tmp_path / name), "--n", "12", "--seed", seed]) == 0
    assert _digest(tmp_path / "env") == _digest(tmp_path / "env2")
    assert _digest(tmp_path / "flag") == _digest(tmp_path / "flag3")


def test_config_errors(tmp_path):
    with pytest.raises(ContractError, match="unknown"):
        load_config(_config(tmp_path, bogus=1), env={})
    with pytest.raises(ContractError, match="SASR_SEED"):
        load_config(None, env={"SASR_SEED": "x"})
    with pytest.raises(ContractError, match="unknown"):
        load_config(_config(tmp_path, gen={"colour": 1}), env={}).gen_config()
