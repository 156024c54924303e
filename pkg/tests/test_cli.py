import json
import math
import os
import subprocess
import sys

import pytest

from conftest import SMALL_DATA_CFG
from r2lab.cli import main

pytestmark = pytest.mark.filterwarnings("ignore::DeprecationWarning")


def write_cfg(path, phase="pretrain", **extra):
    raw = {"data": SMALL_DATA_CFG, "model": {"hidden": [16, 8]},
           "train": {"phase": phase, "epochs": 2, "batch_size": 32}}
    raw.update(extra)
    path.write_text(json.dumps(raw))
    return str(path)


def cli(*args, env=None):
    full = {**os.environ, **(env or {})}
    return subprocess.run([sys.executable, "-m", "r2lab", *args], capture_output=True,
                          text=True, env=full)


@pytest.fixture(scope="module")
def pretrained(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    cfg = write_cfg(d / "pre.json")
    assert main(["pretrain", "--config", cfg, "--seed", "0", "--out", str(d / "pre")]) == 0
    return d


def test_outputs_written(pretrained):
    out = pretrained / "pre"
    for name in ("checkpoint.json", "checkpoint.bin", "metrics.csv", "config.json",
                 "summary.json"):
        assert (out / name).exists()
    summary = json.loads((out / "summary.json").read_text())
    assert summary["seed"] == 0 and summary["epochs"] == 2


def test_same_seed_byte_identical(tmp_path):
    cfg = write_cfg(tmp_path / "c.json")
    for run in ("r1", "r2"):
        assert main(["pretrain", "--config", cfg, "--seed", "7", "--out", str(tmp_path / run)]) == 0
    for name in ("metrics.csv", "checkpoint.bin", "checkpoint.json"):
        assert (tmp_path / "r1" / name).read_bytes() == (tmp_path / "r2" / name).read_bytes()


def test_qat_without_init_exits_2(tmp_path):
    r = cli("qat", "--config", write_cfg(tmp_path / "q.json", "qat"), "--seed", "0",
            "--out", str(tmp_path / "o"))
    assert r.returncode == 2
    assert "--init" in r.stderr


def test_invalid_config_names_field(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"train": {"lr": -1}}))
    r = cli("pretrain", "--config", str(bad), "--seed", "0", "--out", str(tmp_path / "o"))
    assert r.returncode != 0
    assert "train.lr" in r.stderr


def test_phase_mismatch_rejected(tmp_path, capsys):
    cfg = write_cfg(tmp_path / "c.json", "qat")
    assert main(["pretrain", "--config", cfg, "--seed", "0", "--out", str(tmp_path / "o")]) == 1
    assert "train.phase" in capsys.readouterr().err


def test_missing_checkpoint(tmp_path, capsys):
    cfg = write_cfg(tmp_path / "q.json", "qat")
    code = main(["qat", "--config", cfg, "--seed", "0", "--out", str(tmp_path / "o"),
                 "--init", str(tmp_path / "nope")])
    assert code == 1
    assert "checkpoint not found" in capsys.readouterr().err


def test_compress_size_totals(pretrained, tmp_path):
    cfg = write_cfg(tmp_path / "c.json", "compress", palette={"bits": 2, "dim": 2})
    assert main(["compress", "--config", cfg, "--seed", "0", "--out", str(tmp_path / "c"),
                 "--init", str(pretrained / "pre")]) == 0
    rep = json.loads((tmp_path / "c" / "summary.json").read_text())["size_report"]
    shapes = [(64, 16), (16, 8), (8, 4)]
    index = sum(math.ceil(a * b / 2) * 2 / 8 for a, b in shapes)
    codebook = len(shapes) * 4 * 2 * 4
    bias = 4 * sum(b for _, b in shapes)
    assert rep["totals"]["index_bytes"] == index
    assert rep["totals"]["codebook_bytes"] == codebook
    assert rep["totals"]["fp_bytes"] == bias
    assert rep["totals"]["total_bytes"] == index + codebook + bias


def test_report_self_comparison(pretrained, tmp_path):
    pre = str(pretrained / "pre")
    assert main(["report", "--a", pre, "--b", pre, "--out", str(tmp_path / "r")]) == 0
    lines = (tmp_path / "r" / "stats_table.csv").read_text().splitlines()
    header = lines[0].split(",")
    for line in lines[1:]:
        row = dict(zip(header, line.split(",")))
        assert float(row["range_ratio"]) == 1.0
    sizes = {"fc1": 64 * 16, "fc2": 16 * 8, "fc3": 8 * 4}
    for layer, size in sizes.items():
        text = (tmp_path / "r" / f"hist_a_{layer}.txt").read_text().split("\n")
        counts = [int(l.split()[1]) for l in text if l and not l.startswith("#")]
        assert sum(counts) == size


def test_thread_env_validated(pretrained, tmp_path):
    r = cli("verify", "--suite", "palette", env={"R2LAB_THREADS": "zero"})
    assert r.returncode == 1 and "R2LAB_THREADS" in r.stderr


def test_verify_command(capsys):
    assert main(["verify", "--suite", "limits"]) == 0
    out = capsys.readouterr().out
    assert "3/3 checks passed" in out
