import csv
import json
import logging

import numpy as np
import pytest

from ufl import cli
from ufl.data import fileio
from ufl.models import load_checkpoint


@pytest.fixture(autouse=True)
def _fresh_logging():
    yield
    root = logging.getLogger()
    for h in [h for h in root.handlers if getattr(h, "_ufl", False)]:
        root.removeHandler(h)


def run(capsys, *args):
    rc = cli.main([str(a) for a in args])
    out, err = capsys.readouterr()
    return rc, out, err


def test_baseline_prints_table(capsys):
    rc, out, err = run(capsys, "baseline", "--top", "1", "--averaging", "instance")
    assert rc == 0
    value = float(out.split()[-1])
    assert value == pytest.approx(40.1, abs=0.3)
    assert json.loads(err.splitlines()[0])["msg"] == "start"
    rc, out, _ = run(capsys, "baseline", "--top", "5", "--weights", "train")
    assert [line.split()[1] for line in out.splitlines()] == ["instance-averaged", "class-averaged"]
    assert float(out.splitlines()[0].split()[-1]) == pytest.approx(83.2, abs=0.05)


def test_baseline_custom_table(tmp_path, capsys):
    fileio.write_populations(tmp_path / "p.csv", [("only", 10, 4)])
    rc, out, _ = run(capsys, "baseline", "--populations", tmp_path / "p.csv", "--averaging", "class")
    assert rc == 0 and out.strip() == "top-1 class-averaged 100.00"


def test_usage_errors_exit_1(tmp_path, capsys):
    rc, _, err = run(capsys, "train", "--mode", "ufl", "--config", tmp_path / "missing.toml",
                     "--data", tmp_path, "--out", tmp_path / "o")
    assert rc == 1 and "missing.toml" in err
    rc, _, _ = run(capsys, "baseline", "--top", "0")
    assert rc == 1
    (tmp_path / "bad.toml").write_text("bogus_key = 3\n")
    rc, _, err = run(capsys, "baseline", "--config", tmp_path / "bad.toml")
    assert rc == 1 and "bogus_key" in err


def test_data_errors_exit_2(tmp_path, capsys):
    (tmp_path / "bank.bin").write_bytes(b"nope")
    (tmp_path / "model.ckpt").write_bytes(b"nope")
    rc, _, err = run(capsys, "project", "--bank", tmp_path / "bank.bin", "--out", tmp_path / "p.csv")
    assert rc == 2 and "magic" in err
    (tmp_path / "pop.csv").write_text("wrong,header\n")
    rc, _, _ = run(capsys, "baseline", "--populations", tmp_path / "pop.csv")
    assert rc == 2


def test_config_file_sets_defaults_and_flags_override(tmp_path, capsys):
    (tmp_path / "c.toml").write_text("top = 5\n[baseline]\naveraging = \"class\"\n")
    rc, out, _ = run(capsys, "baseline", "--config", tmp_path / "c.toml")
    assert rc == 0 and out.startswith("top-5 class-averaged")
    rc, out, _ = run(capsys, "baseline", "--config", tmp_path / "c.toml", "--top", "1")
    assert out.startswith("top-1 class-averaged")


def test_synth_deterministic(tmp_path, capsys):
    args = ["synth", "--classes", "3", "--total", "40", "--side", "16", "--seed", "7", "--imbalance-ratio", "2"]
    rc1, d1, _ = run(capsys, *args, "--out", tmp_path / "a")
    rc2, d2, _ = run(capsys, *args, "--out", tmp_path / "b")
    assert rc1 == rc2 == 0 and d1 == d2
    assert fileio.load_dataset(tmp_path / "a").checksum() == d1.strip()
    assert "seed = 7" in (tmp_path / "a" / "config.toml").read_text()


def test_chip_command(tmp_path, capsys):
    from PIL import Image

    Image.fromarray(np.zeros((100, 100, 3), np.uint8)).save(tmp_path / "s.png")
    (tmp_path / "m.jsonl").write_text(
        '{"image": "s.png", "bbox": [10, 20, 30, 60], "class_id": 0}\n'
        '{"image": "s.png", "bbox": [0, 0, 10, 50], "class_id": 1}\n')
    rc, out, _ = run(capsys, "chip", "--manifest", tmp_path / "m.jsonl", "--out", tmp_path / "c")
    assert rc == 0 and out.strip() == "kept 1 discarded 1"
    disc = [json.loads(x) for x in (tmp_path / "c" / "discards.jsonl").read_text().splitlines()]
    assert disc[0]["index"] == 1
    assert fileio.load_dataset(tmp_path / "c").chips.shape == (1, 40, 40, 3)


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """A tiny synth -> train -> eval run shared by the pipeline tests."""
    root = tmp_path_factory.mktemp("pipe")
    base = ["--threads", "1"]
    assert cli.main(["synth", "--out", str(root / "data"), "--classes", "3", "--total", "48", "--side", "16", "--imbalance-ratio", "2",
                     "--seed", "1"] + base) == 0
    assert cli.main(["train", "--data", str(root / "data"), "--out", str(root / "run"), "--epochs", "2",
                     "--batch-size", "8", "--side", "16", "--embed-dim", "8", "--seed", "3"] + base) == 0
    assert cli.main(["eval", "--model", str(root / "run" / "model.ckpt"), "--data", str(root / "data"),
                     "--bank", str(root / "run" / "bank.bin"), "--out", str(root / "eval"), "--k", "5"] + base) == 0
    return root


def test_pipeline_outputs(pipeline, capsys):
    run_dir = pipeline / "run"
    losses = list(csv.DictReader(open(run_dir / "losses.csv")))
    assert [int(r["epoch"]) for r in losses] == [0, 1, 2]
    bank = fileio.load_bank(run_dir / "bank.bin")
    assert bank.n == 38 and bank.d == 8
    header, _ = load_checkpoint(run_dir / "model.ckpt")
    assert header["encoder"]["embed_dim"] == 8
    report = json.loads((pipeline / "eval" / "report.json").read_text())
    assert 0 <= report["top1_class"] <= report["top5_class"] <= 100 and report["k"] == 5
    with open(pipeline / "eval" / "per_class.csv") as fh:
        assert next(csv.reader(fh)) == ["class", "train_population", "test_population", "top1", "top5"]


def test_pipeline_downstream_commands(pipeline, capsys):
    model, data = pipeline / "run" / "model.ckpt", pipeline / "data"
    rc, _, _ = run(capsys, "search", "--model", model, "--data", data, "--query-id", 0, "--query-id", 5,
                   "--k", 3, "--out", pipeline / "s" / "hits.jsonl")
    assert rc == 0
    hits = [json.loads(x) for x in (pipeline / "s" / "hits.jsonl").read_text().splitlines()]
    assert [h["query"] for h in hits] == [0, 5] and all(len(h["ids"]) == 3 for h in hits)
    rc, out, _ = run(capsys, "outliers", "--model", model, "--data", data, "--out", pipeline / "o.json")
    assert rc == 0 and out.startswith("flagged")
    rc, out, _ = run(capsys, "hierarchy", "--confusion", pipeline / "eval" / "confusion_top1.csv",
                     "--out", pipeline / "h")
    assert rc == 0 and (pipeline / "h" / "tree.nwk").read_text().endswith(";\n")
    rc, _, _ = run(capsys, "project", "--bank", pipeline / "run" / "bank.bin", "--out", pipeline / "p.csv")
    assert rc == 0
    assert len((pipeline / "p.csv").read_text().splitlines()) == 39


def test_rerun_from_resolved_config_is_bit_exact(pipeline, tmp_path, capsys):
    cfg = pipeline / "run" / "config.toml"
    rc, _, _ = run(capsys, "train", "--config", cfg, "--out", tmp_path / "again", "--threads", "1")
    assert rc == 0
    for name in ("model.ckpt", "bank.bin", "losses.csv"):
        assert (tmp_path / "again" / name).read_bytes() == (pipeline / "run" / name).read_bytes(), name


def test_inputs_not_mutated(pipeline, capsys):
    model = pipeline / "run" / "model.ckpt"
    before = model.read_bytes()
    run(capsys, "outliers", "--model", model, "--data", pipeline / "data", "--out", pipeline / "o2.json")
    assert model.read_bytes() == before
