import csv
import json

import numpy as np
import pytest

from weakstrong.cli import (
    EXIT_CONFIG,
    EXIT_NUMERIC,
    EXIT_OK,
    EXIT_VERIFY,
    cmd_benchmark,
    cmd_synth,
    cmd_train,
    main,
    table_rows,
)
from weakstrong.config import OUTPUT_DIR_ENV, config_from_dict, load_config
from weakstrong.evalmetrics import FOLD_CSV_COLUMNS
from weakstrong.model import ModelConfig, init_params, load_checkpoint
from weakstrong.numerics import Rng
from weakstrong.schemes import HISTORY_COLUMNS
from weakstrong.synthdata import load_dataset

from conftest import DEFAULT_CONFIG, assert_params_equal, toy_payload


@pytest.fixture(autouse=True)
def no_env_override(monkeypatch):
    monkeypatch.delenv(OUTPUT_DIR_ENV, raising=False)


def test_synth_round_trip_and_byte_identity(write_config, tmp_path):
    path = write_config(toy_payload())
    a = cmd_synth(path, tmp_path / "a.json")
    b = cmd_synth(path, tmp_path / "b.json")
    assert a.read_bytes() == b.read_bytes()
    gen, bags, strong = load_dataset(a)
    assert gen.to_dict() == load_config(path).gen.to_dict()
    assert len(bags) == 60 and len(strong) == 100


def test_synth_csv_export(write_config, tmp_path):
    path = write_config(toy_payload())
    assert main(["synth", str(path), "-o", str(tmp_path / "d.json"), "--csv", str(tmp_path / "d.csv")]) == EXIT_OK
    rows = list(csv.reader((tmp_path / "d.csv").open()))
    cfg = load_config(path)
    assert rows[0] == ["source", "bag_id", "true_pattern", "strong_label", "weak_label"] + [f"f{j}" for j in range(cfg.gen.input_dim)]
    sources = [r[0] for r in rows[1:]]
    assert sources.count("weak") == 60 * 8 and sources.count("strong") == 100


def test_synth_image_dump(write_config, tmp_path, capsys):
    path = write_config(toy_payload())
    assert main(["synth", str(path), "-o", str(tmp_path / "d.json"), "--images", str(tmp_path / "img")]) == EXIT_OK
    files = sorted(p.name for p in (tmp_path / "img").iterdir())
    assert "target.ppm" in files
    assert {"patch00.ppm", "patch00-jitter.ppm", "patch00-stain.ppm", "patch15-stain.ppm"} <= set(files)
    assert len(files) == 1 + 16 * 3
    assert (tmp_path / "img" / "patch00.ppm").read_bytes().startswith(b"P6\n32 32\n255\n")


def test_train_writes_outputs_and_reaches_high_accuracy(write_config, tmp_path):
    path = write_config(toy_payload())
    out = cmd_train(path)
    assert out.resolve() == (tmp_path / "out").resolve()
    summary = json.loads((out / "summary.json").read_text())
    # separable, label-consistent toy; threshold fixed by a pilot run
    assert summary["holdout"]["accuracy"] >= 0.95
    rows = list(csv.reader((out / "history.csv").open()))
    assert tuple(rows[0]) == HISTORY_COLUMNS
    assert len(rows) == 1 + summary["epochs_run"]
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["config_hash"] == load_config(path).hash()
    assert set(manifest["outputs"]) == {"checkpoint.json", "history.csv", "summary.json"}
    assert "config" in manifest["inputs"] and manifest["seeds"]["experiment"] == 0
    assert set(manifest["versions"]) >= {"weakstrong", "python", "numpy"}


def test_train_is_deterministic(write_config, tmp_path, monkeypatch):
    path = write_config(toy_payload(train={"epochs": 5}))
    monkeypatch.setenv(OUTPUT_DIR_ENV, str(tmp_path / "r1"))
    a = cmd_train(path)
    monkeypatch.setenv(OUTPUT_DIR_ENV, str(tmp_path / "r2"))
    b = cmd_train(path)
    for name in ("checkpoint.json", "history.csv", "summary.json"):
        assert (a / name).read_bytes() == (b / name).read_bytes()


def test_zero_epoch_train_emits_initial_checkpoint(write_config, monkeypatch, tmp_path):
    path = write_config(toy_payload(train={"epochs": 0}))
    monkeypatch.setenv(OUTPUT_DIR_ENV, str(tmp_path / "zero"))
    out = cmd_train(path)
    params = load_checkpoint(out / "checkpoint.json")
    cfg = load_config(path)
    assert_params_equal(params, init_params(cfg.model_config(), Rng(cfg.seed).spawn(0)))
    assert (out / "history.csv").read_text().strip() == ",".join(HISTORY_COLUMNS)


def test_train_from_dataset_file(write_config, tmp_path):
    path = write_config(toy_payload(train={"epochs": 2}))
    data = cmd_synth(path, tmp_path / "d.json")
    out = cmd_train(path, data)
    manifest = json.loads((out / "manifest.json").read_text())
    assert "dataset" in manifest["inputs"]


@pytest.mark.parametrize(
    "overrides, field",
    [
        ({"scheme": {"weak_mode": "best"}}, "scheme.weak_mode"),
        ({"gen": {"n_bags": -3}}, "gen.n_bags"),
        ({"train": {"patience": 0}}, "train.patience"),
        ({"unknown": 1}, "unknown"),
    ],
)
def test_malformed_config_exits_2_naming_the_field(write_config, capsys, overrides, field):
    path = write_config(toy_payload(**overrides))
    assert main(["train", str(path)]) == EXIT_CONFIG
    assert field in capsys.readouterr().err


def test_missing_config_and_dataset_exit_2(tmp_path, write_config, capsys):
    assert main(["train", str(tmp_path / "nope.yaml")]) == EXIT_CONFIG
    path = write_config(toy_payload())
    assert main(["train", str(path), "--dataset", str(tmp_path / "none.json")]) == EXIT_CONFIG
    assert "dataset" in capsys.readouterr().err


def test_nan_loss_exits_3(write_config, capsys):
    path = write_config(toy_payload(scheme={"optimizer": "sgd", "learning_rate": 1e300}))
    assert main(["train", str(path)]) == EXIT_NUMERIC
    assert "numeric failure" in capsys.readouterr().err


def test_table_rows_order():
    cfg = load_config(DEFAULT_CONFIG)
    assert [r.label for r in table_rows(cfg, "integration")] == [
        "W-only", "W-only (MIL-WS)", "W-only (SW-WS)", "W+S", "W+S (MIL-WS)", "W+S (SW-WS)",
    ]
    assert [r.label for r in table_rows(cfg, "shift")] == [
        "w/o color augm.", "w/ color augm.", "stain transfer", "MMD", "CORAL", "adversarial",
    ]
    assert all(r.shift.mode == "none" for r in table_rows(cfg, "integration")[:3])
    assert table_rows(cfg, "shift")[-1].model.domain_head


def small_benchmark_payload():
    return toy_payload(
        gen={"n_bags": 50, "benign_fraction": 0.2, "pattern_separation": 4.0, "n_strong": 80,
             "pair_weights": {"3+3": 1, "3+4": 1, "4+4": 1, "5+5": 1}},
        scheme={"use_strong": True, "weak_mode": "sw_ws", "learning_rate": 0.001},
        train={"epochs": 2, "patience": 2},
    )


def test_benchmark_structure_resume_and_determinism(write_config, tmp_path, monkeypatch):
    path = write_config(small_benchmark_payload())
    monkeypatch.setenv(OUTPUT_DIR_ENV, str(tmp_path / "a"))
    out = cmd_benchmark(path, "integration")
    table = (out / "table.txt").read_text().splitlines()
    body = table[3:]
    assert len(body) == 6
    assert all(line.count("(± ") == 3 for line in body)
    rows = list(csv.reader((out / "folds.csv").open()))
    assert tuple(rows[0]) == FOLD_CSV_COLUMNS and len(rows) == 1 + 6 * 5
    first = {p.name: p.read_bytes() for p in out.rglob("*") if p.is_file()}

    # interrupted sweep: drop some folds and corrupt one, then resume
    (out / "folds" / "row2-fold3.json").unlink()
    (out / "folds" / "row5-fold0.json").write_text("{")
    (out / "table.txt").unlink()
    cmd_benchmark(path, "integration")
    assert {p.name: p.read_bytes() for p in out.rglob("*") if p.is_file()} == first

    monkeypatch.setenv(OUTPUT_DIR_ENV, str(tmp_path / "b"))
    fresh = cmd_benchmark(path, "integration", workers=2)
    assert {p.name: p.read_bytes() for p in fresh.rglob("*") if p.is_file()} == first


def test_benchmark_reruns_stale_folds(write_config, tmp_path, monkeypatch):
    monkeypatch.setenv(OUTPUT_DIR_ENV, str(tmp_path / "s"))
    payload = small_benchmark_payload()
    out = cmd_benchmark(write_config(payload), "integration")
    before = json.loads((out / "folds" / "row0-fold0.json").read_text())["row_hash"]
    payload["train"]["epochs"] = 3
    cmd_benchmark(write_config(payload), "integration")
    after = json.loads((out / "folds" / "row0-fold0.json").read_text())["row_hash"]
    assert before != after


def test_verify_and_gradcheck_exit_codes(capsys):
    assert main(["verify"]) == EXIT_OK
    out = capsys.readouterr().out
    assert out.count("PASS") == 8 and "FAIL" not in out
    assert main(["verify", "--inject-grad-bug", "hidden.1.weight"]) == EXIT_VERIFY
    out = capsys.readouterr().out
    assert "FAIL  gradcheck" in out and "hidden.1.weight" in out
    assert main(["gradcheck", "--inject-grad-bug", "head.bias"]) == EXIT_VERIFY
    assert main(["gradcheck", "--inject-grad-bug", "nonsense"]) == EXIT_CONFIG
