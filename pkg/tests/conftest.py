from pathlib import Path

import numpy as np
import pytest
import yaml

from weakstrong.synthdata import GenConfig

ROOT = Path(__file__).resolve().parents[1]
DEFAULT_CONFIG = ROOT / "configs" / "default.yaml"


@pytest.fixture(autouse=True)
def isolated_cwd(tmp_path, monkeypatch):
    """Run every test from tmp_path so relative output dirs never touch the repo."""
    monkeypatch.chdir(tmp_path)


@pytest.fixture
def small_gen():
    return GenConfig(n_bags=40, instances_per_bag=8, n_strong=80, seed=3)


@pytest.fixture
def write_config(tmp_path):
    """Write a config mapping to a YAML file inside tmp_path."""

    def write(payload: dict, name: str = "config.yaml") -> Path:
        path = tmp_path / name
        path.write_text(yaml.safe_dump(payload, sort_keys=False))
        return path

    return write


def toy_payload(**overrides) -> dict:
    """Small, label-consistent, well separated config for fast CLI runs."""
    payload = {
        "seed": 0,
        "output_dir": "out",
        "gen": {
            "n_bags": 60,
            "instances_per_bag": 8,
            "benign_fraction": 0.0,
            "pattern_separation": 8.0,
            "pair_weights": {"3+3": 1, "4+4": 1, "5+5": 1},
            "n_strong": 100,
        },
        "scheme": {"use_strong": False, "weak_mode": "plain", "learning_rate": 0.01},
        "train": {"epochs": 50, "patience": 50},
    }
    for key, value in overrides.items():
        if isinstance(value, dict) and isinstance(payload.get(key), dict):
            payload[key] = {**payload[key], **value}
        else:
            payload[key] = value
    return payload


def assert_params_equal(a, b):
    assert list(a.tensors) == list(b.tensors)
    for k in a.tensors:
        np.testing.assert_array_equal(a.tensors[k], b.tensors[k], err_msg=k)
