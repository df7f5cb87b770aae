import json

import pytest

from zoomstack.config import ExperimentConfig, config_from_dict, load_config, resolve_seed, write_config
from zoomstack.errors import ConfigError


def test_defaults():
    cfg = ExperimentConfig()
    assert cfg.sampler.zeta == 0.005 and cfg.sampler.w == 2.0
    assert cfg.training.ldm.p_drop == 0.1 and cfg.training.ldm.warmup == 500
    assert cfg.inversion.n == 200 and cfg.inversion.lam_prior == 0.01
    assert cfg.arch()["denoiser"]["n_tokens"] == 17


def test_round_trip(tmp_path):
    cfg = load_config(overrides=["sampler.lam=0", "denoiser.channels=[16,32]", "training.ldm.steps=700"])
    write_config(tmp_path / "c.json", cfg)
    again = load_config(tmp_path / "c.json")
    assert again == cfg
    assert again.sampler.lam == 0 and again.denoiser.channels == (16, 32)
    assert again.training.ldm.steps == 700 and again.training.ldm.warmup == 500
    # Layering keeps the stage-specific defaults of sibling sections.
    assert again.training.cdm.p_drop == 0.0


def test_partial_nested_section_keeps_defaults():
    cfg = config_from_dict({"training": {"cdm": {"steps": 900}}})
    assert cfg.training.cdm.p_drop == 0.0 and cfg.training.ldm.steps == ExperimentConfig().training.ldm.steps


@pytest.mark.parametrize(
    "data",
    [
        {"bogus": 1},
        {"sampler": {"nope": 1}},
        {"training": {"ldm": {"unknown": 2}}},
        {"codec": {"kind": "vqgan"}},
        {"sampler": {"zeta": -1}},
        {"training": {"ldm": {"steps": 10, "warmup": 20}}},
        {"sampler": 3},
    ],
)
def test_invalid_configs(data):
    with pytest.raises(ConfigError):
        config_from_dict(data)


def test_unreadable_file(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.json")
    (tmp_path / "bad.json").write_text("{not json")
    with pytest.raises(ConfigError):
        load_config(tmp_path / "bad.json")


def test_bad_override():
    with pytest.raises(ConfigError):
        load_config(overrides=["novalue"])


def test_seed_resolution(monkeypatch):
    monkeypatch.delenv("ZOOMSTACK_SEED", raising=False)
    assert resolve_seed(None, 5) == 5
    monkeypatch.setenv("ZOOMSTACK_SEED", "11")
    assert resolve_seed(None, 5) == 11
    assert resolve_seed(3, 5) == 3
    monkeypatch.setenv("ZOOMSTACK_SEED", "x")
    with pytest.raises(ConfigError):
        resolve_seed(None, 5)


def test_written_config_is_sorted_json(tmp_path):
    write_config(tmp_path / "c.json", ExperimentConfig())
    data = json.loads((tmp_path / "c.json").read_text())
    assert set(data) == {"seed", "threads", "dataset", "codec", "denoiser", "summarizer", "cdm", "sampler", "training", "inversion"}
