import pytest

from jointflow.config import SEED_ENV, RunConfig, apply_env_seed, resolve_seed
from jointflow.errors import ConfigError


def test_json_round_trip(tmp_path):
    cfg = RunConfig()
    cfg.stage.steps_video = 10
    cfg.eval.sweep = [1.0, 3.0]
    back = RunConfig.from_json(cfg.to_json())
    assert back == cfg
    (tmp_path / "c.json").write_text(cfg.to_json())
    assert RunConfig.load(tmp_path / "c.json") == cfg
    assert RunConfig.load(None) == RunConfig()


def test_defaults_validate():
    cfg = RunConfig().validate()
    assert (cfg.stage.steps_video, cfg.stage.steps_audio, cfg.stage.steps_joint) == (3000, 2000, 500)
    assert cfg.sample.guidance == 6.0 and cfg.sample.steps == 50


@pytest.mark.parametrize(
    "text",
    [
        '{"stage": {"bogus": 1}}',
        '{"nope": {}}',
        '{"stage": {"lr": "fast"}}',
        '{"stage": {"batch_size": 1.5}}',
        '{"stage": {"text_dropout": 2.0}}',
        '{"sample": {"mode": "v2v"}}',
        '{"codec": {"video_scale": 3.0}}',
        '{"tower": {"latent_channels": 7}}',
        "not json",
    ],
)
def test_invalid_configs(text):
    with pytest.raises(ConfigError):
        RunConfig.from_json(text)


def test_missing_config_file(tmp_path):
    with pytest.raises(ConfigError):
        RunConfig.load(tmp_path / "none.json")


def test_seed_precedence(monkeypatch):
    monkeypatch.delenv(SEED_ENV, raising=False)
    assert resolve_seed(None, 3) == 3
    monkeypatch.setenv(SEED_ENV, "11")
    assert resolve_seed(None, 3) == 11
    assert resolve_seed(5, 3) == 5
    cfg = apply_env_seed(RunConfig())
    assert cfg.stage.seed == cfg.sample.seed == cfg.eval.seed == cfg.data.master_seed == 11
    monkeypatch.setenv(SEED_ENV, "x")
    with pytest.raises(ConfigError):
        resolve_seed(None, 0)
