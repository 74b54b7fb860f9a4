import json

import pytest

from config import (
    ConfigManager, FuseSRConfig, HNetConfig, LossWeights, model_config_from_dict,
)
from errors import ConfigError


def test_defaults():
    config = FuseSRConfig.default()
    assert config.model.r == 4 and config.model.variant == "full"
    assert (config.loss.lambda_p, config.loss.lambda_s) == (0.5, 0.05)
    assert (config.adam.lr, config.adam.beta1, config.adam.beta2) == (1e-3, 0.9, 0.999)
    assert (config.train.batch_size, config.train.crop) == (4, 64)
    assert (config.lut.size, config.lut.samples) == (32, 1024)
    assert config.dataset.train_fraction == 0.8


def test_channel_arithmetic():
    full = HNetConfig.full(r=4)
    assert full.g_lr_count == 4
    assert full.g_hr_count == 11
    assert full.encoder_in_channels == 7 * 3
    assert full.fusion_in_channels == 32 + 11 * 16
    assert full.head_in_channels == (64 + 128) // 16

    lite = HNetConfig.lite(r=8)
    assert lite.n_history == 0
    assert lite.fusion_layer_variant == "dws"
    assert HNetConfig.lite(r=4, alignment="avgpool").aligned_hr_channels == 11
    assert HNetConfig.full(use_hr_gbuffer=False).aligned_hr_channels == 0


def test_feature_history_widens_fusion_input():
    config = HNetConfig.full(r=4, history_mode="feature")
    assert config.encoder_in_channels == 7
    assert config.fusion_in_channels == 32 * 3 + 11 * 16


@pytest.mark.parametrize("overrides, message", [
    (dict(r=3), "upscale factor"),
    (dict(alignment="strided"), "alignment"),
    (dict(variant="huge"), "variant"),
    (dict(history_frames=3), "history_frames"),
    (dict(g_hr_channels=["sheen"]), "sheen"),
    (dict(fusion_channels=100), "divisible"),
])
def test_validate_rejects(overrides, message):
    with pytest.raises(ConfigError, match=message):
        HNetConfig.full(**overrides)


@pytest.mark.parametrize("frames", [1, 2])
def test_history_accepts_one_or_two_predecessors(frames):
    config = HNetConfig.full(r=2, history_frames=frames)
    assert config.n_history == frames
    assert config.encoder_in_channels == 7 * (1 + frames)


def test_lite_cannot_use_history():
    with pytest.raises(ConfigError, match="lite"):
        HNetConfig.lite(use_history=True, history_frames=1)


def test_negative_loss_weight_rejected():
    with pytest.raises(ConfigError):
        LossWeights(lambda_p=-1.0)


def test_from_dict_merges_partial_sections():
    config = FuseSRConfig.from_dict({'model': {'r': 8}, 'train': {'steps': 7}})
    assert config.model.r == 8
    assert config.model.fusion_blocks == 6
    assert config.train.steps == 7
    assert config.train.batch_size == 4


def test_from_dict_rejects_unknown_keys():
    with pytest.raises(ConfigError, match="section"):
        FuseSRConfig.from_dict({'optimizer': {}})
    with pytest.raises(ConfigError, match="fusoin_blocks"):
        FuseSRConfig.from_dict({'model': {'fusoin_blocks': 2}})
    with pytest.raises(ConfigError, match="object"):
        FuseSRConfig.from_dict({'model': 4})


def test_to_dict_round_trips():
    config = FuseSRConfig.default()
    config.model = HNetConfig.lite(r=2)
    assert FuseSRConfig.from_dict(config.to_dict()) == config


def test_manager_falls_back_to_defaults(tmp_path):
    manager = ConfigManager(tmp_path)
    assert manager.load_config() == FuseSRConfig.default()
    assert manager.load_config() is manager.load_config()
    assert manager.cache_dir.is_dir()


def test_manager_saves_and_reloads(tmp_path):
    config = FuseSRConfig.default()
    config.train.steps = 12
    ConfigManager(tmp_path).save_config(config)
    assert json.loads((tmp_path / "config.json").read_text())['train']['steps'] == 12
    assert ConfigManager(tmp_path).load_config().train.steps == 12


def test_manager_reports_broken_files(tmp_path):
    broken = tmp_path / "broken.json"
    broken.write_text("{not json")
    with pytest.raises(ConfigError, match="broken.json"):
        ConfigManager(tmp_path).load_file(broken)
    with pytest.raises(ConfigError, match="missing.json"):
        ConfigManager(tmp_path).load_file(tmp_path / "missing.json")


def test_manager_honours_home_variable(tmp_path, monkeypatch):
    monkeypatch.setenv("FUSESR_HOME", str(tmp_path / "home"))
    assert ConfigManager().config_dir == tmp_path / "home"


def test_model_config_from_dict_validates():
    assert model_config_from_dict({'r': 2, 'variant': 'lite', 'use_history': False}).r == 2
    with pytest.raises(ConfigError):
        model_config_from_dict({'r': 5})
