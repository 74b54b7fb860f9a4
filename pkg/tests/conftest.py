"""Shared fixtures: tiny models, a coarse LUT and a short rendered sequence"""
import numpy as np
import pytest

from brdf_lut import precompute_lut
from config import DatasetSettings, FuseSRConfig, HNetConfig, TrainSettings
from synth_dataset import generate_sequence


def tiny_lite(r: int = 2, **overrides) -> HNetConfig:
    params = dict(encoder_channels=[8, 8], fusion_channels=8, fusion_blocks=1)
    params.update(overrides)
    return HNetConfig.lite(r=r, **params)


def tiny_full(r: int = 2, **overrides) -> HNetConfig:
    params = dict(encoder_channels=[8, 8], fusion_channels=8, fusion_blocks=1, history_frames=1)
    params.update(overrides)
    return HNetConfig.full(r=r, **params)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture(scope="session")
def coarse_lut():
    return precompute_lut(8, 8, samples=64, seed=0)


@pytest.fixture(scope="session")
def dataset_settings():
    return DatasetSettings(hr=32, r=2, frames=4, scene_seed=3, path_seed=1, path="pan")


@pytest.fixture(scope="session")
def tiny_sequence(dataset_settings):
    return generate_sequence(dataset_settings)


@pytest.fixture
def tiny_config():
    config = FuseSRConfig.default()
    config.model = tiny_lite()
    config.train = TrainSettings(steps=3, batch_size=2, crop=8, checkpoint_every=2, seed=5, log_every=0)
    return config


@pytest.fixture
def fusesr_home(tmp_path, monkeypatch):
    """Isolated FUSESR_HOME so config and LUT cache never touch ~/.fusesr"""
    import cache_manager
    import config
    import fusesr_cli

    home = tmp_path / "home"
    monkeypatch.setenv("FUSESR_HOME", str(home))
    manager = config.ConfigManager(str(home))
    cache = cache_manager.CacheManager(home / "cache")
    for module in (config, cache_manager, fusesr_cli):
        monkeypatch.setattr(module, "config_manager", manager, raising=False)
    for module in (cache_manager, fusesr_cli):
        monkeypatch.setattr(module, "cache_manager", cache)
    return home
