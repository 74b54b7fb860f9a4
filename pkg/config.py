"""
Configuration management for the FuseSR toolkit
"""
import json
import os
from dataclasses import dataclass, field, fields, asdict
from pathlib import Path
from typing import Any, Dict, List, Optional

from errors import ConfigError


# Channel counts of every named G-buffer group the network can consume
CHANNEL_GROUPS = {
    'depth': 1,
    'normal': 3,
    'fbeta': 3,
    'roughness': 1,
    'ndotv': 1,
    'emissive': 3,
    'albedo': 3,
    'specular': 3,
}

SUPPORTED_FACTORS = (1, 2, 4, 8)
ALIGNMENTS = ('unshuffle', 'avgpool', 'maxpool')
HISTORY_MODES = ('frame', 'feature')
VARIANTS = ('full', 'lite')


@dataclass
class LutSettings:
    """Split-sum LUT precompute settings"""
    size: int = 32
    samples: int = 1024
    seed: int = 0
    ndotv_floor: float = 1e-2
    include_diffuse: bool = True
    sampler: str = "hammersley"


@dataclass
class HNetConfig:
    """Architecture of one H-Net instance"""
    r: int = 4
    variant: str = "full"
    encoder_channels: List[int] = field(default_factory=lambda: [64, 64, 32, 24, 24, 32])
    fusion_blocks: int = 6
    fusion_channels: int = 128
    use_history: bool = True
    history_frames: int = 2
    history_mode: str = "frame"
    alignment: str = "unshuffle"
    use_hr_gbuffer: bool = True
    demodulate: bool = True
    g_lr_channels: List[str] = field(default_factory=lambda: ['depth', 'normal'])
    g_hr_channels: List[str] = field(default_factory=lambda: ['fbeta', 'roughness', 'ndotv', 'normal', 'emissive'])

    @classmethod
    def full(cls, r: int = 4, **overrides) -> 'HNetConfig':
        """Full-quality configuration"""
        config = cls(r=r, **overrides)
        config.validate()
        return config

    @classmethod
    def lite(cls, r: int = 4, **overrides) -> 'HNetConfig':
        """Performance configuration: no history, half-width DWS fusion"""
        params = dict(variant="lite", fusion_channels=64, use_history=False, history_frames=0)
        params.update(overrides)
        config = cls(r=r, **params)
        config.validate()
        return config

    @property
    def ld_channels(self) -> int:
        return 3

    @property
    def g_lr_count(self) -> int:
        return sum(CHANNEL_GROUPS[name] for name in self.g_lr_channels)

    @property
    def g_hr_count(self) -> int:
        return sum(CHANNEL_GROUPS[name] for name in self.g_hr_channels)

    @property
    def frame_channels(self) -> int:
        """Channels of one LR frame fed to the encoder"""
        return self.ld_channels + self.g_lr_count

    @property
    def n_history(self) -> int:
        return self.history_frames if self.use_history else 0

    @property
    def encoder_in_channels(self) -> int:
        if self.history_mode == "frame":
            return self.frame_channels * (1 + self.n_history)
        return self.frame_channels

    @property
    def skip_channels(self) -> int:
        return self.encoder_channels[0]

    @property
    def encoder_out_channels(self) -> int:
        return self.encoder_channels[-1]

    @property
    def aligned_hr_channels(self) -> int:
        """HR guide channels after alignment to the LR grid"""
        if not self.use_hr_gbuffer:
            return 0
        if self.alignment == "unshuffle":
            return self.g_hr_count * self.r * self.r
        return self.g_hr_count

    @property
    def fusion_in_channels(self) -> int:
        features = self.encoder_out_channels
        if self.history_mode == "feature":
            features *= 1 + self.n_history
        return features + self.aligned_hr_channels

    @property
    def head_in_channels(self) -> int:
        return (self.skip_channels + self.fusion_channels) // (self.r * self.r)

    @property
    def fusion_layer_variant(self) -> str:
        return "dws" if self.variant == "lite" else "standard"

    def validate(self) -> None:
        """Raise ConfigError on inconsistent settings"""
        if self.r not in SUPPORTED_FACTORS:
            raise ConfigError(f"upscale factor r={self.r} not in {SUPPORTED_FACTORS}")
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant '{self.variant}'")
        if self.alignment not in ALIGNMENTS:
            raise ConfigError(f"unknown alignment '{self.alignment}', expected one of {ALIGNMENTS}")
        if self.history_mode not in HISTORY_MODES:
            raise ConfigError(f"unknown history_mode '{self.history_mode}'")
        if self.variant == "lite" and self.use_history:
            raise ConfigError("lite variant runs without history (use_history must be false)")
        if self.use_history and self.history_frames not in (1, 2):
            raise ConfigError(f"history_frames must be 1 or 2 when history is used, got {self.history_frames}")
        if not self.encoder_channels or any(c <= 0 for c in self.encoder_channels):
            raise ConfigError(f"encoder_channels must be positive, got {self.encoder_channels}")
        if self.fusion_blocks < 0 or self.fusion_channels <= 0:
            raise ConfigError("fusion_blocks must be >= 0 and fusion_channels > 0")
        for name in list(self.g_lr_channels) + list(self.g_hr_channels):
            if name not in CHANNEL_GROUPS:
                raise ConfigError(f"unknown G-buffer channel group '{name}'")
        shuffled = self.skip_channels + self.fusion_channels
        if shuffled % (self.r * self.r) != 0:
            raise ConfigError(
                f"skip+fusion channels ({shuffled}) must be divisible by r^2={self.r * self.r} for pixel shuffle"
            )


@dataclass
class LossWeights:
    """Weights of the perceptual and structural loss terms"""
    lambda_p: float = 0.5
    lambda_s: float = 0.05

    def __post_init__(self):
        if self.lambda_p < 0 or self.lambda_s < 0:
            raise ConfigError(f"loss weights must be non-negative, got {self.lambda_p}, {self.lambda_s}")


@dataclass
class AdamHyper:
    """Adam optimizer hyperparameters"""
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass
class TrainSettings:
    """Training loop settings"""
    steps: int = 2000
    batch_size: int = 4
    crop: int = 64  # LR pixels
    checkpoint_every: int = 500
    seed: int = 0
    dtype: str = "float32"
    log_every: int = 50


@dataclass
class DatasetSettings:
    """Procedural dataset settings"""
    hr: int = 512
    r: int = 4
    frames: int = 10
    scene_seed: int = 0
    path_seed: int = 0
    path: str = "pan"
    downsample: str = "native"
    train_fraction: float = 0.8


@dataclass
class FuseSRConfig:
    """Main configuration class"""
    lut: LutSettings
    model: HNetConfig
    loss: LossWeights
    adam: AdamHyper
    train: TrainSettings
    dataset: DatasetSettings

    @classmethod
    def default(cls) -> 'FuseSRConfig':
        """Create default configuration"""
        return cls(
            lut=LutSettings(),
            model=HNetConfig(),
            loss=LossWeights(),
            adam=AdamHyper(),
            train=TrainSettings(),
            dataset=DatasetSettings(),
        )

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'FuseSRConfig':
        """Build a config, merging a (possibly partial) dict onto defaults"""
        default = cls.default()
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config section(s): {sorted(unknown)}")

        sections = {}
        for f in fields(cls):
            current = getattr(default, f.name)
            sections[f.name] = merge_section(current, data.get(f.name, {}), f.name)

        config = cls(**sections)
        config.model.validate()
        return config


def merge_section(current, overrides: Dict[str, Any], section: str = ""):
    """Return a copy of dataclass `current` with `overrides` applied"""
    if not isinstance(overrides, dict):
        raise ConfigError(f"config section '{section}' must be an object")
    names = {f.name for f in fields(current)}
    unknown = set(overrides) - names
    if unknown:
        raise ConfigError(f"unknown key(s) in section '{section}': {sorted(unknown)}")
    values = asdict(current)
    values.update(overrides)
    return type(current)(**values)


class ConfigManager:
    """Configuration file manager"""

    def __init__(self, config_dir: Optional[str] = None):
        if config_dir is None:
            config_dir = os.getenv('FUSESR_HOME') or (Path.home() / '.fusesr')
        self.config_dir = Path(config_dir)
        self.config_file = self.config_dir / 'config.json'
        self._config: Optional[FuseSRConfig] = None

    @property
    def cache_dir(self) -> Path:
        path = self.config_dir / 'cache'
        path.mkdir(parents=True, exist_ok=True)
        return path

    def load_config(self) -> FuseSRConfig:
        """Load configuration from file or fall back to defaults"""
        if self._config is not None:
            return self._config

        if self.config_file.exists():
            self._config = self.load_file(self.config_file)
        else:
            self._config = FuseSRConfig.default()
        return self._config

    def load_file(self, path) -> FuseSRConfig:
        """Load a (partial) JSON config file"""
        try:
            with open(path, 'r') as f:
                data = json.load(f)
        except json.JSONDecodeError as e:
            raise ConfigError(f"Error loading config {path}: {e}")
        except OSError as e:
            raise ConfigError(f"Error reading config {path}: {e}")
        return FuseSRConfig.from_dict(data)

    def save_config(self, config: FuseSRConfig) -> None:
        """Save configuration to file"""
        self.config_dir.mkdir(parents=True, exist_ok=True)
        with open(self.config_file, 'w') as f:
            json.dump(config.to_dict(), f, indent=2)
        self._config = config


# Global config manager instance
config_manager = ConfigManager()


def get_config() -> FuseSRConfig:
    """Get current configuration"""
    return config_manager.load_config()


def save_config(config: FuseSRConfig) -> None:
    """Save configuration"""
    config_manager.save_config(config)


def model_config_from_dict(data: Dict[str, Any]) -> HNetConfig:
    """HNetConfig from a model.json payload"""
    config = merge_section(HNetConfig(), data, 'model')
    config.validate()
    return config


if __name__ == "__main__":
    config = get_config()
    print(json.dumps(config.to_dict(), indent=2))
    lite = HNetConfig.lite(r=8)
    print(f"lite r=8: encoder_in={lite.encoder_in_channels} fusion_in={lite.fusion_in_channels} "
          f"head_in={lite.head_in_channels}")
