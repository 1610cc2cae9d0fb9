"""
Configuration module
Loads environment settings and the key-value run configuration
"""

import os
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

from dotenv import dotenv_values, load_dotenv


# Load environment variables from .env file
load_dotenv()


class ConfigError(ValueError):
    """
    Raised when a configuration key or value is invalid
    """


class Settings:
    """
    Environment settings
    Stores machine-specific parameters that do not belong in a run config
    """

    # Torch device used for training and sampling
    DEVICE = os.getenv("TEXTSR_DEVICE", "cpu")

    # Directory where checkpoints, reports and samples are written
    CHECKPOINT_DIR = os.getenv("TEXTSR_CHECKPOINT_DIR", "checkpoints")

    # Optional TrueType font for the synthetic text renderer
    FONT_PATH = os.getenv("TEXTSR_FONT_PATH")

    # Logging verbosity
    LOG_LEVEL = os.getenv("TEXTSR_LOG_LEVEL", "INFO")


@dataclass(frozen=True)
class Config:
    """
    Run configuration
    Field defaults are the full-scale values (preset "default")
    """

    # Noise schedule
    schedule: str = "linear"
    T: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    variance: str = "beta_tilde"

    # Sampler
    sampler: str = "ddim"
    steps: int = 200
    eta: float = 0.0

    # Guided U-Net
    base_channels: int = 160
    channel_mults: tuple = (1, 2, 2, 4)
    num_heads: int = 8
    rg_block_ids: frozenset = frozenset({1, 2, 3, 4})
    latent_channels: int = 3
    lr_channels: int = 3
    max_len: int = 32
    ffn_mult: int = 4

    # Character set (blank is added at index 0)
    alphabet: str = "0123456789abcdefghijklmnopqrstuvwxyz"

    # Latent codec
    codec_channels: int = 64
    codebook_size: int = 512
    commitment_weight: float = 0.25
    codec_epochs: int = 50
    codec_lr: float = 2e-4
    codec_batch_size: int = 32

    # Recognizer
    recognizer_channels: int = 64
    recognizer_hidden: int = 128
    recognizer_epochs: int = 60
    recognizer_lr: float = 1e-3
    recognizer_batch_size: int = 64

    # Diffusion training
    batch_size: int = 64
    lr: float = 1e-6
    epochs: int = 250
    weight_decay: float = 0.01
    lambda_recog: float = 1.0
    save_every: int = 50
    num_workers: int = 0

    # Synthetic corpus
    synth_count: int = 2000
    min_length: int = 3
    max_length: int = 8
    blur_sigma_min: float = 0.0
    blur_sigma_max: float = 1.6
    noise_std: float = 0.02
    holdout_fraction: float = 0.1
    data_seed: int = 1234

    def validate(self):
        """
        Validates that all parameters are in range
        Raises ConfigError naming the first offending key
        """

        positive_keys = [
            "T", "steps", "base_channels", "num_heads", "latent_channels",
            "lr_channels", "max_len", "ffn_mult", "codec_channels",
            "codec_epochs", "codec_batch_size", "recognizer_channels",
            "recognizer_hidden", "recognizer_epochs", "recognizer_batch_size",
            "batch_size", "epochs", "save_every", "synth_count", "min_length",
        ]

        for key in positive_keys:
            if getattr(self, key) <= 0:
                raise ConfigError(f"{key} must be positive, got {getattr(self, key)}")

        for key in ["lr", "codec_lr", "recognizer_lr"]:
            if getattr(self, key) <= 0:
                raise ConfigError(f"{key} must be positive, got {getattr(self, key)}")

        if self.schedule not in ("linear", "cosine"):
            raise ConfigError(f"schedule must be linear or cosine, got {self.schedule!r}")

        if self.variance not in ("beta_tilde", "beta"):
            raise ConfigError(f"variance must be beta_tilde or beta, got {self.variance!r}")

        if self.sampler not in ("ddpm", "ddim"):
            raise ConfigError(f"sampler must be ddpm or ddim, got {self.sampler!r}")

        if not 0 <= self.beta_start <= self.beta_end < 1:
            raise ConfigError("beta_start/beta_end must satisfy 0 <= beta_start <= beta_end < 1")

        if self.steps > self.T:
            raise ConfigError(f"steps ({self.steps}) must not exceed T ({self.T})")

        if not 0.0 <= self.eta <= 1.0:
            raise ConfigError(f"eta must lie in [0, 1], got {self.eta}")

        if len(self.channel_mults) != 4 or min(self.channel_mults) <= 0:
            raise ConfigError("channel_mults must hold 4 positive integers")

        if not set(self.rg_block_ids) <= {1, 2, 3, 4}:
            raise ConfigError(f"rg_block_ids must be a subset of {{1,2,3,4}}, got {sorted(self.rg_block_ids)}")

        if self.lambda_recog < 0:
            raise ConfigError("lambda_recog must be non-negative")

        if self.codebook_size < 0:
            raise ConfigError("codebook_size must be >= 0 (0 disables quantization)")

        if self.max_length < self.min_length:
            raise ConfigError("max_length must be >= min_length")

        if not 0 <= self.blur_sigma_min <= self.blur_sigma_max:
            raise ConfigError("blur sigmas must satisfy 0 <= blur_sigma_min <= blur_sigma_max")

        if self.noise_std < 0:
            raise ConfigError("noise_std must be non-negative")

        if not 0 < self.holdout_fraction < 1:
            raise ConfigError("holdout_fraction must lie in (0, 1)")

        if not self.alphabet or self.alphabet != self.alphabet.lower():
            raise ConfigError("alphabet must be a non-empty lowercase string")

        if len(set(self.alphabet)) != len(self.alphabet):
            raise ConfigError("alphabet must not repeat characters")

        return self

    def unet_config(self):
        """
        Builds the guided U-Net configuration from this run config
        """

        from textsr.models.unet import GuidedUNetConfig

        return GuidedUNetConfig(
            base_channels=self.base_channels,
            channel_mults=tuple(self.channel_mults),
            num_heads=self.num_heads,
            rg_block_ids=frozenset(self.rg_block_ids),
            latent_channels=self.latent_channels,
            lr_channels=self.lr_channels,
            max_len=self.max_len,
            alphabet_size=len(self.alphabet) + 1,
            ffn_mult=self.ffn_mult,
        )

    def to_dict(self):
        """
        Returns a plain dictionary (used as checkpoint config echo)
        """

        data = asdict(self)
        data["channel_mults"] = list(self.channel_mults)
        data["rg_block_ids"] = sorted(self.rg_block_ids)

        return data

    @classmethod
    def from_dict(cls, data):
        """
        Rebuilds a config from a checkpoint echo
        """

        return apply_overrides(cls(), {key: _format_value(value) for key, value in data.items()})


# Desk-scale preset: small enough to train on one workstation
DESK_OVERRIDES = {
    "base_channels": 32,
    "num_heads": 4,
    "T": 100,
    "steps": 50,
    "epochs": 500,
    "batch_size": 32,
    "lr": 1e-4,
    "save_every": 100,
}

PRESETS = {
    "default": Config(),
    "desk": replace(Config(), **DESK_OVERRIDES),
}


def _format_value(value):
    """
    Converts a python value back into its key-value file spelling
    """

    if isinstance(value, (list, tuple, set, frozenset)):
        if len(value) == 0:
            return "none"

        return ",".join(str(item) for item in value)

    return str(value)


def _coerce(key, raw_value, default):
    """
    Converts a raw string to the type of the field default
    """

    text = raw_value.strip()

    try:
        # Integer sets, written "1,2" or "none"
        if isinstance(default, frozenset):
            if text.lower() in ("", "none", "{}"):
                return frozenset()

            return frozenset(int(item) for item in text.strip("{}").split(","))

        # Integer tuples, written "1,2,2,4"
        if isinstance(default, tuple):
            return tuple(int(item) for item in text.strip("()[]").split(","))

        if isinstance(default, int):
            return int(text)

        if isinstance(default, float):
            return float(text)

    except ValueError as error:
        raise ConfigError(f"invalid value for {key}: {raw_value!r} ({error})") from error

    return text


def apply_overrides(config, overrides):
    """
    Returns a copy of config with string overrides applied

    Parameters:
    config - base Config
    overrides - mapping of key to raw string value

    Raises ConfigError for unknown keys
    """

    known = {item.name: item for item in fields(Config)}
    changes = {}

    for key, raw_value in overrides.items():
        if key not in known:
            raise ConfigError(f"unknown config key: {key}")

        changes[key] = _coerce(key, raw_value, getattr(config, key))

    return replace(config, **changes)


def parse_assignments(assignments):
    """
    Parses "key=value" strings given with --set
    """

    overrides = {}

    for assignment in assignments:
        if "=" not in assignment:
            raise ConfigError(f"override must look like key=value, got {assignment!r}")

        key, value = assignment.split("=", 1)
        overrides[key.strip()] = value

    return overrides


def load_config(source=None, overrides=None):
    """
    Loads a run configuration

    Parameters:
    source - preset name ("default", "desk"), path to a key=value file,
             or None for the desk preset
    overrides - optional mapping applied last (--set values)

    Returns a validated Config
    """

    # Pick the base configuration
    if source is None:
        config = PRESETS["desk"]
    elif source in PRESETS:
        config = PRESETS[source]
    else:
        path = Path(source)

        if not path.is_file():
            raise ConfigError(f"config file not found: {source}")

        # Files may start from a preset with "preset=desk"
        file_values = {key: value for key, value in dotenv_values(path).items() if value is not None}
        preset_name = file_values.pop("preset", "default")

        if preset_name not in PRESETS:
            raise ConfigError(f"unknown preset in {source}: {preset_name}")

        config = apply_overrides(PRESETS[preset_name], file_values)

    # Command-line overrides take precedence over file values
    if overrides:
        config = apply_overrides(config, overrides)

    return config.validate()


def dump_config(config):
    """
    Renders a config as key=value lines (same format load_config reads)
    """

    lines = []

    for key, value in config.to_dict().items():
        lines.append(f"{key}={_format_value(value)}")

    return "\n".join(lines) + "\n"
