import pytest
import torch

from textsr.config import PRESETS, apply_overrides
from textsr.models.unet import GuidedUNetConfig


@pytest.fixture
def mini_unet_config():
    """
    Miniature guided U-Net: base 8, 2 heads, 5-symbol alphabet
    """

    return GuidedUNetConfig(
        base_channels=8,
        channel_mults=(1, 2, 2, 4),
        num_heads=2,
        rg_block_ids=frozenset({1, 2, 3, 4}),
        latent_channels=3,
        lr_channels=3,
        max_len=6,
        alphabet_size=5,
        ffn_mult=2,
    )


@pytest.fixture
def tiny_config():
    """
    Run config small enough for unit tests
    """

    return apply_overrides(PRESETS["desk"], {
        "base_channels": "8",
        "num_heads": "2",
        "T": "20",
        "steps": "5",
        "max_len": "8",
        "alphabet": "abc",
        "codec_channels": "8",
        "codebook_size": "16",
        "codec_epochs": "1",
        "codec_batch_size": "4",
        "recognizer_channels": "4",
        "recognizer_hidden": "8",
        "recognizer_epochs": "1",
        "recognizer_batch_size": "4",
        "batch_size": "2",
        "epochs": "2",
        "save_every": "1",
        "synth_count": "6",
        "min_length": "2",
        "max_length": "3",
    }).validate()


@pytest.fixture
def generator():
    return torch.Generator().manual_seed(0)
