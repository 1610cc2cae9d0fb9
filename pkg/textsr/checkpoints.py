"""
Checkpoint module
Handles saving and loading of model weights
"""

import logging
from pathlib import Path

import torch
from torch import nn


logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "textsr"
CHECKPOINT_VERSION = 1

KINDS = ("codec", "recognizer", "diffusion")


class CheckpointError(RuntimeError):
    """
    Raised when a checkpoint is missing or incompatible
    """


def save_checkpoint(path, kind, config, state, extra=None):
    """
    Writes a versioned checkpoint

    Parameters:
    path - target file; parent directories are created
    kind - codec, recognizer or diffusion
    config - Config echoed into the checkpoint
    state - mapping of name to module or state dict
    extra - optional dictionary (epoch, loss history, ...)

    Returns the path written
    """

    if kind not in KINDS:
        raise ValueError(f"unknown checkpoint kind: {kind!r}")

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)

    # Modules are stored as plain state dicts
    weights = {}

    for name, value in state.items():
        weights[name] = value.state_dict() if isinstance(value, nn.Module) else value

    torch.save(
        {
            "format": CHECKPOINT_FORMAT,
            "version": CHECKPOINT_VERSION,
            "kind": kind,
            "config": config.to_dict(),
            "state": weights,
            "extra": extra or {},
        },
        path,
    )

    logger.info("saved %s checkpoint to %s", kind, path)

    return path


def load_checkpoint(path, kind):
    """
    Reads a checkpoint and checks its format, version and kind
    Returns the checkpoint dictionary
    """

    path = Path(path)

    if not path.is_file():
        raise CheckpointError(f"checkpoint not found: {path}")

    # Tensors and plain containers only
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as error:
        raise CheckpointError(f"cannot read checkpoint {path}: {error}") from error

    # Format, version and kind must all match
    if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path} is not a textsr checkpoint")

    if payload.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {payload.get('version')}")

    if payload.get("kind") != kind:
        raise CheckpointError(f"{path}: expected a {kind} checkpoint, found {payload.get('kind')}")

    return payload


def restore_module(module, payload, name):
    """
    Loads payload["state"][name] into module
    """

    try:
        module.load_state_dict(payload["state"][name])
    except (KeyError, RuntimeError) as error:
        raise CheckpointError(f"cannot restore {name} weights: {error}") from error

    return module
