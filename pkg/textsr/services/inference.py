"""
Inference service
End-to-end super-resolution: LR image -> guidance -> reverse diffusion -> decoder
"""

import logging
from pathlib import Path

import torch
import torch.nn.functional as F

from textsr.checkpoints import load_checkpoint, restore_module
from textsr.config import Config
from textsr.models.codec import LatentCodec
from textsr.models.recognizer import Recognizer
from textsr.models.unet import GuidedUNet
from textsr.services.diffusion import build_schedule, sample_loop


logger = logging.getLogger(__name__)


def bicubic_upsample(x_lr):
    """
    Bicubic 2x upsample baseline, clamped to [-1, 1]
    """

    return F.interpolate(x_lr, scale_factor=2, mode="bicubic", align_corners=False).clamp(-1.0, 1.0)


def _as_batch(x_lr):
    if x_lr.dim() == 3:
        return x_lr[None], True

    if x_lr.dim() == 4:
        return x_lr, False

    raise ValueError(f"expected an image (3, H, W) or batch (B, 3, H, W), got {tuple(x_lr.shape)}")


class SuperResolver:
    """
    Bundles codec, guided U-Net and guidance recognizer for sampling
    """

    def __init__(self, codec, unet, recognizer, config, device="cpu"):
        self.device = torch.device(device)
        self.codec = codec.to(self.device).eval()
        self.unet = unet.to(self.device).eval()
        self.recognizer = recognizer.to(self.device).eval()
        self.config = config
        self.schedule = build_schedule(config.schedule, config.T, config.beta_start, config.beta_end)

    @classmethod
    def from_checkpoints(cls, checkpoint_dir, device="cpu", diffusion_name="diffusion.pt"):
        """
        Loads codec.pt and a diffusion checkpoint from checkpoint_dir
        The network configuration comes from the diffusion checkpoint.
        """

        checkpoint_dir = Path(checkpoint_dir)

        # The diffusion checkpoint carries the run config
        diffusion = load_checkpoint(checkpoint_dir / diffusion_name, "diffusion")
        config = Config.from_dict(diffusion["config"])

        # The codec is trained separately and keeps its own config
        codec_payload = load_checkpoint(checkpoint_dir / "codec.pt", "codec")
        codec = restore_module(LatentCodec.from_config(Config.from_dict(codec_payload["config"])), codec_payload, "codec")

        unet = restore_module(GuidedUNet(config.unet_config()), diffusion, "unet")
        recognizer = restore_module(Recognizer.from_config(config), diffusion, "recognizer")

        logger.info("loaded %s (epoch %s)", diffusion_name, diffusion["extra"].get("epoch", "?"))

        return cls(codec, unet, recognizer, config, device)

    @torch.no_grad()
    def super_resolve(self, x_lr, sampler=None, steps=None, eta=None, seed=0, progress=False):
        """
        Super-resolves an LR image or batch

        Parameters:
        x_lr - (3, H, W) or (B, 3, H, W) in [-1, 1]
        sampler, steps, eta - override the configured sampler settings
        seed - seeds the initial noise and every sampler noise draw

        Returns SR image(s) with twice the LR dims, same batching as the input
        """

        # Accept a single image or a batch
        batch, single = _as_batch(x_lr)
        batch = batch.to(self.device)

        # Recognition guidance from the LR input
        c_rg = self.recognizer(batch)

        # Reverse diffusion in the latent space
        z0 = sample_loop(
            self.unet,
            batch,
            c_rg,
            self.schedule,
            sampler=sampler or self.config.sampler,
            steps=steps or self.config.steps,
            eta=self.config.eta if eta is None else eta,
            seed=seed,
            latent_channels=self.config.latent_channels,
            variance=self.config.variance,
            progress=progress,
        )

        # Decode the latent to an HR image
        sr = self.codec.decode(z0)

        return sr[0] if single else sr
