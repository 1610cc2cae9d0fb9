"""
Latent codec
A 2x convolutional autoencoder with an optional vector-quantization bottleneck.
The encoder maps an HR image to a latent with the LR spatial size;
the decoder snaps the latent to the codebook and reconstructs the image.
"""

import torch
import torch.nn.functional as F
from einops import rearrange
from torch import nn

from textsr.models.unet import group_norm


def vq_quantize(z, codebook, commitment_weight=0.25):
    """
    Snaps every spatial position of z to its nearest codebook entry

    Parameters:
    z - latent (B, C_z, H, W)
    codebook - entries (K, C_z)
    commitment_weight - weight of the commitment term

    Returns:
    - quantized latent; forward values are codebook entries,
      gradients pass straight through to z
    - indices (B, H, W)
    - loss: codebook term + commitment_weight * commitment term
    """

    if codebook.dim() != 2 or codebook.shape[1] != z.shape[1]:
        raise ValueError(
            f"codebook entries of dim {tuple(codebook.shape)[1:]} do not match latent channels {z.shape[1]}"
        )

    batch, _, height, width = z.shape
    flat = rearrange(z, "b c h w -> (b h w) c")

    # Squared Euclidean distance to every entry
    distances = (
        flat.pow(2).sum(dim=1, keepdim=True)
        + codebook.pow(2).sum(dim=1)
        - 2 * flat @ codebook.t()
    )
    indices = distances.argmin(dim=1)

    quantized = rearrange(codebook[indices], "(b h w) c -> b c h w", b=batch, h=height, w=width)

    codebook_loss = F.mse_loss(quantized, z.detach())
    commitment_loss = F.mse_loss(z, quantized.detach())
    loss = codebook_loss + commitment_weight * commitment_loss

    # z - z.detach() is exactly zero, so forward values stay codebook members
    straight_through = quantized.detach() + (z - z.detach())

    return straight_through, indices.view(batch, height, width), loss


class VectorQuantizer(nn.Module):
    """
    Learned codebook of num_embeddings entries of size embedding_dim
    """

    def __init__(self, num_embeddings, embedding_dim, commitment_weight=0.25):
        super().__init__()
        self.commitment_weight = commitment_weight
        self.embedding = nn.Embedding(num_embeddings, embedding_dim)
        # Entries start uniform in [-1/K, 1/K]
        nn.init.uniform_(self.embedding.weight, -1.0 / num_embeddings, 1.0 / num_embeddings)

    def forward(self, z):
        return vq_quantize(z, self.embedding.weight, self.commitment_weight)


class CodecResBlock(nn.Module):
    """
    Pre-activation residual block at constant width
    """

    def __init__(self, channels):
        super().__init__()
        self.block = nn.Sequential(
            group_norm(channels),
            nn.SiLU(),
            nn.Conv2d(channels, channels, kernel_size=3, padding=1),
            group_norm(channels),
            nn.SiLU(),
            nn.Conv2d(channels, channels, kernel_size=3, padding=1),
        )

    def forward(self, x):
        return x + self.block(x)


class LatentCodec(nn.Module):
    """
    Encoder E and decoder D of the latent space

    codebook_size = 0 turns the codec into a plain autoencoder.
    """

    def __init__(
        self,
        image_channels=3,
        latent_channels=3,
        hidden_channels=64,
        codebook_size=512,
        commitment_weight=0.25,
    ):
        super().__init__()
        self.image_channels = image_channels
        self.latent_channels = latent_channels

        # Full resolution -> one stride-2 conv -> LR-sized latent
        self.encoder = nn.Sequential(
            nn.Conv2d(image_channels, hidden_channels, kernel_size=3, padding=1),
            CodecResBlock(hidden_channels),
            nn.Conv2d(hidden_channels, hidden_channels, kernel_size=3, stride=2, padding=1),
            CodecResBlock(hidden_channels),
            group_norm(hidden_channels),
            nn.SiLU(),
            nn.Conv2d(hidden_channels, latent_channels, kernel_size=3, padding=1),
        )

        # Bottleneck
        if codebook_size > 0:
            self.quantizer = VectorQuantizer(codebook_size, latent_channels, commitment_weight)
        else:
            self.quantizer = None

        # Mirror of the encoder with a nearest 2x upsample
        self.decoder = nn.Sequential(
            nn.Conv2d(latent_channels, hidden_channels, kernel_size=3, padding=1),
            CodecResBlock(hidden_channels),
            nn.Upsample(scale_factor=2, mode="nearest"),
            nn.Conv2d(hidden_channels, hidden_channels, kernel_size=3, padding=1),
            CodecResBlock(hidden_channels),
            group_norm(hidden_channels),
            nn.SiLU(),
            nn.Conv2d(hidden_channels, image_channels, kernel_size=3, padding=1),
        )

    @classmethod
    def from_config(cls, config):
        return cls(
            image_channels=config.lr_channels,
            latent_channels=config.latent_channels,
            hidden_channels=config.codec_channels,
            codebook_size=config.codebook_size,
            commitment_weight=config.commitment_weight,
        )

    def encode(self, x_hr):
        """
        HR image (B, 3, 2H, 2W) -> latent (B, C_z, H, W)
        """

        if x_hr.dim() != 4 or x_hr.shape[1] != self.image_channels:
            raise ValueError(f"expected images (B, {self.image_channels}, H, W), got {tuple(x_hr.shape)}")

        if x_hr.shape[-2] % 2 or x_hr.shape[-1] % 2:
            raise ValueError(f"image dims must be even, got {tuple(x_hr.shape[-2:])}")

        return self.encoder(x_hr)

    def quantize(self, z):
        """
        Returns (latent, indices, vq_loss); identity when quantization is disabled
        """

        if self.quantizer is None:
            return z, None, z.new_zeros(())

        return self.quantizer(z)

    def decode_raw(self, z):
        """
        Latent -> (unclamped image, vq_loss)
        """

        if z.dim() != 4 or z.shape[1] != self.latent_channels:
            raise ValueError(f"expected latents (B, {self.latent_channels}, H, W), got {tuple(z.shape)}")

        # Snap to the codebook before decoding
        quantized, _, vq_loss = self.quantize(z)

        return self.decoder(quantized), vq_loss

    def decode(self, z):
        """
        Latent (B, C_z, H, W) -> image (B, 3, 2H, 2W) clamped to [-1, 1]
        """

        image, _ = self.decode_raw(z)

        return image.clamp(-1.0, 1.0)

    def forward(self, x_hr):
        """
        Returns (unclamped reconstruction, vq_loss) for training
        """

        return self.decode_raw(self.encode(x_hr))
