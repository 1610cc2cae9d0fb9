"""
Recognition-guided denoising U-Net

Four encoder blocks, one middle block and four decoder blocks.
Every block runs two recognition-guided residual blocks (RGRB):
residual block with timestep injection, multi-head self attention over
spatial tokens and, in guided blocks, multi-head cross attention from the
spatial tokens to the rows of the recognition guidance matrix.
"""

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from einops import rearrange
from torch import nn


@dataclass(frozen=True)
class GuidedUNetConfig:
    """
    Guided U-Net hyperparameters

    rg_block_ids names the encoder blocks that use cross attention;
    decoder block j is guided when encoder block 5 - j is.
    """

    base_channels: int = 160
    channel_mults: tuple = (1, 2, 2, 4)
    num_heads: int = 8
    rg_block_ids: frozenset = frozenset({1, 2, 3, 4})
    latent_channels: int = 3
    lr_channels: int = 3
    max_len: int = 32
    alphabet_size: int = 37
    ffn_mult: int = 4

    @property
    def time_dim(self):
        # Timestep embedding width
        return 4 * self.base_channels

    @property
    def widths(self):
        """
        Output channel width of encoder blocks 1..4
        """

        return [self.base_channels * mult for mult in self.channel_mults]

    @property
    def entry_widths(self):
        """
        Input channel width of encoder blocks 1..4
        """

        return [self.base_channels] + self.widths[:-1]

    def is_guided(self, block_id, direction="encoder"):
        if direction == "decoder":
            block_id = 5 - block_id

        return block_id in self.rg_block_ids

    def validate(self):
        """
        Raises ValueError for inconsistent settings
        """

        sizes = {
            "base_channels": self.base_channels,
            "num_heads": self.num_heads,
            "latent_channels": self.latent_channels,
            "lr_channels": self.lr_channels,
            "max_len": self.max_len,
            "alphabet_size": self.alphabet_size,
            "ffn_mult": self.ffn_mult,
        }

        # Sizes
        for name, value in sizes.items():
            if value <= 0:
                raise ValueError(f"{name} must be positive, got {value}")

        if len(self.channel_mults) != 4 or min(self.channel_mults) <= 0:
            raise ValueError(f"channel_mults must hold 4 positive integers, got {self.channel_mults}")

        if not set(self.rg_block_ids) <= {1, 2, 3, 4}:
            raise ValueError(f"rg_block_ids must be a subset of {{1,2,3,4}}, got {sorted(self.rg_block_ids)}")

        # Every attention width must split evenly into heads
        for width in set(self.widths + self.entry_widths):
            if width % self.num_heads:
                raise ValueError(f"num_heads={self.num_heads} does not divide channel width {width}")

        return self


def group_norm(channels):
    return nn.GroupNorm(math.gcd(32, channels), channels)


def sinusoidal_embedding(t, dim):
    """
    Sinusoidal timestep encoding: sines in the first half, cosines in the second

    Parameters:
    t - LongTensor (B,) of timesteps
    dim - even embedding size

    Returns float64 tensor (B, dim)
    """

    if dim % 2:
        raise ValueError(f"embedding dim must be even, got {dim}")

    # Geometric frequencies from 1 down to 1/10000
    half = dim // 2
    exponents = torch.arange(half, dtype=torch.float64, device=t.device) / half
    frequencies = torch.exp(-math.log(10000.0) * exponents)
    angles = t.to(torch.float64)[:, None] * frequencies[None, :]

    return torch.cat([torch.sin(angles), torch.cos(angles)], dim=-1)


class TimestepEmbedding(nn.Module):
    """
    Sinusoidal encoding of size base_channels followed by a two-layer projection to 4 * base_channels
    """

    def __init__(self, dim, out_dim):
        super().__init__()
        self.dim = dim
        self.mlp = nn.Sequential(nn.Linear(dim, out_dim), nn.SiLU(), nn.Linear(out_dim, out_dim))

    def forward(self, t):
        # Fixed encoding, then the learned projection
        encoding = sinusoidal_embedding(t, self.dim).to(self.mlp[0].weight.dtype)

        return self.mlp(encoding)


class ResBlock(nn.Module):
    """
    Residual block; the timestep embedding is added after the entry convolution
    """

    def __init__(self, in_channels, out_channels, time_dim):
        super().__init__()
        self.norm_in = group_norm(in_channels)
        self.conv_in = nn.Conv2d(in_channels, out_channels, kernel_size=3, padding=1)
        self.time_proj = nn.Linear(time_dim, out_channels)
        self.norm_out = group_norm(out_channels)
        self.conv_out = nn.Conv2d(out_channels, out_channels, kernel_size=3, padding=1)

        # Residual shortcut
        if in_channels == out_channels:
            self.skip = nn.Identity()
        else:
            self.skip = nn.Conv2d(in_channels, out_channels, kernel_size=1)

    def forward(self, x, t_emb):
        # Entry convolution, then the timestep added per channel
        h = self.conv_in(F.silu(self.norm_in(x)))
        h = h + self.time_proj(F.silu(t_emb))[:, :, None, None]
        h = self.conv_out(F.silu(self.norm_out(h)))

        return h + self.skip(x)


class MultiHeadAttention(nn.Module):
    """
    Scaled dot-product attention; keys and values come from `context` when given
    """

    def __init__(self, channels, num_heads):
        super().__init__()

        if channels % num_heads:
            raise ValueError(f"num_heads={num_heads} does not divide channel width {channels}")

        self.num_heads = num_heads
        self.scale = (channels // num_heads) ** -0.5
        self.to_q = nn.Linear(channels, channels)
        self.to_k = nn.Linear(channels, channels)
        self.to_v = nn.Linear(channels, channels)
        self.to_out = nn.Linear(channels, channels)

    def forward(self, x, context=None, return_weights=False):
        # Self attention when no context is given
        context = x if context is None else context

        # Project queries, keys and values to heads
        q = rearrange(self.to_q(x), "b n (h d) -> b h n d", h=self.num_heads)
        k = rearrange(self.to_k(context), "b m (h d) -> b h m d", h=self.num_heads)
        v = rearrange(self.to_v(context), "b m (h d) -> b h m d", h=self.num_heads)

        # Attention weights over the context tokens
        weights = torch.softmax(torch.einsum("bhnd,bhmd->bhnm", q, k) * self.scale, dim=-1)
        out = torch.einsum("bhnm,bhmd->bhnd", weights, v)

        # Merge heads back to the channel width
        out = self.to_out(rearrange(out, "b h n d -> b n (h d)"))

        if return_weights:
            return out, weights

        return out


class FeedForward(nn.Module):
    """
    Gated GELU feed-forward network with expansion factor ffn_mult
    """

    def __init__(self, channels, ffn_mult):
        super().__init__()
        self.proj_in = nn.Linear(channels, channels * ffn_mult * 2)
        self.proj_out = nn.Linear(channels * ffn_mult, channels)

    def forward(self, x):
        # Half of the projection gates the other half
        x, gate = self.proj_in(x).chunk(2, dim=-1)

        return self.proj_out(x * F.gelu(gate))


class SelfAttentionLayer(nn.Module):
    """
    Pre-norm MSA followed by pre-norm FFN, both residual
    """

    def __init__(self, channels, num_heads, ffn_mult):
        super().__init__()
        self.norm_attn = nn.LayerNorm(channels)
        self.attn = MultiHeadAttention(channels, num_heads)
        self.norm_ffn = nn.LayerNorm(channels)
        self.ffn = FeedForward(channels, ffn_mult)

    def forward(self, tokens):
        # Both sub-layers are residual around a layer norm
        tokens = tokens + self.attn(self.norm_attn(tokens))

        return tokens + self.ffn(self.norm_ffn(tokens))


class CrossAttentionLayer(nn.Module):
    """
    Pre-norm MCA to the projected guidance rows followed by pre-norm FFN

    Guidance rows carry no positional encoding.
    """

    def __init__(self, channels, num_heads, alphabet_size, ffn_mult):
        super().__init__()
        self.guidance_proj = nn.Linear(alphabet_size, channels)
        self.norm_attn = nn.LayerNorm(channels)
        self.attn = MultiHeadAttention(channels, num_heads)
        self.norm_ffn = nn.LayerNorm(channels)
        self.ffn = FeedForward(channels, ffn_mult)

    def forward(self, tokens, c_rg):
        # Guidance rows become keys and values at the token width
        guidance = self.guidance_proj(c_rg.to(tokens.dtype))
        tokens = tokens + self.attn(self.norm_attn(tokens), context=guidance)

        return tokens + self.ffn(self.norm_ffn(tokens))


class RGRB(nn.Module):
    """
    Recognition-guided residual block: Res -> MSA/FFN -> (guided) MCA/FFN
    """

    def __init__(self, in_channels, out_channels, cfg, guided):
        super().__init__()
        self.res = ResBlock(in_channels, out_channels, cfg.time_dim)
        self.msa = SelfAttentionLayer(out_channels, cfg.num_heads, cfg.ffn_mult)

        if guided:
            self.mca = CrossAttentionLayer(out_channels, cfg.num_heads, cfg.alphabet_size, cfg.ffn_mult)
        else:
            self.mca = None

    @property
    def guided(self):
        return self.mca is not None

    def forward(self, x, t_emb, c_rg=None):
        h = self.res(x, t_emb)

        height, width = h.shape[-2:]

        # Spatial positions become attention tokens
        tokens = rearrange(h, "b c h w -> b (h w) c")
        tokens = self.msa(tokens)

        # Cross attention to the guidance only in guided blocks
        if self.mca is not None:
            if c_rg is None:
                raise ValueError("guided block needs the recognition guidance c_rg")

            tokens = self.mca(tokens, c_rg)

        return rearrange(tokens, "b (h w) c -> b c h w", h=height, w=width)


class Downsample(nn.Module):
    """
    Stride-2 3x3 convolution
    """

    def __init__(self, channels):
        super().__init__()
        self.conv = nn.Conv2d(channels, channels, kernel_size=3, stride=2, padding=1)

    def forward(self, x):
        return self.conv(x)


class Upsample(nn.Module):
    """
    Nearest-neighbour resize followed by a 3x3 convolution
    The target size is the mirrored skip feature size (2x for even dims)
    """

    def __init__(self, channels):
        super().__init__()
        self.conv = nn.Conv2d(channels, channels, kernel_size=3, padding=1)

    def forward(self, x, size=None):
        if size is None:
            size = (x.shape[-2] * 2, x.shape[-1] * 2)

        return self.conv(F.interpolate(x, size=tuple(size), mode="nearest"))


class GuidedBlock(nn.Module):
    """
    Encoder block: RGRB, RGRB, Downsample
    Decoder block: Upsample, concatenate skip, RGRB, RGRB

    The encoder skip is the feature before its Downsample, so the decoder
    upsamples first to reach the skip resolution.
    """

    def __init__(self, direction, in_channels, out_channels, cfg, guided, skip_channels=None):
        super().__init__()
        self.direction = direction

        if direction == "encoder":
            self.rgrb0 = RGRB(in_channels, out_channels, cfg, guided)
            self.resample = Downsample(out_channels)
        else:
            skip_channels = in_channels if skip_channels is None else skip_channels
            self.resample = Upsample(in_channels)
            self.rgrb0 = RGRB(in_channels + skip_channels, out_channels, cfg, guided)

        self.rgrb1 = RGRB(out_channels, out_channels, cfg, guided)

    def forward(self, x, t_emb, c_rg=None, skip=None, return_skip=False):
        if self.direction == "encoder":
            h = self.rgrb0(x, t_emb, c_rg)
            h = self.rgrb1(h, t_emb, c_rg)

            if return_skip:
                return h, self.resample(h)

            return self.resample(h)

        if skip is None:
            raise ValueError("decoder block needs the mirrored encoder feature")

        # Bring x to the skip resolution before joining channels
        h = torch.cat([self.resample(x, skip.shape[-2:]), skip], dim=1)
        h = self.rgrb0(h, t_emb, c_rg)

        return self.rgrb1(h, t_emb, c_rg)


class MiddleBlock(nn.Module):
    """
    Res -> MSA -> Res, never guided
    """

    def __init__(self, channels, cfg):
        super().__init__()
        self.res0 = ResBlock(channels, channels, cfg.time_dim)
        self.msa = SelfAttentionLayer(channels, cfg.num_heads, cfg.ffn_mult)
        self.res1 = ResBlock(channels, channels, cfg.time_dim)

    def forward(self, x, t_emb):
        h = self.res0(x, t_emb)
        height, width = h.shape[-2:]

        # Global self attention at the coarsest resolution
        tokens = self.msa(rearrange(h, "b c h w -> b (h w) c"))
        h = rearrange(tokens, "b (h w) c -> b c h w", h=height, w=width)

        return self.res1(h, t_emb)


class GuidedUNet(nn.Module):
    """
    Noise predictor eps_theta(z_t, x_LR, c_RG, t)
    """

    def __init__(self, cfg):
        super().__init__()
        self.cfg = cfg.validate()

        widths = cfg.widths
        entry_widths = cfg.entry_widths

        self.time_embed = TimestepEmbedding(cfg.base_channels, cfg.time_dim)
        self.input_conv = nn.Conv2d(
            cfg.latent_channels + cfg.lr_channels, cfg.base_channels, kernel_size=3, padding=1
        )

        self.encoders = nn.ModuleList(
            GuidedBlock("encoder", entry_widths[i], widths[i], cfg, cfg.is_guided(i + 1))
            for i in range(4)
        )

        self.middle = MiddleBlock(widths[-1], cfg)

        # Decoder j mirrors encoder 5 - j: it takes that encoder's width in and hands its entry width on
        self.decoders = nn.ModuleList(
            GuidedBlock("decoder", widths[4 - j], entry_widths[4 - j], cfg, cfg.is_guided(j, "decoder"))
            for j in range(1, 5)
        )

        self.output = nn.Sequential(
            group_norm(cfg.base_channels),
            nn.SiLU(),
            nn.Conv2d(cfg.base_channels, cfg.latent_channels, kernel_size=3, padding=1),
        )

    def embed_time(self, t, batch, device):
        if not torch.is_tensor(t):
            t = torch.full((batch,), int(t), dtype=torch.long, device=device)

        return self.time_embed(t.to(device))

    def block_forward(self, f_prev, t_emb, c_rg, block_id, direction, skip=None):
        """
        Runs encoder or decoder block `block_id` (1..4) on its own
        Decoder blocks need the pre-downsample feature of encoder 5 - block_id as `skip`
        """

        if block_id not in (1, 2, 3, 4):
            raise ValueError(f"block_id must lie in 1..4, got {block_id}")

        if direction == "encoder":
            return self.encoders[block_id - 1](f_prev, t_emb, c_rg)

        if direction == "decoder":
            return self.decoders[block_id - 1](f_prev, t_emb, c_rg, skip=skip)

        raise ValueError(f"direction must be encoder or decoder, got {direction!r}")

    def forward(self, z_t, x_lr, c_rg, t):
        """
        Predicts the noise in z_t

        Parameters:
        z_t - noisy latent (B, C_z, H, W)
        x_lr - LR image (B, C, H, W), same spatial dims as z_t
        c_rg - guidance (B, L, |A|); may be None when no block is guided
        t - timestep int or LongTensor (B,)

        Returns tensor shaped like z_t
        """

        if z_t.shape[0] != x_lr.shape[0] or z_t.shape[-2:] != x_lr.shape[-2:]:
            raise ValueError(
                f"z_t {tuple(z_t.shape)} and x_lr {tuple(x_lr.shape)} must share batch and spatial dims"
            )

        # Timestep embedding and f_0 = conv(z_t ++ x_lr)
        t_emb = self.embed_time(t, z_t.shape[0], z_t.device)
        h = self.input_conv(torch.cat([z_t, x_lr.to(z_t.dtype)], dim=1))

        # Encoder path keeps each block's pre-downsample feature
        skips = []

        for block in self.encoders:
            skip, h = block(h, t_emb, c_rg, return_skip=True)
            skips.append(skip)

        h = self.middle(h, t_emb)

        # Decoder path consumes the skips deepest first
        for block, skip in zip(self.decoders, reversed(skips)):
            h = block(h, t_emb, c_rg, skip=skip)

        return self.output(h)


def parameter_count(cfg):
    """
    Exact number of trainable scalars of the network built from cfg
    Built on the meta device, so no memory is allocated for weights
    """

    with torch.device("meta"):
        net = GuidedUNet(cfg)

    return sum(parameter.numel() for parameter in net.parameters() if parameter.requires_grad)
