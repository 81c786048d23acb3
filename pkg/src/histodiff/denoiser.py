"""Noise-prediction U-Net with semantic conditioning in the decoder.

The encoder sees only the noisy image; the semantic layout enters through
the decoder, where every residual block replaces plain group
normalization with a spatially-adaptive variant whose per-pixel scale and
shift are predicted from the conditioning tensor (resized to the block's
resolution with nearest-neighbor so one-hot structure survives). The
output head produces six channels: predicted noise plus the raw variance
coefficient, squashed to [0, 1] with a sigmoid.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .diffusion import DenoiserOutput
from .masks import N_COND_CHANNELS


@dataclass
class DenoiserConfig:
    image_size: int = 128
    in_channels: int = 3
    cond_channels: int = N_COND_CHANNELS
    base_width: int = 128
    channel_multipliers: tuple[int, ...] = (1, 1, 2, 2, 4)
    num_res_blocks: int = 2
    attention_resolutions: tuple[int, ...] = (32, 16, 8)
    time_embed_dim: int = 512
    cond_hidden: int = 128
    num_heads: int = 4
    num_groups: int = 32
    dropout: float = 0.0

    def __post_init__(self) -> None:
        self.channel_multipliers = tuple(self.channel_multipliers)
        self.attention_resolutions = tuple(self.attention_resolutions)
        levels = len(self.channel_multipliers)
        if self.image_size % (1 << (levels - 1)) != 0:
            raise ValueError(
                f"image_size {self.image_size} not divisible by 2^{levels - 1} "
                f"for {levels} resolution levels"
            )
        for mult in self.channel_multipliers:
            if (self.base_width * mult) % self.num_groups != 0:
                raise ValueError("num_groups must divide every level width")


def paper_config() -> DenoiserConfig:
    return DenoiserConfig()


def tiny_config(image_size: int = 32) -> DenoiserConfig:
    return DenoiserConfig(
        image_size=image_size,
        base_width=32,
        channel_multipliers=(1, 2),
        num_res_blocks=2,
        attention_resolutions=(),
        time_embed_dim=128,
        cond_hidden=32,
        num_groups=8,
    )


def timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    """Sinusoidal embedding of (possibly fractional) timesteps."""
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, device=t.device) / max(half - 1, 1))
    args = t.float()[:, None] * freqs[None, :]
    emb = torch.cat([torch.sin(args), torch.cos(args)], dim=-1)
    if dim % 2:
        emb = F.pad(emb, (0, 1))
    return emb


class SpadeGroupNorm(nn.Module):
    """Group norm whose affine parameters are per-pixel functions of the
    conditioning tensor."""

    def __init__(self, channels: int, cond_channels: int, hidden: int, num_groups: int):
        super().__init__()
        self.norm = nn.GroupNorm(num_groups, channels, affine=False)
        self.shared = nn.Sequential(nn.Conv2d(cond_channels, hidden, 3, padding=1), nn.SiLU())
        self.gamma = nn.Conv2d(hidden, channels, 3, padding=1)
        self.beta = nn.Conv2d(hidden, channels, 3, padding=1)

    def forward(self, x: torch.Tensor, cond: torch.Tensor) -> torch.Tensor:
        if cond.shape[-2:] != x.shape[-2:]:
            cond = F.interpolate(cond, size=x.shape[-2:], mode="nearest")
        actv = self.shared(cond)
        return self.norm(x) * (1.0 + self.gamma(actv)) + self.beta(actv)


class ResBlock(nn.Module):
    """Residual block with timestep injection; decoder blocks swap plain
    group norm for the spatially-adaptive version."""

    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        time_dim: int,
        cfg: DenoiserConfig,
        conditional: bool,
    ):
        super().__init__()
        self.conditional = conditional
        if conditional:
            self.norm1 = SpadeGroupNorm(in_channels, cfg.cond_channels, cfg.cond_hidden, cfg.num_groups)
            self.norm2 = SpadeGroupNorm(out_channels, cfg.cond_channels, cfg.cond_hidden, cfg.num_groups)
        else:
            self.norm1 = nn.GroupNorm(cfg.num_groups, in_channels)
            self.norm2 = nn.GroupNorm(cfg.num_groups, out_channels)
        self.conv1 = nn.Conv2d(in_channels, out_channels, 3, padding=1)
        self.conv2 = nn.Conv2d(out_channels, out_channels, 3, padding=1)
        self.time_proj = nn.Linear(time_dim, out_channels)
        self.dropout = nn.Dropout(cfg.dropout)
        self.skip = (
            nn.Conv2d(in_channels, out_channels, 1) if in_channels != out_channels else nn.Identity()
        )

    def forward(self, x: torch.Tensor, temb: torch.Tensor, cond: torch.Tensor | None) -> torch.Tensor:
        h = self.norm1(x, cond) if self.conditional else self.norm1(x)
        h = self.conv1(F.silu(h))
        h = h + self.time_proj(F.silu(temb))[:, :, None, None]
        h = self.norm2(h, cond) if self.conditional else self.norm2(h)
        h = self.conv2(self.dropout(F.silu(h)))
        return h + self.skip(x)


class AttentionBlock(nn.Module):
    def __init__(self, channels: int, num_heads: int, num_groups: int):
        super().__init__()
        if channels % num_heads != 0:
            raise ValueError(f"channels {channels} not divisible by heads {num_heads}")
        self.num_heads = num_heads
        self.norm = nn.GroupNorm(num_groups, channels)
        self.qkv = nn.Conv2d(channels, channels * 3, 1)
        self.proj = nn.Conv2d(channels, channels, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, c, h, w = x.shape
        qkv = self.qkv(self.norm(x)).reshape(b, 3, self.num_heads, c // self.num_heads, h * w)
        q, k, v = qkv.unbind(dim=1)
        attn = F.scaled_dot_product_attention(
            q.transpose(-1, -2), k.transpose(-1, -2), v.transpose(-1, -2)
        )
        out = attn.transpose(-1, -2).reshape(b, c, h, w)
        return x + self.proj(out)


class Downsample(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.conv = nn.Conv2d(channels, channels, 3, stride=2, padding=1)

    def forward(self, x):
        return self.conv(x)


class Upsample(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.conv = nn.Conv2d(channels, channels, 3, padding=1)

    def forward(self, x):
        return self.conv(F.interpolate(x, scale_factor=2, mode="nearest"))


class SemanticUNet(nn.Module):
    """U-shaped denoiser; see module docstring for the conditioning path."""

    def __init__(self, cfg: DenoiserConfig):
        super().__init__()
        self.cfg = cfg
        base = cfg.base_width
        self.time_mlp = nn.Sequential(
            nn.Linear(base, cfg.time_embed_dim), nn.SiLU(), nn.Linear(cfg.time_embed_dim, cfg.time_embed_dim)
        )
        self.conv_in = nn.Conv2d(cfg.in_channels, base, 3, padding=1)

        levels = len(cfg.channel_multipliers)
        widths = [base * m for m in cfg.channel_multipliers]
        self.enc_blocks = nn.ModuleList()
        self.enc_attn = nn.ModuleList()
        self.downs = nn.ModuleList()
        skip_widths = [base]
        ch = base
        res = cfg.image_size
        for level, width in enumerate(widths):
            for _ in range(cfg.num_res_blocks):
                self.enc_blocks.append(ResBlock(ch, width, cfg.time_embed_dim, cfg, conditional=False))
                self.enc_attn.append(
                    AttentionBlock(width, cfg.num_heads, cfg.num_groups)
                    if res in cfg.attention_resolutions
                    else nn.Identity()
                )
                ch = width
                skip_widths.append(ch)
            if level < levels - 1:
                self.downs.append(Downsample(ch))
                res //= 2
                skip_widths.append(ch)

        self.mid_block1 = ResBlock(ch, ch, cfg.time_embed_dim, cfg, conditional=False)
        self.mid_attn = (
            AttentionBlock(ch, cfg.num_heads, cfg.num_groups)
            if cfg.attention_resolutions
            else nn.Identity()
        )
        self.mid_block2 = ResBlock(ch, ch, cfg.time_embed_dim, cfg, conditional=False)

        self.dec_blocks = nn.ModuleList()
        self.dec_attn = nn.ModuleList()
        self.ups = nn.ModuleList()
        for level in reversed(range(levels)):
            width = widths[level]
            for _ in range(cfg.num_res_blocks + 1):
                self.dec_blocks.append(
                    ResBlock(ch + skip_widths.pop(), width, cfg.time_embed_dim, cfg, conditional=True)
                )
                self.dec_attn.append(
                    AttentionBlock(width, cfg.num_heads, cfg.num_groups)
                    if res in cfg.attention_resolutions
                    else nn.Identity()
                )
                ch = width
            if level > 0:
                self.ups.append(Upsample(ch))
                res *= 2

        self.out_norm = SpadeGroupNorm(ch, cfg.cond_channels, cfg.cond_hidden, cfg.num_groups)
        self.out_conv = nn.Conv2d(ch, 2 * cfg.in_channels, 3, padding=1)

    def forward(self, x: torch.Tensor, mask: torch.Tensor, t: torch.Tensor) -> DenoiserOutput:
        cfg = self.cfg
        if x.shape[-2:] != mask.shape[-2:]:
            raise ValueError(f"image {tuple(x.shape)} and mask {tuple(mask.shape)} spatial sizes differ")
        if mask.shape[1] != cfg.cond_channels:
            raise ValueError(f"mask must have {cfg.cond_channels} channels, got {mask.shape[1]}")
        depth = 1 << (len(cfg.channel_multipliers) - 1)
        if x.shape[-1] % depth or x.shape[-2] % depth:
            raise ValueError(f"spatial size {tuple(x.shape[-2:])} not divisible by {depth}")

        temb = self.time_mlp(timestep_embedding(t, cfg.base_width))
        h = self.conv_in(x)
        skips = [h]
        blocks = iter(zip(self.enc_blocks, self.enc_attn))
        downs = iter(self.downs)
        levels = len(cfg.channel_multipliers)
        for level in range(levels):
            for _ in range(cfg.num_res_blocks):
                block, attn = next(blocks)
                h = attn(block(h, temb, None))
                skips.append(h)
            if level < levels - 1:
                h = next(downs)(h)
                skips.append(h)

        h = self.mid_block2(self.mid_attn(self.mid_block1(h, temb, None)), temb, None)

        dec = iter(zip(self.dec_blocks, self.dec_attn))
        ups = iter(self.ups)
        for level in reversed(range(levels)):
            for _ in range(cfg.num_res_blocks + 1):
                block, attn = next(dec)
                h = attn(block(torch.cat([h, skips.pop()], dim=1), temb, mask))
            if level > 0:
                h = next(ups)(h)

        h = self.out_conv(F.silu(self.out_norm(h, mask)))
        return DenoiserOutput(eps_hat=h[:, : cfg.in_channels], v=torch.sigmoid(h[:, cfg.in_channels :]))
