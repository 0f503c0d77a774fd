"""Building blocks: gated scan mixer, multi-scale feed-forward, frequency gate.

All blocks operate on (B, C, H, W) feature maps and preserve shape.  The
residual wiring follows a pre-norm pattern: each sub-block normalizes its own
input, and composite blocks add the residuals between sub-blocks.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import torch
import torch.nn as nn
import torch.nn.functional as F

from .exceptions import ConfigError
from .scan_core import SS2D

__all__ = [
    "BlockConfig",
    "ChannelLayerNorm",
    "VSSB",
    "SMFFL",
    "SRSSB",
    "FFGML",
    "CSFFL",
    "FBGM",
    "ConvMixer",
    "SelfAttentionMixer",
    "MIXER_VARIANTS",
]

MIXER_VARIANTS = ("VSSB", "CONV3x3", "SELF_ATTENTION")


@dataclass
class BlockConfig:
    """Per-stage block settings shared across the network."""

    channels: int = 16
    ssm_state_dim: int = 16
    smffl_hidden_ratio: float = 0.5
    variant: str = "VSSB"
    use_srssb: bool = True
    use_fbgm: bool = True

    def validate(self) -> None:
        if self.channels < 1:
            raise ConfigError(f"channels must be positive, got {self.channels}")
        if self.ssm_state_dim < 1:
            raise ConfigError(
                f"ssm_state_dim must be positive, got {self.ssm_state_dim}"
            )
        if self.smffl_hidden_ratio <= 0:
            raise ConfigError(
                f"smffl_hidden_ratio must be positive, got {self.smffl_hidden_ratio}"
            )
        if self.variant not in MIXER_VARIANTS:
            raise ConfigError(
                f"unknown variant {self.variant!r}; expected one of {MIXER_VARIANTS}"
            )

    def with_channels(self, channels: int) -> "BlockConfig":
        return replace(self, channels=channels)


class ChannelLayerNorm(nn.Module):
    """LayerNorm over the channel axis of a (B, C, H, W) map."""

    def __init__(self, channels: int):
        super().__init__()
        self.norm = nn.LayerNorm(channels)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.norm(x.permute(0, 2, 3, 1)).permute(0, 3, 1, 2)


class VSSB(nn.Module):
    """Visual state-space block: gated four-directional selective scan.

    One shared projection feeds both streams; the scan stream goes through a
    depthwise 3x3 conv, SiLU, the planar scan and a LayerNorm, the gate
    stream through SiLU only.  Their product is projected back out.  No
    residual is added here; callers wire the skip.
    """

    def __init__(self, channels: int, state_dim: int = 16):
        super().__init__()
        self.norm = ChannelLayerNorm(channels)
        self.in_proj = nn.Conv2d(channels, channels, 1)
        self.dwconv = nn.Conv2d(channels, channels, 3, padding=1, groups=channels)
        self.ss2d = SS2D(channels, state_dim)
        self.out_proj = nn.Conv2d(channels, channels, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        shared = self.in_proj(self.norm(x))
        scanned = self.ss2d(F.silu(self.dwconv(shared)))
        scanned = scanned.permute(0, 2, 3, 1)
        scanned = self.ss2d.out_norm(scanned).permute(0, 3, 1, 2)
        gate = F.silu(shared)
        return self.out_proj(scanned * gate)


class SMFFL(nn.Module):
    """Scale-mixed feed-forward layer with an internal residual.

    Two pointwise-projected branches at a reduced hidden width run 3x3 and
    5x5 convs, are concatenated, passed through GELU, projected back to the
    input width and added to the input.
    """

    def __init__(self, channels: int, hidden_ratio: float = 0.5):
        super().__init__()
        hidden = int(channels * hidden_ratio)
        if hidden < 1:
            raise ConfigError(
                f"SMFFL hidden width {hidden} < 1 "
                f"(channels={channels}, ratio={hidden_ratio})"
            )
        self.hidden_channels = hidden
        self.norm = ChannelLayerNorm(channels)
        self.proj3 = nn.Conv2d(channels, hidden, 1)
        self.conv3 = nn.Conv2d(hidden, hidden, 3, padding=1)
        self.proj5 = nn.Conv2d(channels, hidden, 1)
        self.conv5 = nn.Conv2d(hidden, hidden, 5, padding=2)
        self.out_proj = nn.Conv2d(2 * hidden, channels, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        m = self.norm(x)
        b3 = self.conv3(self.proj3(m))
        b5 = self.conv5(self.proj5(m))
        mixed = F.gelu(torch.cat([b3, b5], dim=1))
        return self.out_proj(mixed) + x


class ConvMixer(nn.Module):
    """Plain 3x3 convolution stand-in for the scan mixer (ablation)."""

    def __init__(self, channels: int):
        super().__init__()
        self.norm = ChannelLayerNorm(channels)
        self.conv = nn.Conv2d(channels, channels, 3, padding=1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.conv(self.norm(x))


class SelfAttentionMixer(nn.Module):
    """Single-head global self-attention stand-in for the scan mixer.

    Flattens the map to (B, 1, HW, C) tokens and applies scaled
    dot-product attention with head size equal to the channel width.
    """

    def __init__(self, channels: int):
        super().__init__()
        self.channels = channels
        self.norm = ChannelLayerNorm(channels)
        self.qkv = nn.Conv2d(channels, 3 * channels, 1)
        self.out_proj = nn.Conv2d(channels, channels, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, c, h, w = x.shape
        q, k, v = self.qkv(self.norm(x)).chunk(3, dim=1)
        # (B, C, H, W) -> (B, 1, HW, C): one head over flattened tokens
        q = q.flatten(2).transpose(1, 2).unsqueeze(1)
        k = k.flatten(2).transpose(1, 2).unsqueeze(1)
        v = v.flatten(2).transpose(1, 2).unsqueeze(1)
        out = F.scaled_dot_product_attention(q, k, v)
        out = out.squeeze(1).transpose(1, 2).view(b, c, h, w)
        return self.out_proj(out)


def _make_mixer(cfg: BlockConfig) -> nn.Module:
    if cfg.variant == "VSSB":
        return VSSB(cfg.channels, cfg.ssm_state_dim)
    if cfg.variant == "CONV3x3":
        return ConvMixer(cfg.channels)
    if cfg.variant == "SELF_ATTENTION":
        return SelfAttentionMixer(cfg.channels)
    raise ConfigError(f"unknown variant {cfg.variant!r}")


class SRSSB(nn.Module):
    """Spatial-residual state-space block: mixer + scale-mixed feed-forward.

    out = SMFFL(x + mixer(x)); SMFFL carries its own residual, so the block
    reduces to the identity when both sub-block output projections are zero.
    """

    def __init__(self, cfg: BlockConfig):
        super().__init__()
        cfg.validate()
        self.mixer = _make_mixer(cfg)
        self.smffl = SMFFL(cfg.channels, cfg.smffl_hidden_ratio)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.smffl(x + self.mixer(x))


class FFGML(nn.Module):
    """Fourier gate: modulates the input by a sigmoid mask derived in frequency space.

    The 2-D FFT of the input is processed as stacked real/imaginary channels
    by two pointwise convs with a ReLU between, transformed back, and the
    real part squashed to (0, 1) to gate the input multiplicatively.
    """

    def __init__(self, channels: int):
        super().__init__()
        self.pw1 = nn.Conv2d(2 * channels, 2 * channels, 1)
        self.pw2 = nn.Conv2d(2 * channels, 2 * channels, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-2] == 0 or x.shape[-1] == 0:
            raise ValueError("FFGML: empty spatial extent")
        freq = torch.fft.fft2(x)
        z = torch.cat([freq.real, freq.imag], dim=1)
        z = self.pw2(F.relu(self.pw1(z)))
        re, im = z.chunk(2, dim=1)
        back = torch.fft.ifft2(torch.complex(re, im))
        gate = torch.sigmoid(back.real)
        return gate * x


class CSFFL(nn.Module):
    """Channel-widening feed-forward: 3x3 expansion, GELU, pointwise projection."""

    def __init__(self, channels: int, expansion: int = 2):
        super().__init__()
        self.expanded_channels = channels * expansion
        self.expand = nn.Conv2d(channels, self.expanded_channels, 3, padding=1)
        self.project = nn.Conv2d(self.expanded_channels, channels, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.project(F.gelu(self.expand(x)))


class FBGM(nn.Module):
    """Frequency-gated bottleneck: Fourier gate then channel feed-forward.

    Both sub-blocks are pre-normed and residually added:
    k' = k + FFGML(LN(k)); out = k' + CSFFL(LN(k')).
    """

    def __init__(self, channels: int, expansion: int = 2):
        super().__init__()
        self.norm1 = ChannelLayerNorm(channels)
        self.ffgml = FFGML(channels)
        self.norm2 = ChannelLayerNorm(channels)
        self.csffl = CSFFL(channels, expansion)

    def forward(self, k: torch.Tensor) -> torch.Tensor:
        k = k + self.ffgml(self.norm1(k))
        return k + self.csffl(self.norm2(k))
