"""Encoder-decoder assembly: init conv, five scan stages, frequency bottleneck.

The encoder halves the spatial extent and doubles the channel width after
each of its five stages, so a (3, 224, 224) input reaches the bottleneck at
(512, 7, 7) with the default base width of 16.  The decoder mirrors the
encoder, fusing each upsampled map with the matching encoder skip.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

from .blocks import FBGM, BlockConfig, SRSSB
from .exceptions import ConfigError

__all__ = [
    "NetworkConfig",
    "EncoderBlock",
    "DecoderBlock",
    "SkinMamba",
    "build_model",
    "parameter_count",
    "stage_shape_ledger",
]

SKIP_MODES = ("CONCAT", "ADD")


@dataclass
class NetworkConfig:
    """Declarative description of the full segmentation network."""

    base_channels: int = 16
    num_stages: int = 5
    num_classes: int = 1
    input_channels: int = 3
    input_size: tuple[int, int] = (224, 224)
    block: BlockConfig = field(default_factory=BlockConfig)
    skip_mode: str = "CONCAT"

    def validate(self) -> None:
        if self.num_stages != 5:
            raise ConfigError(f"num_stages is fixed at 5, got {self.num_stages}")
        if self.base_channels < 1:
            raise ConfigError(f"base_channels must be positive, got {self.base_channels}")
        if self.num_classes < 1:
            raise ConfigError(f"num_classes must be positive, got {self.num_classes}")
        if self.skip_mode not in SKIP_MODES:
            raise ConfigError(
                f"unknown skip_mode {self.skip_mode!r}; expected one of {SKIP_MODES}"
            )
        divisor = 2 ** self.num_stages
        h, w = self.input_size
        if h % divisor or w % divisor:
            raise ConfigError(
                f"input_size {self.input_size} must be divisible by {divisor}"
            )
        self.block.validate()

    def stage_channels(self, stage: int) -> int:
        """Channel width of encoder stage `stage` (1-indexed), pre-downsample."""
        return self.base_channels * 2 ** (stage - 1)


class EncoderBlock(nn.Module):
    """One encoder stage: optional SRSSB, then Conv3x3 -> BN -> ReLU.

    Returns (skip, out); both are the post-activation map.  Downsampling
    is applied by the network between stages, not here.
    """

    def __init__(self, cfg: BlockConfig):
        super().__init__()
        cfg.validate()
        self.channels = cfg.channels
        self.srssb = SRSSB(cfg) if cfg.use_srssb else None
        self.conv = nn.Conv2d(cfg.channels, cfg.channels, 3, padding=1)
        self.bn = nn.BatchNorm2d(cfg.channels)

    def forward(self, x: torch.Tensor):
        if x.shape[1] != self.channels:
            raise ValueError(
                f"EncoderBlock expects {self.channels} channels, got {x.shape[1]}"
            )
        if self.srssb is not None:
            x = self.srssb(x)
        y = F.relu(self.bn(self.conv(x)))
        return y, y


class DecoderBlock(nn.Module):
    """One decoder stage: fuse skip, Conv3x3 -> BN -> ReLU, optional SRSSB."""

    def __init__(self, cfg: BlockConfig, skip_mode: str = "CONCAT"):
        super().__init__()
        cfg.validate()
        if skip_mode not in SKIP_MODES:
            raise ConfigError(f"unknown skip_mode {skip_mode!r}")
        self.channels = cfg.channels
        self.skip_mode = skip_mode
        in_ch = 2 * cfg.channels if skip_mode == "CONCAT" else cfg.channels
        self.conv = nn.Conv2d(in_ch, cfg.channels, 3, padding=1)
        self.bn = nn.BatchNorm2d(cfg.channels)
        self.srssb = SRSSB(cfg) if cfg.use_srssb else None

    def forward(self, up: torch.Tensor, skip: torch.Tensor) -> torch.Tensor:
        if up.shape != skip.shape:
            raise ValueError(
                f"decoder fusion shape mismatch: upsampled {tuple(up.shape)} "
                f"vs skip {tuple(skip.shape)}"
            )
        if self.skip_mode == "CONCAT":
            fused = torch.cat([up, skip], dim=1)
        else:
            fused = up + skip
        y = F.relu(self.bn(self.conv(fused)))
        if self.srssb is not None:
            y = self.srssb(y)
        return y


class _Upsample2x(nn.Module):
    """Nearest-neighbor 2x upsampling followed by a channel-halving 1x1 conv."""

    def __init__(self, channels: int):
        super().__init__()
        self.proj = nn.Conv2d(channels, channels // 2, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.proj(F.interpolate(x, scale_factor=2, mode="nearest"))


class SkinMamba(nn.Module):
    """Five-stage encoder-decoder with a frequency-gated bottleneck."""

    def __init__(self, cfg: NetworkConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        c = cfg.base_channels
        self.init_conv = nn.Conv2d(cfg.input_channels, c, 3, padding=1)
        enc, down = {}, {}
        for i in range(1, cfg.num_stages + 1):
            ch = cfg.stage_channels(i)
            enc[f"stage{i}"] = EncoderBlock(cfg.block.with_channels(ch))
            down[f"stage{i}"] = nn.Conv2d(ch, 2 * ch, 2, stride=2)
        self.encoder_stages = nn.ModuleDict(enc)
        self.downsamples = nn.ModuleDict(down)
        bottleneck_ch = c * 2 ** cfg.num_stages
        self.bottleneck = FBGM(bottleneck_ch) if cfg.block.use_fbgm else nn.Identity()
        ups, dec = {}, {}
        for j in range(1, cfg.num_stages + 1):
            ch_in = c * 2 ** (cfg.num_stages + 1 - j)
            ups[f"stage{j}"] = _Upsample2x(ch_in)
            dec[f"stage{j}"] = DecoderBlock(
                cfg.block.with_channels(ch_in // 2), cfg.skip_mode
            )
        self.upsamples = nn.ModuleDict(ups)
        self.decoder_stages = nn.ModuleDict(dec)
        self.final_proj = nn.Conv2d(c, cfg.num_classes, 1)

    def forward(self, x: torch.Tensor, trace: list | None = None) -> torch.Tensor:
        """Run the full pipeline on (B, input_channels, H, W) with H, W 32-divisible.

        When `trace` is a list, (tag, shape) records and skip-pairing events
        are appended to it as the pass runs.
        """
        if x.dim() != 4 or x.shape[1] != self.cfg.input_channels:
            raise ValueError(
                f"expected (B, {self.cfg.input_channels}, H, W), got {tuple(x.shape)}"
            )
        divisor = 2 ** self.cfg.num_stages
        if x.shape[-2] % divisor or x.shape[-1] % divisor:
            raise ValueError(
                f"spatial size {tuple(x.shape[-2:])} must be divisible by {divisor}"
            )
        x = self.init_conv(x)
        skips: list[tuple[str, torch.Tensor]] = []
        for i in range(1, self.cfg.num_stages + 1):
            skip, x = self.encoder_stages[f"stage{i}"](x)
            skips.append((f"enc_stage{i}", skip))
            if trace is not None:
                trace.append((f"enc_stage{i}", tuple(skip.shape[1:])))
            x = self.downsamples[f"stage{i}"](x)
        x = self.bottleneck(x)
        if trace is not None:
            trace.append(("bottleneck", tuple(x.shape[1:])))
        for j in range(1, self.cfg.num_stages + 1):
            x = self.upsamples[f"stage{j}"](x)
            tag, skip = skips[self.cfg.num_stages - j]
            if trace is not None:
                trace.append((f"dec_stage{j}<-{tag}", tuple(x.shape[1:])))
            x = self.decoder_stages[f"stage{j}"](x, skip)
        return self.final_proj(x)


def build_model(cfg: NetworkConfig, seed: int = 42) -> SkinMamba:
    """Construct a model with deterministic, seed-controlled initialization."""
    cfg.validate()
    torch.manual_seed(seed)
    return SkinMamba(cfg)


def parameter_count(model: nn.Module) -> int:
    """Exact number of learnable scalars in the model."""
    return sum(p.numel() for p in model.parameters() if p.requires_grad)


def stage_shape_ledger(cfg: NetworkConfig) -> dict:
    """Expected (channels, H, W) of every stage output for a given config."""
    cfg.validate()
    h, w = cfg.input_size
    enc = [
        (cfg.stage_channels(i), h // 2 ** (i - 1), w // 2 ** (i - 1))
        for i in range(1, cfg.num_stages + 1)
    ]
    s = 2 ** cfg.num_stages
    bottleneck = (cfg.base_channels * s, h // s, w // s)
    dec = [
        (cfg.stage_channels(cfg.num_stages - j + 1), h // 2 ** (cfg.num_stages - j),
         w // 2 ** (cfg.num_stages - j))
        for j in range(1, cfg.num_stages + 1)
    ]
    return {"encoder": enc, "bottleneck": bottleneck, "decoder": dec}
