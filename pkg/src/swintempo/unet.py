"""Convolutional contracting path, encoder fusion, and the expanding path.

Scales are indexed by their downsampling exponent: level ``k`` of the
contracting path sits at ``1 / 2**k`` of the input, ``k = 0..5``. The
attention pyramid covers ``k = 2..5`` and is fused there by element-wise
sum after a 1x1 projection of the convolutional features.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn

from .errors import ConfigError, ValidationError

N_SCALES = 6
FUSED_SCALES = (2, 3, 4, 5)


@dataclass
class UNetConfig:
    base_channels: int = 32
    n_down: int = 5
    decoder_levels: int = 5

    def validate(self) -> "UNetConfig":
        if self.base_channels < 1:
            raise ConfigError("base_channels must be >= 1")
        if self.n_down != 5 or self.decoder_levels != 5:
            # 1/32 is five halvings; the decoder mirrors them one-to-one
            raise ConfigError("the fused pyramid requires n_down = decoder_levels = 5 (1/1 ... 1/32)")
        return self

    def channels(self) -> list[int]:
        return [self.base_channels * 2**k for k in range(self.n_down + 1)]


class ConvNormAct(nn.Sequential):
    """3x3 conv -> per-sample GroupNorm(1) -> ReLU."""

    def __init__(self, cin: int, cout: int):
        super().__init__(
            nn.Conv2d(cin, cout, 3, padding=1),
            nn.GroupNorm(1, cout),
            nn.ReLU(inplace=False),
        )


class DoubleConv(nn.Sequential):
    def __init__(self, cin: int, cout: int):
        super().__init__(ConvNormAct(cin, cout), ConvNormAct(cout, cout))


class Contract(nn.Module):
    """Six-level contracting path; returns ``[B, b * 2**k, H / 2**k, W / 2**k]`` for k = 0..5."""

    def __init__(self, cfg: UNetConfig, in_channels: int = 1):
        super().__init__()
        self.cfg = cfg.validate()
        ch = cfg.channels()
        self.pool = nn.MaxPool2d(2)
        self.down = nn.ModuleList([DoubleConv(in_channels, ch[0])] + [DoubleConv(ch[k - 1], ch[k]) for k in range(1, len(ch))])

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        H, W = x.shape[-2:]
        factor = 2**self.cfg.n_down
        if H % factor or W % factor:
            raise ValidationError(f"input {H}x{W} is not divisible by {factor}")
        feats = [self.down[0](x)]
        for conv in self.down[1:]:
            feats.append(conv(self.pool(feats[-1])))
        return feats


class Fuse(nn.Module):
    """Project convolutional features to the attention widths and add the two pyramids."""

    def __init__(self, unet_channels: list[int], swin_channels: list[int]):
        super().__init__()
        self.proj = nn.ModuleList(
            nn.Conv2d(unet_channels[k], c, kernel_size=1) for k, c in zip(FUSED_SCALES, swin_channels)
        )

    def forward(self, unet_pyramid: list[torch.Tensor], swin_pyramid: list[torch.Tensor] | None) -> list[torch.Tensor]:
        """Returns six levels: the two shallow convolutional skips, then four fused levels.

        ``swin_pyramid=None`` means the attention branch is absent, which is
        the same as summing with zeros.
        """
        out = list(unet_pyramid[: FUSED_SCALES[0]])
        for i, k in enumerate(FUSED_SCALES):
            projected = self.proj[i](unet_pyramid[k])
            if swin_pyramid is not None:
                s = swin_pyramid[i]
                if s.shape[-2:] != projected.shape[-2:]:
                    raise ValidationError(
                        f"scale 1/{2**k}: attention level {tuple(s.shape[-2:])} vs conv level {tuple(projected.shape[-2:])}"
                    )
                projected = projected + s
            out.append(projected)
        return out


class UpBlock(nn.Module):
    """2x transposed 3x3 conv, concatenate skip, two 3x3 convs."""

    def __init__(self, cin: int, cskip: int, cout: int):
        super().__init__()
        self.up = nn.ConvTranspose2d(cin, cout, kernel_size=3, stride=2, padding=1, output_padding=1)
        self.conv = DoubleConv(cout + cskip, cout)

    def forward(self, x, skip):
        x = self.up(x)
        if x.shape[-2:] != skip.shape[-2:]:
            raise ValidationError(f"decoder scale mismatch: {tuple(x.shape[-2:])} vs skip {tuple(skip.shape[-2:])}")
        return self.conv(torch.cat([x, skip], dim=1))


class Expand(nn.Module):
    """Five up-sampling stages from 1/32 back to full resolution, then a 1x1 logit head."""

    def __init__(self, skip_channels: list[int]):
        # skip_channels: channels of the six fused levels, k = 0..5
        super().__init__()
        self.ups = nn.ModuleList(
            UpBlock(skip_channels[k + 1], skip_channels[k], skip_channels[k])
            for k in range(4, -1, -1)
        )
        self.head = nn.Conv2d(skip_channels[0], 1, kernel_size=1)

    def forward(self, fused: list[torch.Tensor], bottleneck: torch.Tensor) -> torch.Tensor:
        if len(fused) != N_SCALES:
            raise ValidationError(f"expected {N_SCALES} fused levels, got {len(fused)}")
        if bottleneck.shape[-2:] != fused[-1].shape[-2:]:
            raise ValidationError("bottleneck is not at the 1/32 scale")
        x = bottleneck
        for up, k in zip(self.ups, range(4, -1, -1)):
            x = up(x, fused[k])
        return self.head(x)
