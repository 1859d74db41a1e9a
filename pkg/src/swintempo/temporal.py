"""Convolutional GRU carried across the slices of one volume."""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn

from .errors import ValidationError


@dataclass
class HiddenState:
    state: torch.Tensor  # [B, C_b, h_b, w_b]
    slice_index_last: int = -1

    def detach(self) -> "HiddenState":
        return HiddenState(self.state.detach(), self.slice_index_last)


class ConvGRUCell(nn.Module):
    """z = sig(W_z*[x;h]), r = sig(W_r*[x;h]), h~ = tanh(W_h*[x; r.h]), h' = (1-z).h + z.h~."""

    def __init__(self, in_channels: int, hidden_channels: int, kernel_size: int = 3):
        super().__init__()
        self.in_channels = in_channels
        self.hidden_channels = hidden_channels
        pad = kernel_size // 2
        cat = in_channels + hidden_channels
        self.conv_z = nn.Conv2d(cat, hidden_channels, kernel_size, padding=pad)
        self.conv_r = nn.Conv2d(cat, hidden_channels, kernel_size, padding=pad)
        self.conv_h = nn.Conv2d(cat, hidden_channels, kernel_size, padding=pad)

    def init_hidden(self, x_like: torch.Tensor) -> HiddenState:
        """Zero state matching a bottleneck tensor ``[B, C_in, h, w]``."""
        B, _, h, w = x_like.shape
        return HiddenState(x_like.new_zeros(B, self.hidden_channels, h, w), -1)

    def gates(self, x: torch.Tensor, h: torch.Tensor):
        xh = torch.cat([x, h], dim=1)
        z = torch.sigmoid(self.conv_z(xh))
        r = torch.sigmoid(self.conv_r(xh))
        cand = torch.tanh(self.conv_h(torch.cat([x, r * h], dim=1)))
        return z, r, cand

    def forward(self, x: torch.Tensor, hidden: HiddenState, slice_index: int | None = None) -> HiddenState:
        h = hidden.state
        if x.shape[0] != h.shape[0] or x.shape[-2:] != h.shape[-2:]:
            raise ValidationError(f"GRU input {tuple(x.shape)} incompatible with state {tuple(h.shape)}")
        if x.shape[1] != self.in_channels:
            raise ValidationError(f"GRU expects {self.in_channels} input channels, got {x.shape[1]}")
        if slice_index is None:
            slice_index = hidden.slice_index_last + 1
        elif slice_index <= hidden.slice_index_last:
            raise ValidationError(
                f"slice index {slice_index} does not follow {hidden.slice_index_last}; slices must ascend"
            )
        z, _, cand = self.gates(x, h)
        return HiddenState((1 - z) * h + z * cand, slice_index)
