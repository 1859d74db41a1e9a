"""Hierarchical shifted-window attention encoder.

Token grids are kept channel-last, ``[B, H, W, C]``; the pyramid emitted by
:class:`SwinEncoder` is channel-first, ``[B, C, H, W]``, so it can be summed
with convolutional features.

Parameter names follow the reference Swin implementation
(``patch_embed.proj``, ``layers.{i}.blocks.{j}.attn.qkv``,
``layers.{i}.downsample.reduction`` ...), so pretrained checkpoints map over
with an identity key table for the shared entries.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, ValidationError


@dataclass
class SwinConfig:
    embed_dim: int = 96
    depths: tuple[int, ...] = (2, 2, 6, 2)
    heads: tuple[int, ...] = (3, 6, 12, 24)
    window_size: int = 7
    patch_size: int = 4
    mlp_ratio: float = 4.0
    in_channels: int = 3

    def __post_init__(self):
        self.depths = tuple(int(d) for d in self.depths)
        self.heads = tuple(int(h) for h in self.heads)

    def validate(self) -> "SwinConfig":
        if len(self.depths) != len(self.heads) or not self.depths:
            raise ConfigError(f"depths {self.depths} and heads {self.heads} must have equal, non-zero length")
        if self.patch_size < 1 or self.window_size < 1:
            raise ConfigError("patch_size and window_size must be >= 1")
        for i, h in enumerate(self.heads):
            dim = self.embed_dim * 2**i
            if h < 1 or dim % h:
                raise ConfigError(f"stage {i}: {dim} channels not divisible by {h} heads")
        return self

    def stage_dims(self) -> list[int]:
        return [self.embed_dim * 2**i for i in range(len(self.depths))]

    @classmethod
    def tiny(cls) -> "SwinConfig":
        """Swin-T hierarchy, the full-size default."""
        return cls()

    @classmethod
    def test(cls) -> "SwinConfig":
        return cls(embed_dim=8, depths=(1, 1, 2, 1), heads=(2, 2, 4, 8), window_size=4)


# --------------------------------------------------------------------------
# Window bookkeeping
# --------------------------------------------------------------------------


def window_partition(x: torch.Tensor, ws: int) -> tuple[torch.Tensor, tuple[int, int]]:
    """Split ``[B, H, W, C]`` into ``[B * nW, ws * ws, C]`` windows.

    Grids that do not divide evenly are zero-padded at the bottom/right; the
    padded size is returned so :func:`window_unpartition` can crop back.
    """
    B, H, W, C = x.shape
    pad_h, pad_w = (-H) % ws, (-W) % ws
    if pad_h or pad_w:
        x = F.pad(x, (0, 0, 0, pad_w, 0, pad_h))
    Hp, Wp = H + pad_h, W + pad_w
    x = x.view(B, Hp // ws, ws, Wp // ws, ws, C)
    windows = x.permute(0, 1, 3, 2, 4, 5).reshape(-1, ws * ws, C)
    return windows, (Hp, Wp)


def window_unpartition(windows: torch.Tensor, ws: int, H: int, W: int, padded: tuple[int, int] | None = None):
    """Inverse of :func:`window_partition`; crops any padding."""
    Hp, Wp = padded if padded is not None else (H, W)
    C = windows.shape[-1]
    x = windows.view(-1, Hp // ws, Wp // ws, ws, ws, C)
    x = x.permute(0, 1, 3, 2, 4, 5).reshape(-1, Hp, Wp, C)
    return x[:, :H, :W, :]


def relative_position_index(ws: int, table_window: int) -> torch.Tensor:
    """Index into a ``(2 * table_window - 1) ** 2`` bias table for an ``ws x ws`` window."""
    coords = torch.stack(torch.meshgrid(torch.arange(ws), torch.arange(ws), indexing="ij")).flatten(1)
    rel = coords[:, :, None] - coords[:, None, :]
    rel = rel + (table_window - 1)
    return rel[0] * (2 * table_window - 1) + rel[1]


def effective_window(H: int, W: int, window_size: int, shifted: bool) -> tuple[int, int]:
    """Window and shift actually used on an ``H x W`` grid.

    A grid no larger than one window is attended as a single window without
    shifting, as in the reference implementation.
    """
    if min(H, W) <= window_size:
        return min(H, W), 0
    return window_size, (window_size // 2 if shifted else 0)


def shifted_window_mask(Hp: int, Wp: int, ws: int, shift: int, valid: torch.Tensor | None = None) -> torch.Tensor | None:
    """Additive ``[nW, N, N]`` mask (0 / -inf) for the rolled, padded grid.

    ``valid`` is an ``[Hp, Wp]`` bool map (already rolled) marking real tokens;
    padded keys are masked for every query except themselves.
    """
    if shift == 0 and valid is None:
        return None
    region = torch.zeros(1, Hp, Wp, 1)
    if shift:
        cnt = 0
        for hs in (slice(0, -ws), slice(-ws, -shift), slice(-shift, None)):
            for wsl in (slice(0, -ws), slice(-ws, -shift), slice(-shift, None)):
                region[:, hs, wsl, :] = cnt
                cnt += 1
    region_w, _ = window_partition(region, ws)
    region_w = region_w.squeeze(-1)
    blocked = region_w[:, :, None] != region_w[:, None, :]
    if valid is not None:
        valid_w, _ = window_partition(valid.to(torch.float32)[None, :, :, None], ws)
        invalid_key = valid_w.squeeze(-1)[:, None, :] == 0
        eye = torch.eye(ws * ws, dtype=torch.bool)[None]
        blocked = blocked | (invalid_key & ~eye)
    mask = torch.zeros(blocked.shape)
    mask[blocked] = float("-inf")
    return mask


# --------------------------------------------------------------------------
# Modules
# --------------------------------------------------------------------------


class PatchEmbed(nn.Module):
    """Linear map of each flattened ``p x p x in_ch`` patch, then LayerNorm."""

    def __init__(self, patch_size: int, in_channels: int, embed_dim: int):
        super().__init__()
        self.patch_size = patch_size
        # a stride-p p x p convolution is exactly a shared linear map per patch
        self.proj = nn.Conv2d(in_channels, embed_dim, kernel_size=patch_size, stride=patch_size)
        self.norm = nn.LayerNorm(embed_dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        _, _, H, W = x.shape
        p = self.patch_size
        if H % p or W % p:
            raise ValidationError(f"input {H}x{W} is not divisible by patch size {p}")
        x = self.proj(x).permute(0, 2, 3, 1)
        return self.norm(x)


class WindowAttention(nn.Module):
    """Multi-head self-attention inside windows with a learned relative position bias."""

    def __init__(self, dim: int, num_heads: int, window_size: int):
        super().__init__()
        if dim % num_heads:
            raise ConfigError(f"{dim} channels not divisible by {num_heads} heads")
        self.dim = dim
        self.num_heads = num_heads
        self.window_size = window_size
        self.scale = (dim // num_heads) ** -0.5
        self.relative_position_bias_table = nn.Parameter(torch.zeros((2 * window_size - 1) ** 2, num_heads))
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)
        nn.init.trunc_normal_(self.relative_position_bias_table, std=0.02)
        self._index_cache: dict[int, torch.Tensor] = {}

    def position_bias(self, ws: int) -> torch.Tensor:
        """``[heads, N, N]`` bias for an ``ws x ws`` window (ws <= window_size)."""
        if ws > self.window_size:
            raise ValidationError(f"window {ws} exceeds bias table size {self.window_size}")
        idx = self._index_cache.get(ws)
        if idx is None:
            idx = relative_position_index(ws, self.window_size)
            self._index_cache[ws] = idx
        n = ws * ws
        bias = self.relative_position_bias_table[idx.reshape(-1)].view(n, n, self.num_heads)
        return bias.permute(2, 0, 1)

    def attention_weights(self, windows: torch.Tensor, ws: int, mask: torch.Tensor | None = None):
        """Softmax attention ``[B', heads, N, N]`` and the per-head values."""
        Bw, N, C = windows.shape
        qkv = self.qkv(windows).reshape(Bw, N, 3, self.num_heads, C // self.num_heads).permute(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        logits = (q * self.scale) @ k.transpose(-2, -1)
        logits = logits + self.position_bias(ws).unsqueeze(0)
        if mask is not None:
            nW = mask.shape[0]
            logits = logits.view(-1, nW, self.num_heads, N, N) + mask.to(logits.dtype)[None, :, None]
            logits = logits.view(-1, self.num_heads, N, N)
        return logits.softmax(dim=-1), v

    def forward(self, windows: torch.Tensor, ws: int | None = None, mask: torch.Tensor | None = None):
        Bw, N, C = windows.shape
        if ws is None:
            ws = int(round(N**0.5))
        attn, v = self.attention_weights(windows, ws, mask)
        out = (attn @ v).transpose(1, 2).reshape(Bw, N, C)
        return self.proj(out)


class Mlp(nn.Module):
    def __init__(self, dim: int, hidden: int):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden)
        self.act = nn.GELU()
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x):
        return self.fc2(self.act(self.fc1(x)))


class SwinBlock(nn.Module):
    """LN -> (S)W-MSA -> residual, then LN -> MLP -> residual."""

    def __init__(self, dim: int, num_heads: int, window_size: int, mlp_ratio: float, shifted: bool):
        super().__init__()
        self.shifted = shifted
        self.window_size = window_size
        self.norm1 = nn.LayerNorm(dim)
        self.attn = WindowAttention(dim, num_heads, window_size)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = Mlp(dim, int(dim * mlp_ratio))
        self._mask_cache: dict[tuple, torch.Tensor | None] = {}

    def _mask(self, H, W, Hp, Wp, ws, shift):
        key = (H, W, ws, shift)
        if key not in self._mask_cache:
            valid = None
            if (Hp, Wp) != (H, W):
                valid = torch.zeros(Hp, Wp, dtype=torch.bool)
                valid[:H, :W] = True
                if shift:
                    valid = torch.roll(valid, shifts=(-shift, -shift), dims=(0, 1))
            self._mask_cache[key] = shifted_window_mask(Hp, Wp, ws, shift, valid)
        return self._mask_cache[key]

    def attend(self, x: torch.Tensor) -> torch.Tensor:
        """The (shifted) windowed attention branch on an already-normalized grid."""
        B, H, W, C = x.shape
        ws, shift = effective_window(H, W, self.window_size, self.shifted)
        pad_h, pad_w = (-H) % ws, (-W) % ws
        if pad_h or pad_w:
            x = F.pad(x, (0, 0, 0, pad_w, 0, pad_h))
        Hp, Wp = H + pad_h, W + pad_w
        if shift:
            x = torch.roll(x, shifts=(-shift, -shift), dims=(1, 2))
        windows, _ = window_partition(x, ws)
        mask = self._mask(H, W, Hp, Wp, ws, shift)
        windows = self.attn(windows, ws, mask)
        x = window_unpartition(windows, ws, Hp, Wp)
        if shift:
            x = torch.roll(x, shifts=(shift, shift), dims=(1, 2))
        return x[:, :H, :W, :]

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = x + self.attend(self.norm1(x))
        return x + self.mlp(self.norm2(x))


class PatchMerging(nn.Module):
    """Concatenate each 2x2 neighbourhood (4C), LayerNorm, project to 2C.

    Odd grids are padded by replicating the last row/column first.
    """

    def __init__(self, dim: int):
        super().__init__()
        self.norm = nn.LayerNorm(4 * dim)
        self.reduction = nn.Linear(4 * dim, 2 * dim, bias=False)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        B, H, W, C = x.shape
        if H % 2 or W % 2:
            x = x.permute(0, 3, 1, 2)
            x = F.pad(x, (0, W % 2, 0, H % 2), mode="replicate")
            x = x.permute(0, 2, 3, 1)
        x0 = x[:, 0::2, 0::2, :]
        x1 = x[:, 1::2, 0::2, :]
        x2 = x[:, 0::2, 1::2, :]
        x3 = x[:, 1::2, 1::2, :]
        x = torch.cat([x0, x1, x2, x3], dim=-1)
        return self.reduction(self.norm(x))


class SwinStage(nn.Module):
    def __init__(self, dim, depth, num_heads, window_size, mlp_ratio, downsample: bool):
        super().__init__()
        self.blocks = nn.ModuleList(
            SwinBlock(dim, num_heads, window_size, mlp_ratio, shifted=(j % 2 == 1)) for j in range(depth)
        )
        self.downsample = PatchMerging(dim) if downsample else None


class SwinEncoder(nn.Module):
    """Patch embedding plus four attention stages; returns the 4-level pyramid."""

    def __init__(self, cfg: SwinConfig):
        super().__init__()
        self.cfg = cfg.validate()
        self.patch_embed = PatchEmbed(cfg.patch_size, cfg.in_channels, cfg.embed_dim)
        dims = cfg.stage_dims()
        n = len(cfg.depths)
        self.layers = nn.ModuleList(
            SwinStage(dims[i], cfg.depths[i], cfg.heads[i], cfg.window_size, cfg.mlp_ratio, downsample=i < n - 1)
            for i in range(n)
        )
        self.apply(_init_weights)

    def forward(self, x: torch.Tensor) -> list[torch.Tensor]:
        """``x``: ``[B, 1 or in_channels, H, W]``; returns ``[B, C_l, H_l, W_l]`` levels."""
        if x.shape[1] == 1 and self.cfg.in_channels != 1:
            x = x.expand(-1, self.cfg.in_channels, -1, -1)
        t = self.patch_embed(x)
        levels = []
        for stage in self.layers:
            for blk in stage.blocks:
                t = blk(t)
            levels.append(t.permute(0, 3, 1, 2))
            if stage.downsample is not None:
                t = stage.downsample(t)
        return levels


def _init_weights(m: nn.Module):
    if isinstance(m, nn.Linear):
        nn.init.trunc_normal_(m.weight, std=0.02)
        if m.bias is not None:
            nn.init.zeros_(m.bias)
    elif isinstance(m, nn.LayerNorm):
        nn.init.ones_(m.weight)
        nn.init.zeros_(m.bias)


# --------------------------------------------------------------------------
# Pretrained weights
# --------------------------------------------------------------------------


def default_key_map(encoder: SwinEncoder) -> dict[str, str]:
    """Identity map from reference checkpoint names to this encoder's parameters."""
    return {name: name for name in encoder.state_dict()}


def load_key_map(path) -> dict[str, str]:
    """Read a ``{"external.key": "internal.key"}`` JSON table."""
    data = json.loads(Path(path).read_text(encoding="utf-8"))
    if not isinstance(data, dict) or not all(isinstance(k, str) and isinstance(v, str) for k, v in data.items()):
        raise ValidationError(f"{path}: key map must be a JSON object of string -> string")
    return data


def import_pretrained(encoder: SwinEncoder, state: dict, key_map: dict[str, str] | None = None) -> list[str]:
    """Copy matching tensors from an external state dict into ``encoder``.

    Returns the internal names that were filled. Keys missing from ``state``
    keep their initialization; shape mismatches raise.
    """
    if "model" in state and isinstance(state["model"], dict):
        state = state["model"]
    key_map = key_map if key_map is not None else default_key_map(encoder)
    own = encoder.state_dict()
    filled = []
    with torch.no_grad():
        for ext, internal in key_map.items():
            if ext not in state:
                continue
            if internal not in own:
                raise ValidationError(f"key map target {internal!r} is not an encoder parameter")
            src = torch.as_tensor(state[ext])
            if tuple(src.shape) != tuple(own[internal].shape):
                raise ValidationError(
                    f"{ext} has shape {tuple(src.shape)}, {internal} expects {tuple(own[internal].shape)}"
                )
            own[internal].copy_(src.to(own[internal].dtype))
            filled.append(internal)
    return filled
