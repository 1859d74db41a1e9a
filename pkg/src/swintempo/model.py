"""The full per-slice detector and its three ablation variants.

``baseline_unet``   convolutional encoder/decoder only
``swin_enhanced``   + attention pyramid fused into the encoder features
``swin_tempo``      + ConvGRU at the 1/32 bottleneck, state carried across slices
"""

from __future__ import annotations

import enum
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn as nn

from .candidates import ProbabilityMap
from .errors import ConfigError
from .swin import SwinConfig, SwinEncoder
from .temporal import ConvGRUCell, HiddenState
from .unet import Contract, Expand, Fuse, UNetConfig
from .volume_io import CTVolume


class Variant(str, enum.Enum):
    BASELINE_UNET = "baseline_unet"
    SWIN_ENHANCED = "swin_enhanced"
    SWIN_TEMPO = "swin_tempo"

    @property
    def uses_swin(self) -> bool:
        return self is not Variant.BASELINE_UNET

    @property
    def uses_temporal(self) -> bool:
        return self is Variant.SWIN_TEMPO


@dataclass
class ModelConfig:
    variant: Variant = Variant.SWIN_TEMPO
    input_size: int = 224
    swin: SwinConfig = field(default_factory=SwinConfig)
    unet: UNetConfig = field(default_factory=UNetConfig)
    # Reset the recurrent state every N slices; None = unbounded recurrence.
    reset_every: int | None = None

    def __post_init__(self):
        self.variant = Variant(self.variant)
        if isinstance(self.swin, dict):
            self.swin = SwinConfig(**self.swin)
        if isinstance(self.unet, dict):
            self.unet = UNetConfig(**self.unet)

    def validate(self) -> "ModelConfig":
        self.swin.validate()
        self.unet.validate()
        if self.input_size % 32:
            raise ConfigError(f"input_size {self.input_size} must be divisible by 32")
        if self.reset_every is not None and self.reset_every < 1:
            raise ConfigError("reset_every must be >= 1")
        return self

    def to_dict(self) -> dict:
        d = asdict(self)
        d["variant"] = self.variant.value
        d["swin"]["depths"] = list(self.swin.depths)
        d["swin"]["heads"] = list(self.swin.heads)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)

    @classmethod
    def full(cls, variant=Variant.SWIN_TEMPO) -> "ModelConfig":
        return cls(Variant(variant), 224, SwinConfig.tiny(), UNetConfig(base_channels=32))

    @classmethod
    def tiny(cls, variant=Variant.SWIN_TEMPO) -> "ModelConfig":
        return cls(Variant(variant), 64, SwinConfig.test(), UNetConfig(base_channels=4))

    @classmethod
    def preset(cls, name: str, variant=Variant.SWIN_TEMPO) -> "ModelConfig":
        try:
            return {"full": cls.full, "tiny": cls.tiny}[name](variant)
        except KeyError:
            raise ConfigError(f"unknown model preset {name!r} (expected 'full' or 'tiny')") from None


class SwinTempo(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg.validate()
        unet_ch = cfg.unet.channels()
        swin_ch = cfg.swin.stage_dims()
        self.contract = Contract(cfg.unet)
        self.swin = SwinEncoder(cfg.swin) if cfg.variant.uses_swin else None
        self.fuse = Fuse(unet_ch, swin_ch)
        self.gru = ConvGRUCell(swin_ch[-1], swin_ch[-1]) if cfg.variant.uses_temporal else None
        self.expand = Expand(unet_ch[:2] + swin_ch)

    @property
    def variant(self) -> Variant:
        return self.cfg.variant

    def encode(self, x: torch.Tensor) -> list[torch.Tensor]:
        """Fused six-level pyramid for a ``[B, 1, H, W]`` batch of slices."""
        unet_pyr = self.contract(x)
        swin_pyr = self.swin(x) if self.swin is not None else None
        return self.fuse(unet_pyr, swin_pyr)

    def init_hidden(self, x: torch.Tensor) -> HiddenState | None:
        """Zero state for slices shaped like ``x`` (``[B, 1, H, W]``)."""
        if self.gru is None:
            return None
        B, _, H, W = x.shape
        c = self.gru.hidden_channels
        return HiddenState(x.new_zeros(B, c, H // 32, W // 32), -1)

    def forward_slice(self, x: torch.Tensor, hidden: HiddenState | None = None, slice_index: int | None = None):
        """One slice: returns ``(logits [B, 1, H, W], new hidden state)``."""
        fused = self.encode(x)
        bottleneck = fused[-1]
        if self.gru is not None:
            if hidden is None:
                hidden = self.init_hidden(x)
            hidden = self.gru(bottleneck, hidden, slice_index)
            bottleneck = hidden.state
        return self.expand(fused, bottleneck), hidden

    def forward_sequence(self, x: torch.Tensor, hidden: HiddenState | None = None, start_index: int = 0):
        """Slices ``x [B, T, H, W]`` in order; returns ``(logits [B, T, H, W], hidden)``."""
        if self.gru is None:
            # no recurrence: slices are independent, run them as one batch
            B, T, H, W = x.shape
            logits, _ = self.forward_slice(x.reshape(B * T, 1, H, W))
            return logits.reshape(B, T, H, W), None
        outs = []
        for t in range(x.shape[1]):
            idx = start_index + t
            if self.cfg.reset_every and idx % self.cfg.reset_every == 0:
                hidden = None
            logits, hidden = self.forward_slice(x[:, t : t + 1], hidden, idx if self.gru is not None else None)
            outs.append(logits)
        return torch.cat(outs, dim=1), hidden

    def forward(self, x: torch.Tensor, hidden: HiddenState | None = None):
        return self.forward_sequence(x, hidden)

    @torch.no_grad()
    def predict_slices(self, slices: np.ndarray) -> np.ndarray:
        """Probability stack ``[Z, H, W]`` for preprocessed slices, ascending z."""
        was_training = self.training
        self.eval()
        dtype = next(self.parameters()).dtype
        x = torch.as_tensor(np.asarray(slices), dtype=dtype)[None]
        hidden = None
        probs = []
        for z in range(x.shape[1]):
            if self.cfg.reset_every and z % self.cfg.reset_every == 0:
                hidden = None
            logits, hidden = self.forward_slice(x[:, z : z + 1], hidden, z if self.gru is not None else None)
            probs.append(torch.sigmoid(logits)[0, 0])
        self.train(was_training)
        return torch.stack(probs).numpy()


def process_volume(vol: CTVolume, model: SwinTempo) -> list[ProbabilityMap]:
    """Run a preprocessed volume slice by slice; the hidden state starts at zero."""
    vol.validate()
    stack = model.predict_slices(vol.voxels)
    return [ProbabilityMap(stack[z], z, vol.series_id) for z in range(stack.shape[0])]


def parameter_groups(model: SwinTempo) -> dict[str, int]:
    """Parameter counts per top-level component (structural ablation checks)."""
    counts: dict[str, int] = {}
    for name, p in model.named_parameters():
        top = name.split(".", 1)[0]
        counts[top] = counts.get(top, 0) + p.numel()
    return counts
