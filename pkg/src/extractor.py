# %%
# Imports #

from dataclasses import asdict, dataclass
from typing import Optional, Tuple

import torch
import torch.nn.functional as F
from torch import nn

from errors import InvalidArgumentError


# %%
# Config #

# fixed concatenation order of the fused feature
COMPONENTS = ("mixture", "visual", "speaker", "contextual")


@dataclass(frozen=True)
class ExtractorConfig:
    channels: int = 64
    bottleneck: int = 64
    hidden: int = 128
    kernel_size: int = 3
    dilations: Tuple[int, ...] = (1, 2, 4, 8)
    backbone: str = "tcn"

    def to_dict(self) -> dict:
        values = asdict(self)
        values["dilations"] = list(self.dilations)
        return values


# %%
# Fusion #


class FeatureFusion(nn.Module):
    """Concatenate [Y, V, M^s, M^c]; absent parts become learned null embeddings"""

    def __init__(self, channels: int):
        super().__init__()
        self.channels = channels
        self.nulls = nn.ParameterDict(
            {name: nn.Parameter(0.02 * torch.randn(channels)) for name in COMPONENTS}
        )

    @property
    def width(self) -> int:
        return len(COMPONENTS) * self.channels

    def forward(
        self,
        mixture: torch.Tensor,
        visual: Optional[torch.Tensor],
        speaker: Optional[torch.Tensor] = None,
        contextual: Optional[torch.Tensor] = None,
    ) -> torch.Tensor:
        shape = mixture.shape
        if mixture.dim() != 3 or shape[-1] != self.channels:
            raise InvalidArgumentError(f"mixture latent must be (B, L, {self.channels})")

        parts = []
        for name, part in zip(COMPONENTS, (mixture, visual, speaker, contextual)):
            if part is None:
                part = self.nulls[name].expand(shape)
            elif part.shape != shape:
                raise InvalidArgumentError(
                    f"{name} feature {tuple(part.shape)} does not match mixture {tuple(shape)}"
                )
            parts.append(part)
        return torch.cat(parts, dim=-1)


# %%
# Backbone #


class TemporalBlock(nn.Module):
    def __init__(self, channels: int, hidden: int, kernel_size: int, dilation: int):
        super().__init__()
        padding = dilation * (kernel_size - 1) // 2
        self.expand = nn.Conv1d(channels, hidden, kernel_size=1)
        self.norm_in = nn.GroupNorm(1, hidden)
        self.depthwise = nn.Conv1d(
            hidden,
            hidden,
            kernel_size=kernel_size,
            dilation=dilation,
            padding=padding,
            groups=hidden,
        )
        self.norm_out = nn.GroupNorm(1, hidden)
        self.project = nn.Conv1d(hidden, channels, kernel_size=1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = self.norm_in(F.gelu(self.expand(x)))
        h = self.norm_out(F.gelu(self.depthwise(h)))
        return x + self.project(h)


class TemporalConvNet(nn.Module):
    """Stack of dilated residual blocks, (B, C, L) -> (B, C, L)"""

    def __init__(self, channels: int, hidden: int, kernel_size: int, dilations):
        super().__init__()
        self.blocks = nn.ModuleList(
            TemporalBlock(channels, hidden, kernel_size, d) for d in dilations
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        for block in self.blocks:
            x = block(x)
        return x


BACKBONES = {"tcn": TemporalConvNet}


# %%
# Extractor #


class SpeakerExtractor(nn.Module):
    """Fusion projection, backbone and sigmoid mask head"""

    def __init__(self, config: ExtractorConfig = ExtractorConfig()):
        super().__init__()
        if config.backbone not in BACKBONES:
            raise InvalidArgumentError(f"unknown backbone {config.backbone!r}")
        self.config = config
        self.fusion = FeatureFusion(config.channels)
        self.projection = nn.Linear(self.fusion.width, config.bottleneck)
        self.backbone = BACKBONES[config.backbone](
            config.bottleneck, config.hidden, config.kernel_size, config.dilations
        )
        self.mask_head = nn.Linear(config.bottleneck, config.channels)

    def mask(self, fused: torch.Tensor) -> torch.Tensor:
        hidden = self.projection(fused).transpose(1, 2)
        hidden = self.backbone(hidden).transpose(1, 2)
        return torch.sigmoid(self.mask_head(hidden))

    def forward(
        self,
        fused: torch.Tensor,
        mixture: torch.Tensor,
        mask_override: Optional[float] = None,
    ) -> torch.Tensor:
        """X_hat = mask(R) * Y; `mask_override` pins the mask for tests"""
        if fused.shape[:2] != mixture.shape[:2]:
            raise InvalidArgumentError("fused feature and mixture latent lengths differ")
        if mask_override is None:
            mask = self.mask(fused)
        else:
            mask = torch.full_like(mixture, float(mask_override))
        return mask * mixture


# %%
