# %%
# Imports #

from dataclasses import dataclass, field
from typing import Optional

import torch
import torch.nn.functional as F
from torch import nn

from encoders import (
    EncoderConfig,
    Encoders,
    decode_speech,
    encode_cues,
    encode_speaker,
    encode_speech,
    normalize_reference,
)
from errors import InvalidArgumentError
from extractor import ExtractorConfig, SpeakerExtractor
from memory import ContextualAttention, SpeakerAttention


CHECKPOINT_VERSION = 1
BANK_MODES = ("none", "speaker", "contextual", "both")


# %%
# Config #


@dataclass(frozen=True)
class ModelConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    extractor: ExtractorConfig = field(default_factory=ExtractorConfig)
    bank_mode: str = "contextual"

    def __post_init__(self):
        if self.bank_mode not in BANK_MODES:
            raise InvalidArgumentError(f"bank_mode must be one of {BANK_MODES}")
        if self.encoder.channels != self.extractor.channels:
            raise InvalidArgumentError("encoder and extractor channel widths differ")

    @property
    def uses_speaker(self) -> bool:
        return self.bank_mode in ("speaker", "both")

    @property
    def uses_contextual(self) -> bool:
        return self.bank_mode in ("contextual", "both")

    def to_dict(self) -> dict:
        return {
            "encoder": self.encoder.to_dict(),
            "extractor": self.extractor.to_dict(),
            "bank_mode": self.bank_mode,
        }

    @classmethod
    def from_dict(cls, values: dict) -> "ModelConfig":
        extractor = dict(values["extractor"])
        extractor["dilations"] = tuple(extractor["dilations"])
        return cls(
            encoder=EncoderConfig(**values["encoder"]),
            extractor=ExtractorConfig(**extractor),
            bank_mode=values["bank_mode"],
        )


@dataclass
class SeparationOutput:
    estimate: torch.Tensor  # (B, T)
    speaker_scores: Optional[torch.Tensor] = None
    contextual_scores: Optional[torch.Tensor] = None


# %%
# Model #


class MomentumExtractor(nn.Module):
    """Encoders, both bank attentions and the mask extractor on one parameter set"""

    def __init__(self, config: ModelConfig = ModelConfig()):
        super().__init__()
        self.config = config
        channels = config.encoder.channels
        self.encoders = Encoders(config.encoder)
        self.speaker_attention = SpeakerAttention(channels)
        self.contextual_attention = ContextualAttention(channels)
        self.extractor = SpeakerExtractor(config.extractor)

    @property
    def hop(self) -> int:
        return self.config.encoder.hop

    def encode_inputs(self, mixture: torch.Tensor, cues: torch.Tensor):
        """-> mixture latent Y (B, L, C), cue latent V (B, L, C)"""
        mixture_latent = encode_speech(mixture, self.encoders)
        visual_latent = encode_cues(cues, mixture_latent.shape[1], self.encoders)
        return mixture_latent, visual_latent

    def embed_speaker(self, reference: torch.Tensor) -> torch.Tensor:
        return encode_speaker(normalize_reference(reference), self.encoders)

    def embed_context(self, reference: torch.Tensor, num_samples: int) -> torch.Tensor:
        """Latent of the reference fitted to `num_samples` (left pad or keep the tail)"""
        reference = normalize_reference(reference)
        length = reference.shape[-1]
        if length < num_samples:
            reference = F.pad(reference, (num_samples - length, 0))
        else:
            reference = reference[:, length - num_samples :]
        return encode_speech(reference, self.encoders)

    def extract(
        self,
        mixture_latent: torch.Tensor,
        visual_latent: torch.Tensor,
        num_samples: int,
        speaker_feature: Optional[torch.Tensor] = None,
        contextual_feature: Optional[torch.Tensor] = None,
        mask_override: Optional[float] = None,
    ) -> torch.Tensor:
        fused = self.extractor.fusion(
            mixture_latent, visual_latent, speaker_feature, contextual_feature
        )
        estimate_latent = self.extractor(fused, mixture_latent, mask_override)
        return decode_speech(estimate_latent, num_samples, self.encoders)

    def separate(
        self,
        mixture: torch.Tensor,
        cues: torch.Tensor,
        speaker_slots: Optional[torch.Tensor] = None,
        contextual_slots: Optional[torch.Tensor] = None,
    ) -> SeparationOutput:
        """One extraction pass with optional stacked bank contents.

        speaker_slots (B, N, C), contextual_slots (B, N, L, C).
        """
        if mixture.dim() == 1:
            mixture = mixture.unsqueeze(0)
        num_samples = mixture.shape[-1]
        mixture_latent, visual_latent = self.encode_inputs(mixture, cues)
        length = mixture_latent.shape[1]

        speaker_feature = contextual_feature = None
        speaker_scores = contextual_scores = None
        if speaker_slots is not None:
            speaker, speaker_scores, _ = self.speaker_attention(speaker_slots)
            speaker_feature = speaker.unsqueeze(1).expand(-1, length, -1)
        if contextual_slots is not None:
            if contextual_slots.shape[2] != length:
                raise InvalidArgumentError("contextual slots and mixture latent lengths differ")
            contextual_feature, contextual_scores, _ = self.contextual_attention(
                contextual_slots, mixture_latent
            )

        estimate = self.extract(
            mixture_latent, visual_latent, num_samples, speaker_feature, contextual_feature
        )
        return SeparationOutput(estimate, speaker_scores, contextual_scores)

    def reference_slots(self, references, num_samples: int):
        """Stack per-reference embeddings into the slot tensors the config uses"""
        speaker_slots = contextual_slots = None
        if self.config.uses_speaker:
            speaker_slots = torch.stack([self.embed_speaker(r) for r in references], dim=1)
        if self.config.uses_contextual:
            contextual_slots = torch.stack(
                [self.embed_context(r, num_samples) for r in references], dim=1
            )
        return speaker_slots, contextual_slots

    def header(self, seeds=None) -> dict:
        return {
            "version": CHECKPOINT_VERSION,
            "channels": self.config.encoder.channels,
            "hop": self.hop,
            "seeds": dict(seeds or {}),
            "model": self.config.to_dict(),
        }

    @classmethod
    def from_header(cls, header: dict) -> "MomentumExtractor":
        if header.get("version") != CHECKPOINT_VERSION:
            raise InvalidArgumentError(f"unsupported checkpoint version {header.get('version')}")
        return cls(ModelConfig.from_dict(header["model"]))


# %%
