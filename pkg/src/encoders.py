# %%
# Imports #

import math
from dataclasses import asdict, dataclass

import torch
import torch.nn.functional as F
from readable_utils.display_tools import pprint_df, print_logger  # noqa F401
from torch import nn

from config import CUE_DIM, HOP
from errors import InvalidArgumentError


# %%
# Vars #

REFERENCE_RMS = 0.1
SPEAKER_LOG_FLOOR = 1e-6
STATS_EPS = 1e-5


# %%
# Config #


@dataclass(frozen=True)
class EncoderConfig:
    channels: int = 64
    hop: int = HOP
    cue_dim: int = CUE_DIM
    speaker_fft: int = 512
    speaker_hop: int = 160
    speaker_hidden: int = 64

    def to_dict(self) -> dict:
        return asdict(self)


def latent_length(num_samples: int, hop: int) -> int:
    """Framing convention: L = ceil(T / hop)"""
    return int(math.ceil(num_samples / hop))


def _as_batch(wave: torch.Tensor) -> torch.Tensor:
    if wave.dim() == 1:
        wave = wave.unsqueeze(0)
    if wave.dim() != 2 or wave.shape[-1] < 1:
        raise InvalidArgumentError("expected a non-empty (B, T) waveform batch")
    return wave


# %%
# Modules #


class SpeechEncoder(nn.Module):
    """Strided 1-D conv front end, (B, T) -> (B, L, C)"""

    def __init__(self, channels: int, hop: int):
        super().__init__()
        self.hop = hop
        self.conv = nn.Conv1d(1, channels, kernel_size=2 * hop, stride=hop)

    def forward(self, wave: torch.Tensor) -> torch.Tensor:
        wave = _as_batch(wave)
        num_samples = wave.shape[-1]
        length = latent_length(num_samples, self.hop)
        left = self.hop // 2
        right = length * self.hop + self.hop - left - num_samples
        framed = F.pad(wave.unsqueeze(1), (left, right))
        return F.gelu(self.conv(framed)).transpose(1, 2)


class SpeechDecoder(nn.Module):
    """Transposed-conv overlap-add, inverse framing of SpeechEncoder"""

    def __init__(self, channels: int, hop: int):
        super().__init__()
        self.hop = hop
        self.deconv = nn.ConvTranspose1d(channels, 1, kernel_size=2 * hop, stride=hop)

    def forward(self, latent: torch.Tensor, target_len: int) -> torch.Tensor:
        out = self.deconv(latent.transpose(1, 2)).squeeze(1)
        out = out[:, self.hop // 2 :]
        if out.shape[-1] >= target_len:
            return out[:, :target_len]
        return F.pad(out, (0, target_len - out.shape[-1]))


class CueEncoder(nn.Module):
    """Per-frame cue features to latent rate by index repetition"""

    def __init__(self, cue_dim: int, channels: int):
        super().__init__()
        self.conv = nn.Conv1d(cue_dim, channels, kernel_size=3, padding=1)
        self.proj = nn.Conv1d(channels, channels, kernel_size=1)

    def forward(self, cues: torch.Tensor, target_len: int) -> torch.Tensor:
        if cues.dim() == 2:
            cues = cues.unsqueeze(0)
        if cues.shape[1] < 1:
            raise InvalidArgumentError("cue stream is empty")
        hidden = self.proj(F.gelu(self.conv(cues.transpose(1, 2))))
        num_frames = hidden.shape[-1]
        index = torch.div(
            torch.arange(target_len, device=hidden.device) * num_frames,
            target_len,
            rounding_mode="floor",
        ).clamp(max=num_frames - 1)
        return hidden[:, :, index].transpose(1, 2)


class SpeakerEncoder(nn.Module):
    """STFT log-power, dilated TDNN layers, mean+std pooling, unit-norm embedding"""

    def __init__(self, channels: int, n_fft: int = 512, hop: int = 160, hidden: int = 64):
        super().__init__()
        self.n_fft = n_fft
        self.hop = hop
        self.register_buffer("window", torch.hann_window(n_fft), persistent=False)
        bins = n_fft // 2 + 1
        self.frame_layers = nn.Sequential(
            nn.Conv1d(bins, hidden, kernel_size=3, padding=1),
            nn.GELU(),
            nn.Conv1d(hidden, hidden, kernel_size=3, dilation=2, padding=2),
            nn.GELU(),
        )
        self.embedding = nn.Linear(2 * hidden, channels)

    def forward(self, wave: torch.Tensor) -> torch.Tensor:
        wave = _as_batch(wave)
        if wave.shape[-1] < self.n_fft:
            raise InvalidArgumentError(
                f"speaker encoder needs at least {self.n_fft} samples, got {wave.shape[-1]}"
            )
        spec = torch.stft(
            wave,
            n_fft=self.n_fft,
            hop_length=self.hop,
            window=self.window,
            center=False,
            return_complex=True,
        )
        log_power = torch.log(spec.real**2 + spec.imag**2 + SPEAKER_LOG_FLOOR)
        hidden = self.frame_layers(log_power)
        mean = hidden.mean(dim=-1)
        std = torch.sqrt(hidden.var(dim=-1, unbiased=False) + STATS_EPS)
        embedding = self.embedding(torch.cat([mean, std], dim=-1))
        return F.normalize(embedding, dim=-1)


class Encoders(nn.Module):
    """Shared parameter set for all encoder call sites"""

    def __init__(self, config: EncoderConfig = EncoderConfig()):
        super().__init__()
        self.config = config
        self.speech = SpeechEncoder(config.channels, config.hop)
        self.cue = CueEncoder(config.cue_dim, config.channels)
        self.speaker = SpeakerEncoder(
            config.channels,
            n_fft=config.speaker_fft,
            hop=config.speaker_hop,
            hidden=config.speaker_hidden,
        )
        self.decoder = SpeechDecoder(config.channels, config.hop)

    def freeze_speaker(self):
        for param in self.speaker.parameters():
            param.requires_grad_(False)
        self.speaker.eval()
        print_logger("Speaker encoder frozen")

    @property
    def speaker_frozen(self) -> bool:
        return not any(p.requires_grad for p in self.speaker.parameters())


# %%
# Functions #


def normalize_reference(wave: torch.Tensor) -> torch.Tensor:
    """Rescale each reference waveform to REFERENCE_RMS"""
    wave = _as_batch(wave)
    rms = torch.sqrt(torch.mean(wave**2, dim=-1, keepdim=True))
    return wave * (REFERENCE_RMS / (rms + 1e-8))


def encode_speech(wave: torch.Tensor, params: Encoders) -> torch.Tensor:
    return params.speech(wave)


def encode_cues(cues: torch.Tensor, target_len: int, params: Encoders) -> torch.Tensor:
    return params.cue(cues, target_len)


def encode_speaker(wave: torch.Tensor, params: Encoders) -> torch.Tensor:
    return params.speaker(wave)


def decode_speech(latent: torch.Tensor, target_len: int, params: Encoders) -> torch.Tensor:
    return params.decoder(latent, target_len)


# %%
