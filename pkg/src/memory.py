# %%
# Imports #

import math
from dataclasses import dataclass
from enum import Enum
from typing import List, Optional

import torch
from torch import nn

from errors import EmptyBankError, InvalidArgumentError


TIE_TOLERANCE = 1e-12


# %%
# Axis Convention #

# The unbatched formulas are written for matrices: their "dim=0" is the
# second-to-last axis of a batched tensor and "dim=1" is the last axis.
# Speaker bank: A = softmax(Q K^T / sqrt(C)) over keys (last axis), slot weights
# are the mean of A over queries.
# Contextual bank: the first layer normalizes over mixture positions for every
# slot position; the second normalizes q[l, n] . k[l] over slots n per latent
# position, giving A (L, N). ABS slot scores are the mean of A over L.


# %%
# Types #


class UpdatePolicy(str, Enum):
    FIFO = "fifo"
    ABS = "abs"


@dataclass
class RetrievalResult:
    feature: torch.Tensor  # (B, L, C)
    slot_scores: torch.Tensor  # (B, N)
    weights: torch.Tensor  # speaker: (B, N, N), contextual: (B, L, N)


# %%
# Attention #


class SpeakerAttention(nn.Module):
    """Self-attention over the speaker slots"""

    def __init__(self, channels: int):
        super().__init__()
        self.channels = channels
        self.query = nn.Linear(channels, channels, bias=False)
        self.key = nn.Linear(channels, channels, bias=False)
        self.value = nn.Linear(channels, channels, bias=False)

    def forward(self, slots: torch.Tensor):
        """slots (B, N, C) -> speaker cue (B, C), slot weights (B, N), A (B, N, N)"""
        query = self.query(slots)
        key = self.key(slots)
        value = self.value(slots)
        logits = query @ key.transpose(-1, -2) / math.sqrt(self.channels)
        attention = torch.softmax(logits, dim=-1)
        weights = attention.mean(dim=-2)
        speaker = (weights.unsqueeze(-2) @ value).squeeze(-2)
        return speaker, weights, attention


class ContextualAttention(nn.Module):
    """Two cross-attention layers keyed by the mixture embedding"""

    def __init__(self, channels: int):
        super().__init__()
        self.channels = channels
        self.slot_query = nn.Linear(channels, channels, bias=False)
        self.slot_key = nn.Linear(channels, channels, bias=False)
        self.slot_value = nn.Linear(channels, channels, bias=False)
        self.global_query = nn.Linear(channels, channels, bias=False)
        self.global_key = nn.Linear(channels, channels, bias=False)
        self.global_value = nn.Linear(channels, channels, bias=False)

    def filter_slots(self, slots: torch.Tensor, mixture: torch.Tensor) -> torch.Tensor:
        """slots (B, N, L, C), mixture (B, L, C) -> filtered slots (B, N, L, C)"""
        key = self.slot_key(mixture).unsqueeze(1)
        query = self.slot_query(slots)
        value = self.slot_value(slots)
        logits = query @ key.transpose(-1, -2) / math.sqrt(self.channels)
        return torch.softmax(logits, dim=-1) @ value

    def forward(self, slots: torch.Tensor, mixture: torch.Tensor):
        """-> contextual feature (B, L, C), slot scores (B, N), A (B, L, N)"""
        filtered = self.filter_slots(slots, mixture)
        key = self.global_key(mixture)
        query = self.global_query(filtered)
        value = self.global_value(slots)
        logits = (query * key.unsqueeze(1)).sum(dim=-1) / math.sqrt(self.channels)
        weights = torch.softmax(logits, dim=1).transpose(1, 2)
        contextual = torch.einsum("bln,bnlc->blc", weights, value)
        return contextual, weights.mean(dim=1), weights


# %%
# Banks #


class MemoryBank:
    """Ordered, capacity-limited slot store; index 0 is the oldest slot"""

    item_dims = 2

    def __init__(self, capacity: int, policy=UpdatePolicy.FIFO):
        if capacity < 1:
            raise InvalidArgumentError(f"bank capacity must be >= 1, got {capacity}")
        self.capacity = int(capacity)
        self.policy = UpdatePolicy(policy)
        self.slots: List[torch.Tensor] = []
        self.last_scores: Optional[torch.Tensor] = None

    def __len__(self):
        return len(self.slots)

    @property
    def is_empty(self) -> bool:
        return not self.slots

    def _prepare(self, item: torch.Tensor) -> torch.Tensor:
        if item.dim() == self.item_dims - 1:
            item = item.unsqueeze(0)
        if item.dim() != self.item_dims:
            raise InvalidArgumentError(
                f"{type(self).__name__} expects {self.item_dims}-D items, got {tuple(item.shape)}"
            )
        if self.slots and item.shape != self.slots[0].shape:
            raise InvalidArgumentError(
                f"item shape {tuple(item.shape)} does not match slots {tuple(self.slots[0].shape)}"
            )
        return item

    def _eviction_index(self) -> int:
        if self.policy is UpdatePolicy.FIFO or self.last_scores is None:
            return 0
        scores = self.last_scores
        if scores.dim() > 1:
            scores = scores.mean(dim=0)
        lowest = scores.min()
        tied = torch.nonzero(scores <= lowest + TIE_TOLERANCE).flatten()
        return int(tied[0])

    def store(self, item: torch.Tensor) -> Optional[int]:
        """Append, or evict per policy when full. Returns the evicted index."""
        item = self._prepare(item)
        evicted = None
        if len(self.slots) >= self.capacity:
            evicted = self._eviction_index()
            del self.slots[evicted]
            if self.last_scores is not None:
                keep = [i for i in range(self.last_scores.shape[-1]) if i != evicted]
                self.last_scores = self.last_scores[..., keep]
        self.slots.append(item)
        if self.last_scores is not None:
            unscored = torch.full_like(self.last_scores[..., :1], float("inf"))
            self.last_scores = torch.cat([self.last_scores, unscored], dim=-1)
        return evicted

    def reset(self):
        self.slots.clear()
        self.last_scores = None

    def stacked(self) -> torch.Tensor:
        if self.is_empty:
            raise EmptyBankError(f"{type(self).__name__} is empty")
        return torch.stack(self.slots, dim=1)

    def snapshot(self) -> dict:
        return {
            "capacity": self.capacity,
            "policy": self.policy.value,
            "slots": [slot.detach().clone() for slot in self.slots],
            "last_scores": None if self.last_scores is None else self.last_scores.clone(),
        }

    def load_snapshot(self, snapshot: dict):
        self.capacity = int(snapshot["capacity"])
        self.policy = UpdatePolicy(snapshot["policy"])
        self.slots = [slot.clone() for slot in snapshot["slots"]]
        scores = snapshot["last_scores"]
        self.last_scores = None if scores is None else scores.clone()


class SpeakerBank(MemoryBank):
    """Slots are speaker embeddings, each (B, C)"""

    item_dims = 2

    def __init__(self, capacity: int, attention: SpeakerAttention, policy=UpdatePolicy.FIFO):
        super().__init__(capacity, policy)
        self.attention = attention

    def retrieve(self, length: int) -> RetrievalResult:
        """Speaker cue repeated to `length` latent steps"""
        slots = self.stacked()
        speaker, weights, attention = self.attention(slots)
        self.last_scores = weights.detach()
        feature = speaker.unsqueeze(1).expand(-1, length, -1)
        return RetrievalResult(feature=feature, slot_scores=weights, weights=attention)


class ContextualBank(MemoryBank):
    """Slots are latent speech sequences, each (B, L, C)"""

    item_dims = 3

    def __init__(
        self, capacity: int, attention: ContextualAttention, policy=UpdatePolicy.FIFO
    ):
        super().__init__(capacity, policy)
        self.attention = attention

    def retrieve(self, mixture: torch.Tensor) -> RetrievalResult:
        slots = self.stacked()
        if mixture.dim() == 2:
            mixture = mixture.unsqueeze(0)
        if mixture.shape[-2:] != slots.shape[-2:]:
            raise InvalidArgumentError(
                f"mixture {tuple(mixture.shape)} does not match slots {tuple(slots.shape)}"
            )
        contextual, scores, weights = self.attention(slots, mixture)
        self.last_scores = scores.detach()
        return RetrievalResult(feature=contextual, slot_scores=scores, weights=weights)


# %%
