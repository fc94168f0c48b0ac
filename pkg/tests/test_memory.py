# %%
# Imports #

import itertools
import math

import config_test_utils  # noqa F401
import numpy as np
import pytest
import torch
from config_test_utils import FD_TOLERANCE, gradient_error, parameter_gradient_error

from errors import EmptyBankError, InvalidArgumentError
from memory import (
    ContextualAttention,
    ContextualBank,
    MemoryBank,
    SpeakerAttention,
    SpeakerBank,
    UpdatePolicy,
)


def _weights(linear):
    return linear.weight.detach().numpy()


def _softmax(values):
    values = np.asarray(values, dtype=np.float64)
    exp = np.exp(values - values.max())
    return exp / exp.sum()


def _speaker_oracle(attention, slots):
    """Loop-by-loop evaluation for one (N, C) bank"""
    n, c = slots.shape
    q = slots @ _weights(attention.query).T
    k = slots @ _weights(attention.key).T
    v = slots @ _weights(attention.value).T
    a = np.zeros((n, n))
    for i in range(n):
        a[i] = _softmax([sum(q[i, d] * k[j, d] for d in range(c)) / math.sqrt(c) for j in range(n)])
    weights = a.mean(axis=0)
    speaker = sum(weights[j] * v[j] for j in range(n))
    return speaker, weights


def _contextual_oracle(attention, slots, mixture):
    """Loop-by-loop evaluation for one (N, L, C) bank against an (L, C) mixture"""
    n, length, c = slots.shape
    k1 = mixture @ _weights(attention.slot_key).T
    filtered = np.zeros_like(slots)
    for s in range(n):
        q1 = slots[s] @ _weights(attention.slot_query).T
        v1 = slots[s] @ _weights(attention.slot_value).T
        for l in range(length):
            row = _softmax([q1[l] @ k1[m] / math.sqrt(c) for m in range(length)])
            filtered[s, l] = sum(row[m] * v1[m] for m in range(length))

    k2 = mixture @ _weights(attention.global_key).T
    a = np.zeros((length, n))
    for l in range(length):
        logits = [
            (filtered[s, l] @ _weights(attention.global_query).T) @ k2[l] / math.sqrt(c)
            for s in range(n)
        ]
        a[l] = _softmax(logits)
    values = slots @ _weights(attention.global_value).T
    contextual = np.stack(
        [sum(a[l, s] * values[s, l] for s in range(n)) for l in range(length)]
    )
    return contextual, a.mean(axis=0)


def _set_identity(module):
    with torch.no_grad():
        for child in module.children():
            child.weight.copy_(torch.eye(child.weight.shape[0], dtype=child.weight.dtype))


# %%
# Tests: Attention #


def test_attention_weights_are_distributions():
    rng = np.random.default_rng(0)
    torch.manual_seed(0)
    modules = {c: (SpeakerAttention(c).double(), ContextualAttention(c).double()) for c in (2, 8, 64)}
    with torch.no_grad():
        for trial in range(1000):
            c = (2, 8, 64)[trial % 3]
            n = int(rng.integers(1, 6))
            length = int(rng.integers(1, 5))
            speaker_attention, contextual_attention = modules[c]

            _, weights, a = speaker_attention(torch.randn(1, n, c, dtype=torch.float64))
            assert torch.all(a >= 0) and torch.all(weights >= 0)
            assert torch.allclose(a.sum(dim=-1), torch.ones(1, n, dtype=torch.float64), atol=1e-6)
            assert weights.sum().item() == pytest.approx(1.0, abs=1e-6)

            slots = torch.randn(1, n, length, c, dtype=torch.float64)
            mixture = torch.randn(1, length, c, dtype=torch.float64)
            _, scores, a = contextual_attention(slots, mixture)
            assert torch.all(a >= 0)
            assert torch.allclose(a.sum(dim=-1), torch.ones(1, length, dtype=torch.float64), atol=1e-6)
            assert scores.sum().item() == pytest.approx(1.0, abs=1e-6)


@pytest.mark.parametrize("identity", [True, False])
@pytest.mark.parametrize("n,c", [(1, 2), (2, 3), (3, 4)])
def test_speaker_retrieval_matches_oracle(identity, n, c):
    torch.manual_seed(n * 10 + c)
    attention = SpeakerAttention(c).double()
    if identity:
        _set_identity(attention)
    slots = torch.randn(1, n, c, dtype=torch.float64)
    speaker, weights, _ = attention(slots)
    expected_speaker, expected_weights = _speaker_oracle(attention, slots[0].numpy())
    assert np.allclose(speaker[0].detach().numpy(), expected_speaker, atol=1e-9)
    assert np.allclose(weights[0].detach().numpy(), expected_weights, atol=1e-9)


@pytest.mark.parametrize("identity", [True, False])
@pytest.mark.parametrize("n,length,c", [(1, 1, 2), (2, 3, 3), (3, 4, 4)])
def test_contextual_retrieval_matches_oracle(identity, n, length, c):
    torch.manual_seed(n * 100 + length * 10 + c)
    attention = ContextualAttention(c).double()
    if identity:
        _set_identity(attention)
    slots = torch.randn(1, n, length, c, dtype=torch.float64)
    mixture = torch.randn(1, length, c, dtype=torch.float64)
    contextual, scores, _ = attention(slots, mixture)
    expected, expected_scores = _contextual_oracle(attention, slots[0].numpy(), mixture[0].numpy())
    assert np.allclose(contextual[0].detach().numpy(), expected, atol=1e-9)
    assert np.allclose(scores[0].detach().numpy(), expected_scores, atol=1e-9)


def test_retrieval_gradients():
    torch.manual_seed(5)
    speaker_attention = SpeakerAttention(3).double()
    contextual_attention = ContextualAttention(3).double()
    mixture = torch.randn(1, 2, 3, dtype=torch.float64)

    error = gradient_error(lambda s: speaker_attention(s)[0].pow(2).sum(), torch.randn(1, 2, 3, dtype=torch.float64))
    assert error < FD_TOLERANCE
    error = gradient_error(
        lambda s: contextual_attention(s, mixture)[0].pow(2).sum(),
        torch.randn(1, 2, 2, 3, dtype=torch.float64),
    )
    assert error < FD_TOLERANCE


@pytest.mark.parametrize("name", ["query", "key", "value"])
def test_speaker_projection_gradients(name):
    torch.manual_seed(6)
    attention = SpeakerAttention(4).double()
    slots = torch.randn(1, 3, 4, dtype=torch.float64)
    weight = getattr(attention, name).weight
    error = parameter_gradient_error(lambda: attention(slots)[0].pow(2).sum(), weight)
    assert error < FD_TOLERANCE


@pytest.mark.parametrize(
    "name",
    ["slot_query", "slot_key", "slot_value", "global_query", "global_key", "global_value"],
)
def test_contextual_projection_gradients(name):
    torch.manual_seed(7)
    attention = ContextualAttention(4).double()
    slots = torch.randn(1, 3, 4, 4, dtype=torch.float64)
    mixture = torch.randn(1, 4, 4, dtype=torch.float64)
    weight = getattr(attention, name).weight
    error = parameter_gradient_error(lambda: attention(slots, mixture)[0].pow(2).sum(), weight)
    assert error < FD_TOLERANCE


# %%
# Tests: Banks #


def _item(symbol, c=2):
    return torch.full((1, c), float(symbol), dtype=torch.float64)


@pytest.mark.parametrize("capacity", [1, 2, 3])
def test_fifo_sliding_window_law(capacity):
    for length in range(1, 9):
        for sequence in itertools.product((0, 1), repeat=length):
            bank = MemoryBank(capacity, UpdatePolicy.FIFO)
            for t, symbol in enumerate(sequence, start=1):
                bank.store(_item(symbol + 10 * t))
                expected = [symbol + 10 * (i + 1) for i, symbol in enumerate(sequence[:t])]
                held = [slot[0, 0].item() for slot in bank.slots]
                assert held == expected[-capacity:]


def test_fifo_long_sequences():
    rng = np.random.default_rng(1)
    for _ in range(50):
        sequence = rng.integers(0, 5, size=20)
        bank = MemoryBank(4, UpdatePolicy.FIFO)
        for t, symbol in enumerate(sequence):
            bank.store(_item(symbol * 100 + t))
        held = [slot[0, 0].item() for slot in bank.slots]
        assert held == [float(s * 100 + t) for t, s in enumerate(sequence)][-4:]


def test_abs_evicts_lowest_score():
    bank = MemoryBank(3, UpdatePolicy.ABS)
    for symbol in range(3):
        bank.store(_item(symbol))
    bank.last_scores = torch.tensor([[0.5, 0.2, 0.3]], dtype=torch.float64)
    assert bank.store(_item(9)) == 1
    assert [slot[0, 0].item() for slot in bank.slots] == [0.0, 2.0, 9.0]
    assert bank.last_scores[0, :2].tolist() == [0.5, 0.3]
    assert math.isinf(bank.last_scores[0, 2].item())


def test_abs_tie_breaks_to_oldest():
    bank = MemoryBank(3, UpdatePolicy.ABS)
    for symbol in range(3):
        bank.store(_item(symbol))
    bank.last_scores = torch.tensor([[0.3, 0.4, 0.3]], dtype=torch.float64)
    assert bank.store(_item(7)) == 0


def test_abs_without_scores_falls_back_to_oldest():
    bank = MemoryBank(2, UpdatePolicy.ABS)
    for symbol in range(3):
        bank.store(_item(symbol))
    assert [slot[0, 0].item() for slot in bank.slots] == [1.0, 2.0]


def test_capacity_must_be_positive():
    with pytest.raises(InvalidArgumentError):
        MemoryBank(0)


def test_empty_retrieval_raises():
    bank = SpeakerBank(2, SpeakerAttention(4).double())
    with pytest.raises(EmptyBankError):
        bank.retrieve(5)


def test_shape_mismatch_raises():
    bank = ContextualBank(2, ContextualAttention(4).double())
    bank.store(torch.randn(1, 3, 4, dtype=torch.float64))
    with pytest.raises(InvalidArgumentError):
        bank.store(torch.randn(1, 5, 4, dtype=torch.float64))
    with pytest.raises(InvalidArgumentError):
        bank.retrieve(torch.randn(1, 4, 4, dtype=torch.float64))


def test_retrieve_records_scores_and_reset():
    torch.manual_seed(0)
    bank = ContextualBank(2, ContextualAttention(4).double(), UpdatePolicy.ABS)
    for _ in range(2):
        bank.store(torch.randn(1, 3, 4, dtype=torch.float64))
    result = bank.retrieve(torch.randn(1, 3, 4, dtype=torch.float64))
    assert result.feature.shape == (1, 3, 4)
    assert torch.equal(bank.last_scores, result.slot_scores.detach())
    bank.reset()
    assert bank.is_empty and bank.last_scores is None


def test_speaker_bank_feature_is_repeated():
    torch.manual_seed(0)
    bank = SpeakerBank(2, SpeakerAttention(4).double())
    bank.store(torch.randn(1, 4, dtype=torch.float64))
    result = bank.retrieve(6)
    assert result.feature.shape == (1, 6, 4)
    assert torch.equal(result.feature[:, 0], result.feature[:, 5])


def test_snapshot_round_trip():
    bank = MemoryBank(2, UpdatePolicy.ABS)
    bank.store(_item(1))
    bank.last_scores = torch.tensor([[1.0]], dtype=torch.float64)
    snapshot = bank.snapshot()
    bank.store(_item(2))
    bank.store(_item(3))
    bank.load_snapshot(snapshot)
    assert len(bank) == 1 and bank.slots[0][0, 0].item() == 1.0
    assert bank.last_scores.tolist() == [[1.0]]


# %%
# Main #

if __name__ == "__main__":
    test_attention_weights_are_distributions()
    test_abs_evicts_lowest_score()


# %%
