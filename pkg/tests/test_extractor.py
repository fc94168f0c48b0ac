# %%
# Imports #

import config_test_utils  # noqa F401
import pytest
import torch
from config_test_utils import FD_TOLERANCE, parameter_gradient_error, toy_model

from errors import InvalidArgumentError
from extractor import ExtractorConfig, FeatureFusion, SpeakerExtractor


@pytest.fixture(scope="module")
def fusion():
    torch.manual_seed(0)
    return FeatureFusion(64).double()


def _latent(length=5, channels=64, seed=0):
    generator = torch.Generator().manual_seed(seed)
    return torch.randn(1, length, channels, dtype=torch.float64, generator=generator)


# %%
# Tests: Fusion #


def test_fusion_width(fusion):
    fused = fusion(_latent(seed=1), _latent(seed=2), _latent(seed=3), _latent(seed=4))
    assert fused.shape == (1, 5, 256)


def test_visual_only_uses_null_embeddings(fusion):
    mixture, visual = _latent(seed=1), _latent(seed=2)
    fused = fusion(mixture, visual)
    assert torch.equal(fused[..., :64], mixture)
    assert torch.equal(fused[..., 64:128], visual)
    assert torch.equal(fused[0, 3, 128:192], fusion.nulls["speaker"])
    assert torch.equal(fused[0, 3, 192:], fusion.nulls["contextual"])


def test_fusion_is_order_sensitive(fusion):
    mixture, visual = _latent(seed=1), _latent(seed=2)
    assert not torch.equal(fusion(mixture, visual), fusion(visual, mixture))


def test_fusion_shape_mismatch(fusion):
    with pytest.raises(InvalidArgumentError):
        fusion(_latent(), _latent(length=6))
    with pytest.raises(InvalidArgumentError):
        fusion(_latent(channels=8), _latent(channels=8))


# %%
# Tests: Extractor #


@pytest.fixture(scope="module")
def extractor():
    torch.manual_seed(0)
    return SpeakerExtractor(ExtractorConfig(channels=8, bottleneck=8, hidden=12)).double()


def test_mask_override_identity_and_zero(extractor):
    mixture = _latent(channels=8, seed=5)
    fused = extractor.fusion(mixture, _latent(channels=8, seed=6))
    assert torch.equal(extractor(fused, mixture, mask_override=1.0), mixture)
    assert torch.equal(extractor(fused, mixture, mask_override=0.0), torch.zeros_like(mixture))


def test_mask_is_bounded(extractor):
    mixture = _latent(length=20, channels=8, seed=7)
    mask = extractor.mask(extractor.fusion(mixture, mixture))
    assert mask.shape == mixture.shape
    assert torch.all(mask > 0) and torch.all(mask < 1)


def test_unknown_backbone():
    with pytest.raises(InvalidArgumentError):
        SpeakerExtractor(ExtractorConfig(backbone="transformer"))


def test_backbone_gradient():
    model = toy_model()
    mixture = _latent(length=6, channels=4, seed=8)
    visual = _latent(length=6, channels=4, seed=9)
    block = model.extractor.backbone.blocks[0]

    def readout():
        fused = model.extractor.fusion(mixture, visual)
        return model.extractor(fused, mixture).pow(2).sum()

    assert parameter_gradient_error(readout, block.depthwise.weight) < FD_TOLERANCE
    assert parameter_gradient_error(readout, model.extractor.projection.weight) < FD_TOLERANCE


def test_window_outputs_do_not_depend_on_call_order():
    model = toy_model()
    first, second = _latent(length=6, channels=4, seed=10), _latent(length=6, channels=4, seed=11)
    visual = _latent(length=6, channels=4, seed=12)
    with torch.no_grad():
        a1 = model.extractor(model.extractor.fusion(first, visual), first)
        model.extractor(model.extractor.fusion(second, visual), second)
        a2 = model.extractor(model.extractor.fusion(first, visual), first)
    assert torch.equal(a1, a2)


# %%
# Main #

if __name__ == "__main__":
    test_unknown_backbone()


# %%
