# %%
# Imports #

import copy
import math

import config_test_utils  # noqa F401
import numpy as np
import pytest
import torch
from config_test_utils import FD_TOLERANCE, parameter_gradient_error, toy_cues, toy_model, toy_wave

from data_storage import RunStorage
from errors import InvalidArgumentError, TrainingDivergenceError
from signals import MixtureSpec
from training import (
    VP_INIT,
    CurriculumSchedule,
    PlateauTracker,
    Trainer,
    TrainConfig,
    build_training_memory,
    crop_collate,
    curriculum_blend,
    par_step,
    pretrain_speaker_encoder,
    si_snr,
    si_snr_loss,
    train,
)


def _tensor(values):
    return torch.tensor(np.asarray(values), dtype=torch.float64).unsqueeze(0)


def _batch(num_samples=64, seed=0):
    cues = toy_cues(num_samples, seed=seed).frames
    return {
        "mixture": _tensor(toy_wave(num_samples, seed=seed)),
        "target": _tensor(toy_wave(num_samples, seed=seed + 1)),
        "pre_enrolled": _tensor(toy_wave(num_samples, seed=seed + 2)),
        "cues": _tensor(cues),
    }


def _specs(count, seed=0):
    return [
        MixtureSpec(f"spk_{i % 2}", f"spk_{2 + i % 2}", snr_db=0.0, duration_s=0.05, seed=seed + i)
        for i in range(count)
    ]


def _toy_train_config(**kwargs):
    values = dict(batch_size=2, max_epochs=3, ep_cr=2, slots_range=(1, 2), seed=3)
    values.update(kwargs)
    return TrainConfig(**values)


# %%
# Tests: SI-SNR #


def test_si_snr_is_scale_invariant():
    rng = np.random.default_rng(0)
    reference = _tensor(rng.standard_normal(400))
    estimate = reference + 0.3 * _tensor(rng.standard_normal(400))
    base = si_snr(estimate, reference).item()
    assert si_snr(2.0 * estimate, reference).item() == pytest.approx(base, abs=1e-6)


def test_si_snr_clamps():
    reference = _tensor(np.sin(np.linspace(0, 20, 400)))
    assert si_snr(reference, reference).item() == pytest.approx(60.0)
    assert si_snr(2.0 * reference, reference).item() == pytest.approx(60.0)

    orthogonal = _tensor(np.cos(np.linspace(0, 20, 400)))
    orthogonal = orthogonal - (orthogonal * reference).sum() / (reference**2).sum() * reference
    assert si_snr(orthogonal, reference, zero_mean=False).item() == pytest.approx(-60.0)


def test_si_snr_matches_oracle():
    rng = np.random.default_rng(1)
    for _ in range(20):
        reference = rng.standard_normal(300)
        estimate = reference + rng.uniform(0.1, 2.0) * rng.standard_normal(300)
        ref0, est0 = reference - reference.mean(), estimate - estimate.mean()
        # direct formula, no epsilon
        projection = (est0 @ ref0) / (ref0 @ ref0) * ref0
        noise = est0 - projection
        expected = 10 * math.log10((projection @ projection) / (noise @ noise))
        assert si_snr(_tensor(estimate), _tensor(reference)).item() == pytest.approx(expected, abs=1e-6)


def test_si_snr_errors():
    with pytest.raises(InvalidArgumentError):
        si_snr(_tensor(np.ones(10)), _tensor(np.zeros(10)), zero_mean=False)
    with pytest.raises(InvalidArgumentError):
        si_snr(_tensor(np.ones(10)), _tensor(np.ones(11)))


def test_si_snr_loss_is_negative_mean():
    rng = np.random.default_rng(2)
    reference = torch.tensor(rng.standard_normal((3, 100)))
    estimate = reference + torch.tensor(rng.standard_normal((3, 100)))
    assert si_snr_loss(estimate, reference).item() == pytest.approx(-si_snr(estimate, reference).mean().item())


# %%
# Tests: Curriculum #


def test_alpha_schedule():
    schedule = CurriculumSchedule(ep_cr=50)
    assert [schedule.alpha(e) for e in (0, 25, 50, 80)] == [0.0, 0.5, 1.0, 1.0]
    assert CurriculumSchedule(ep_cr=0).alpha(0) == 1.0


def test_blend_endpoints():
    estimate = _tensor([1.0, 2.0, 0.0, -1.0])
    target = _tensor([2.0, 0.0, 0.0, 0.0])
    assert torch.equal(curriculum_blend(estimate, target, 1.0), estimate)
    # |x1|^2 / |x|^2 = 6 / 4
    assert torch.allclose(curriculum_blend(estimate, target, 0.0), 1.5 * target)
    halfway = curriculum_blend(estimate, target, 0.5)
    assert torch.allclose(halfway, 0.5 * estimate + 0.75 * target)
    rms = curriculum_blend(estimate, target, 0.0, energy_mode="rms")
    assert torch.allclose(rms, math.sqrt(1.5) * target)


def test_blend_rejects_silent_target():
    with pytest.raises(InvalidArgumentError):
        curriculum_blend(_tensor([1.0, 2.0]), _tensor([0.0, 0.0]), 0.5)


# %%
# Tests: Memory Construction #


def test_memory_items_are_shifted_prefixes():
    estimate = _tensor(np.arange(1.0, 9.0))
    first, second = build_training_memory(estimate, 2, 2, shuffle=False)
    assert first[0].tolist() == [0, 0, 1, 2, 3, 4, 5, 6]
    assert second[0].tolist() == [0, 0, 0, 0, 1, 2, 3, 4]


def test_memory_single_item_and_zero_shift():
    estimate = _tensor(np.arange(1.0, 9.0))
    (only,) = build_training_memory(estimate, 1, 3, shuffle=False)
    assert only[0].tolist() == [0, 0, 0, 1, 2, 3, 4, 5]
    copies = build_training_memory(estimate, 3, 0, shuffle=False)
    assert all(torch.equal(item, estimate) for item in copies)


def test_memory_shuffle_is_a_permutation():
    estimate = _tensor(np.arange(1.0, 17.0))
    ordered = build_training_memory(estimate, 4, 3, shuffle=False)
    shuffled = build_training_memory(estimate, 4, 3, torch.Generator().manual_seed(1))
    key = sorted(int(item.count_nonzero()) for item in ordered)
    assert sorted(int(item.count_nonzero()) for item in shuffled) == key


def test_memory_rejects_overlong_shift():
    with pytest.raises(InvalidArgumentError):
        build_training_memory(_tensor(np.ones(8)), 4, 2)


def test_alpha_zero_memory_holds_scaled_targets():
    target = _tensor(toy_wave(16, seed=4))
    estimate = _tensor(toy_wave(16, seed=5))
    blended = curriculum_blend(estimate, target, 0.0)
    scale = (estimate**2).sum() / (target**2).sum()
    for i, item in enumerate(build_training_memory(blended, 2, 3, shuffle=False), start=1):
        assert torch.allclose(item[0, 3 * i :], scale * target[0, : 16 - 3 * i])


# %%
# Tests: PAR Step #


@pytest.mark.parametrize("beta", [0.2, 1.0])
def test_par_loss_decomposition(beta):
    model = toy_model("contextual")
    batch = _batch()
    cfg = TrainConfig(bank_mode="contextual", loss_beta=beta, slots_range=(1, 3))
    schedule = CurriculumSchedule(ep_cr=4, current_epoch=2)
    result = par_step(model, batch, cfg, schedule, torch.Generator().manual_seed(9), backward=False)

    with torch.no_grad():
        generator = torch.Generator().manual_seed(9)
        stage1 = model.separate(batch["mixture"], batch["cues"]).estimate
        loss1 = si_snr_loss(stage1, batch["target"])
        blended = curriculum_blend(stage1, batch["target"], 0.5)
        n_slots = int(torch.randint(1, 4, (1,), generator=generator).item())
        max_shift = 63 // n_slots
        shift = int(torch.randint(0, max_shift + 1, (1,), generator=generator).item())
        memory = build_training_memory(blended, n_slots, shift, generator)
        slots = model.reference_slots(memory, 64)
        stage2 = model.separate(batch["mixture"], batch["cues"], *slots).estimate
        loss2 = si_snr_loss(stage2, batch["target"])

    assert (result.n_slots, result.shift) == (n_slots, shift)
    assert result.alpha == 0.5
    assert result.stage1_loss.item() == pytest.approx(loss1.item(), abs=1e-9)
    assert result.stage2_loss.item() == pytest.approx(loss2.item(), abs=1e-9)
    expected = beta * loss1.item() + (1 - beta) * loss2.item()
    assert result.loss.item() == pytest.approx(expected, abs=1e-9)


def test_par_step_without_banks_is_stage_one_only():
    model = toy_model("none")
    cfg = TrainConfig(bank_mode="none")
    result = par_step(model, _batch(), cfg, CurriculumSchedule(), backward=False)
    assert result.stage2_loss is None
    assert torch.equal(result.loss, result.stage1_loss)


def test_par_step_gradients_reach_parameters():
    model = toy_model("both")
    cfg = TrainConfig(bank_mode="both", init_mode=VP_INIT, slots_range=(1, 2))
    par_step(model, _batch(), cfg, CurriculumSchedule(), torch.Generator().manual_seed(0))
    assert model.contextual_attention.global_value.weight.grad is not None
    assert model.extractor.mask_head.weight.grad.abs().sum() > 0


def test_par_loss_matches_finite_differences():
    model = toy_model("both")
    cfg = TrainConfig(bank_mode="both", init_mode=VP_INIT, slots_range=(1, 2), loss_beta=0.2)
    batch = _batch(seed=4)

    def loss():
        generator = torch.Generator().manual_seed(11)
        return par_step(model, batch, cfg, CurriculumSchedule(), generator, backward=False).loss

    assert parameter_gradient_error(loss, model.extractor.mask_head.weight) < FD_TOLERANCE


def test_par_step_divergence():
    model = toy_model("contextual")
    with torch.no_grad():
        model.encoders.decoder.deconv.bias.fill_(float("nan"))
    with pytest.raises(TrainingDivergenceError) as info:
        par_step(model, _batch(), TrainConfig(), CurriculumSchedule(), backward=False)
    assert "stage1_loss" in info.value.diagnostics


# %%
# Tests: Trainer #


def test_plateau_tracker():
    tracker = PlateauTracker(halve_patience=6, stop_patience=10)
    assert tracker.update(1.0) == "improved"
    actions = [tracker.update(2.0) for _ in range(10)]
    assert actions.count("halve") == 1 and actions[5] == "halve"
    assert actions[-1] == "stop" and "stop" not in actions[:-1]


def test_train_config_validation():
    with pytest.raises(InvalidArgumentError):
        TrainConfig(loss_beta=1.5)
    with pytest.raises(InvalidArgumentError):
        TrainConfig(init_mode="A_Init")
    with pytest.raises(InvalidArgumentError):
        TrainConfig(slots_range=(0, 2))


def test_fit_writes_history_and_checkpoints(tmp_path):
    storage = RunStorage(root=tmp_path)
    model = toy_model("contextual", dtype=torch.float32)
    trainer = Trainer(model, _toy_train_config(max_epochs=2), _specs(4), _specs(2, seed=50), storage)
    history = trainer.fit()
    assert list(history["epoch"]) == [0, 1]
    assert {"loss", "loss1", "loss2", "val_loss", "val_sisnr", "lr", "alpha"} <= set(history.columns)
    assert list(history["alpha"]) == [0.0, 0.5]
    assert storage.has_checkpoint("model_best") and storage.has_checkpoint("model_last")
    assert len(storage.read_report("train_metrics")) == 2


def test_resume_is_bit_identical():
    specs, val_specs = _specs(4), _specs(2, seed=50)
    first = Trainer(toy_model("contextual", dtype=torch.float32), _toy_train_config(), specs, val_specs)
    first.fit(1)
    snapshot = copy.deepcopy(first.state_dict())
    first.fit(1)

    second = Trainer(toy_model("contextual", seed=7, dtype=torch.float32), _toy_train_config(), specs, val_specs)
    second.load_state_dict(snapshot)
    second.fit(1)
    assert second.epoch == first.epoch == 2
    assert second.history[-1]["loss"] == first.history[-1]["loss"]
    assert second.history[-1]["val_loss"] == first.history[-1]["val_loss"]


def test_resume_restores_best_weights(tmp_path):
    storage = RunStorage(root=tmp_path)
    specs, val_specs = _specs(4), _specs(2, seed=50)
    cfg = _toy_train_config(max_epochs=1)
    Trainer(toy_model("contextual", dtype=torch.float32), cfg, specs, val_specs, storage).fit()

    best = toy_model("contextual", seed=9, dtype=torch.float32).state_dict()
    payload = storage.load_checkpoint("model_best")
    storage.save_checkpoint("model_best", {**payload, "state_dict": best})

    # nothing left to train, so the resumed model must end on the stored best weights
    trainer = train(specs, val_specs, cfg, toy_model("contextual", dtype=torch.float32), storage, resume=True)
    for name, value in trainer.model.state_dict().items():
        assert torch.equal(value, best[name])


def test_crop_collate_trims_to_shortest_item():
    items = [
        {
            "mixture": torch.ones(n),
            "target": torch.ones(n),
            "pre_enrolled": torch.ones(n),
            "cues": torch.ones(n // 640, 8),
        }
        for n in (2560, 1920, 3200)
    ]
    batch = crop_collate(items)
    assert batch["mixture"].shape == (3, 1920)
    assert batch["pre_enrolled"].shape == (3, 1920)
    assert batch["cues"].shape == (3, 3, 8)


def test_fit_restores_best_state_on_divergence():
    trainer = Trainer(
        toy_model("contextual", dtype=torch.float32), _toy_train_config(), _specs(2), _specs(2, seed=50)
    )
    trainer.fit(1)
    bias = trainer.model.encoders.decoder.deconv.bias
    with torch.no_grad():
        bias.fill_(float("nan"))
    with pytest.raises(TrainingDivergenceError):
        trainer.fit(1)
    assert torch.all(torch.isfinite(bias))


def test_speaker_pretraining_freezes_encoder():
    model = toy_model("speaker", dtype=torch.float32)
    cfg = TrainConfig(
        bank_mode="speaker",
        speaker_pretrain_epochs=1,
        speaker_pretrain_utterances=2,
        speaker_pretrain_duration_s=0.05,
    )
    accuracy = pretrain_speaker_encoder(model, ["spk_0", "spk_1"], cfg)
    assert 0.0 <= accuracy <= 1.0
    assert model.encoders.speaker_frozen


def test_speaker_pretraining_skipped_for_one_speaker():
    model = toy_model("speaker", dtype=torch.float32)
    accuracy = pretrain_speaker_encoder(model, ["spk_0"], TrainConfig(freeze_speaker=False))
    assert math.isnan(accuracy)
    assert not model.encoders.speaker_frozen


# %%
# Main #

if __name__ == "__main__":
    test_plateau_tracker()
    test_memory_items_are_shifted_prefixes()


# %%
