# %%
# Imports #

import copy
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import pandas as pd
import torch
import torch.nn.functional as F
from readable_utils.display_tools import pprint_df, print_logger  # noqa F401
from torch import nn
from torch.utils.data import DataLoader, Dataset, default_collate
from tqdm import tqdm

from errors import InvalidArgumentError, TrainingDivergenceError
from momentum_model import BANK_MODES, MomentumExtractor
from signals import MixtureSpec, build_mixture, speaker_index, synth_speaker


# %%
# Vars #

V_INIT = "V_Init"
VP_INIT = "VP_Init"
INIT_MODES = (V_INIT, VP_INIT)
ENERGY_MODES = ("literal", "rms")

SI_SNR_EPS = 1e-8
SI_SNR_CLAMP_DB = 60.0

PRETRAIN_SEED_OFFSET = 1_000_000
PRETRAIN_LOGIT_SCALE = 10.0


# %%
# Config #


@dataclass(frozen=True)
class TrainConfig:
    init_mode: str = V_INIT
    bank_mode: str = "contextual"
    loss_beta: float = 0.2
    slots_range: Tuple[int, int] = (1, 5)
    shift_range: Tuple[int, int] = (0, 16000)
    lr: float = 1e-3
    halve_patience: int = 6
    stop_patience: int = 10
    max_epochs: int = 100
    ep_cr: int = 50
    batch_size: int = 8
    grad_clip: Optional[float] = 5.0
    detach_stage1: bool = False
    energy_mode: str = "literal"
    zero_mean: bool = True
    seed: int = 0
    freeze_speaker: bool = True
    speaker_pretrain_epochs: int = 5
    speaker_pretrain_utterances: int = 8
    speaker_pretrain_duration_s: float = 1.0

    def __post_init__(self):
        if self.init_mode not in INIT_MODES:
            raise InvalidArgumentError(f"init_mode must be one of {INIT_MODES}")
        if self.bank_mode not in BANK_MODES:
            raise InvalidArgumentError(f"bank_mode must be one of {BANK_MODES}")
        if not 0.0 <= self.loss_beta <= 1.0:
            raise InvalidArgumentError("loss_beta must lie in [0, 1]")
        low, high = self.slots_range
        if not 1 <= low <= high:
            raise InvalidArgumentError(f"invalid slots_range {self.slots_range}")
        low, high = self.shift_range
        if not 0 <= low <= high:
            raise InvalidArgumentError(f"invalid shift_range {self.shift_range}")
        if self.energy_mode not in ENERGY_MODES:
            raise InvalidArgumentError(f"energy_mode must be one of {ENERGY_MODES}")
        if self.lr <= 0 or self.batch_size < 1 or self.max_epochs < 1:
            raise InvalidArgumentError("lr, batch_size and max_epochs must be positive")
        if self.halve_patience < 1 or self.stop_patience < 1:
            raise InvalidArgumentError("patience values must be positive")

    def to_dict(self) -> dict:
        values = asdict(self)
        values["slots_range"] = list(self.slots_range)
        values["shift_range"] = list(self.shift_range)
        return values


@dataclass
class CurriculumSchedule:
    ep_cr: int = 50
    current_epoch: int = 0

    def alpha(self, epoch: Optional[int] = None) -> float:
        epoch = self.current_epoch if epoch is None else epoch
        if self.ep_cr <= 0:
            return 1.0
        return min(epoch / self.ep_cr, 1.0)


@dataclass
class PlateauTracker:
    """Best-validation-loss bookkeeping: halve the LR / stop after bad epochs"""

    halve_patience: int = 6
    stop_patience: int = 10
    best: float = math.inf
    bad_epochs: int = 0

    def update(self, val_loss: float) -> str:
        if val_loss < self.best:
            self.best = val_loss
            self.bad_epochs = 0
            return "improved"
        self.bad_epochs += 1
        if self.bad_epochs >= self.stop_patience:
            return "stop"
        if self.bad_epochs % self.halve_patience == 0:
            return "halve"
        return "none"


@dataclass
class StepResult:
    loss: torch.Tensor
    stage1_loss: torch.Tensor
    stage2_loss: Optional[torch.Tensor]
    alpha: float
    n_slots: int = 0
    shift: int = 0


# %%
# Functions: Loss #


def si_snr(
    estimate: torch.Tensor,
    reference: torch.Tensor,
    zero_mean: bool = True,
    eps: float = SI_SNR_EPS,
    clamp_db: float = SI_SNR_CLAMP_DB,
) -> torch.Tensor:
    """Scale-invariant SNR in dB over the last axis, clamped to +-clamp_db"""
    if estimate.shape != reference.shape:
        raise InvalidArgumentError(
            f"estimate {tuple(estimate.shape)} and reference {tuple(reference.shape)} differ"
        )
    if zero_mean:
        estimate = estimate - estimate.mean(dim=-1, keepdim=True)
        reference = reference - reference.mean(dim=-1, keepdim=True)
    reference_energy = torch.sum(reference**2, dim=-1, keepdim=True)
    if torch.any(reference_energy == 0):
        raise InvalidArgumentError("reference has zero energy")

    scale = torch.sum(estimate * reference, dim=-1, keepdim=True) / (reference_energy + eps)
    projection = scale * reference
    noise = estimate - projection
    ratio = (torch.sum(projection**2, dim=-1) + eps) / (torch.sum(noise**2, dim=-1) + eps)
    return torch.clamp(10 * torch.log10(ratio), -clamp_db, clamp_db)


def si_snr_loss(estimate, reference, zero_mean=True) -> torch.Tensor:
    return -si_snr(estimate, reference, zero_mean=zero_mean).mean()


# %%
# Functions: PAR #


def curriculum_blend(
    estimate: torch.Tensor, target: torch.Tensor, alpha: float, energy_mode: str = "literal"
) -> torch.Tensor:
    """alpha * x1 + (1 - alpha) * (|x1|^2 / |x|^2) * x  (squared-norm ratio in literal mode)"""
    if estimate.shape != target.shape:
        raise InvalidArgumentError("curriculum inputs must share a shape")
    target_energy = torch.sum(target**2, dim=-1, keepdim=True)
    if torch.any(target_energy == 0):
        raise InvalidArgumentError("target has zero energy")
    ratio = torch.sum(estimate**2, dim=-1, keepdim=True) / target_energy
    if energy_mode == "rms":
        ratio = torch.sqrt(ratio)
    elif energy_mode != "literal":
        raise InvalidArgumentError(f"unknown energy_mode {energy_mode!r}")
    return alpha * estimate + (1 - alpha) * ratio * target


def build_training_memory(
    estimate: torch.Tensor,
    n_slots: int,
    shift: int,
    generator: Optional[torch.Generator] = None,
    shuffle: bool = True,
) -> List[torch.Tensor]:
    """Item i (1-based) keeps the first T - i*shift samples behind i*shift zeros"""
    length = estimate.shape[-1]
    if n_slots < 1 or shift < 0 or n_slots * shift >= length:
        raise InvalidArgumentError(
            f"need n_slots >= 1 and n_slots * shift < T, got N={n_slots}, shift={shift}, T={length}"
        )
    items = [
        F.pad(estimate[..., : length - i * shift], (i * shift, 0))
        for i in range(1, n_slots + 1)
    ]
    if not shuffle:
        return items
    order = torch.randperm(n_slots, generator=generator)
    return [items[i] for i in order.tolist()]


def _randint(low, high, generator) -> int:
    """Uniform integer in [low, high]"""
    return int(torch.randint(low, high + 1, (1,), generator=generator).item())


def par_step(
    model: MomentumExtractor,
    batch: Dict[str, torch.Tensor],
    cfg: TrainConfig,
    schedule: CurriculumSchedule,
    generator: Optional[torch.Generator] = None,
    backward: bool = True,
) -> StepResult:
    """Two-stage pseudo-autoregressive step; gradients land on the model parameters"""
    mixture = batch["mixture"]
    target = batch["target"]
    cues = batch["cues"]

    speaker_slots = None
    if cfg.init_mode == VP_INIT:
        speaker_slots = model.embed_speaker(batch["pre_enrolled"]).unsqueeze(1)
    stage1 = model.separate(mixture, cues, speaker_slots=speaker_slots).estimate
    stage1_loss = si_snr_loss(stage1, target, cfg.zero_mean)

    alpha = schedule.alpha()
    stage2_loss = None
    n_slots = shift = 0
    if cfg.bank_mode == "none":
        loss = stage1_loss
    else:
        seed_estimate = stage1.detach() if cfg.detach_stage1 else stage1
        blended = curriculum_blend(seed_estimate, target, alpha, cfg.energy_mode)
        length = mixture.shape[-1]
        n_slots = _randint(cfg.slots_range[0], cfg.slots_range[1], generator)
        max_shift = min(cfg.shift_range[1], (length - 1) // n_slots)
        shift = _randint(min(cfg.shift_range[0], max_shift), max_shift, generator)
        memory = build_training_memory(blended, n_slots, shift, generator)

        speaker_slots, contextual_slots = model.reference_slots(memory, length)
        stage2 = model.separate(mixture, cues, speaker_slots, contextual_slots).estimate
        stage2_loss = si_snr_loss(stage2, target, cfg.zero_mean)
        loss = cfg.loss_beta * stage1_loss + (1 - cfg.loss_beta) * stage2_loss

    if not torch.isfinite(loss):
        raise TrainingDivergenceError(
            "non-finite PAR loss",
            {
                "stage1_loss": float(stage1_loss.detach()),
                "stage2_loss": None if stage2_loss is None else float(stage2_loss.detach()),
                "alpha": alpha,
                "n_slots": n_slots,
                "shift": shift,
            },
        )
    if backward:
        loss.backward()
    return StepResult(loss, stage1_loss, stage2_loss, alpha, n_slots, shift)


# %%
# Data #


class MixtureDataset(Dataset):
    """Synthesizes bundles on first access and caches the tensors"""

    def __init__(self, specs: Sequence[MixtureSpec]):
        self.specs = list(specs)
        self._dict_items = {}

    def __len__(self):
        return len(self.specs)

    def __getitem__(self, index):
        if index in self._dict_items:
            return self._dict_items[index]
        bundle = build_mixture(self.specs[index])
        item = {
            "mixture": torch.tensor(bundle.mixture.samples, dtype=torch.float32),
            "target": torch.tensor(bundle.target.samples, dtype=torch.float32),
            "pre_enrolled": torch.tensor(bundle.pre_enrolled.samples, dtype=torch.float32),
            "cues": torch.tensor(bundle.cues.frames, dtype=torch.float32),
        }
        self._dict_items[index] = item
        return item


def crop_collate(items: List[dict]) -> dict:
    """Stack a batch of variable-length items, cropped to the shortest one"""
    num_samples = min(item["mixture"].shape[-1] for item in items)
    num_frames = min(item["cues"].shape[0] for item in items)
    cropped = [
        {
            "mixture": item["mixture"][:num_samples],
            "target": item["target"][:num_samples],
            "pre_enrolled": item["pre_enrolled"][:num_samples],
            "cues": item["cues"][:num_frames],
        }
        for item in items
    ]
    return default_collate(cropped)


# %%
# Functions: Speaker Encoder #


def pretrain_speaker_encoder(
    model: MomentumExtractor, speakers: Sequence[str], cfg: TrainConfig
) -> float:
    """Short speaker classification run; freezes the encoder when configured"""
    if cfg.speaker_pretrain_epochs < 1 or len(speakers) < 2:
        if cfg.freeze_speaker:
            model.encoders.freeze_speaker()
        return float("nan")

    generator = torch.Generator().manual_seed(cfg.seed + PRETRAIN_SEED_OFFSET)
    head = nn.Linear(model.config.encoder.channels, len(speakers))
    params = list(model.encoders.speaker.parameters()) + list(head.parameters())
    optimizer = torch.optim.Adam(params, lr=cfg.lr)
    model.encoders.speaker.train()

    accuracy = 0.0
    for epoch in tqdm(range(cfg.speaker_pretrain_epochs), desc="Pretraining speaker encoder"):
        waves, labels = [], []
        for label, speaker in enumerate(speakers):
            for utterance in range(cfg.speaker_pretrain_utterances):
                seed = PRETRAIN_SEED_OFFSET + epoch * 1000 + utterance
                wave = synth_speaker(speaker, cfg.speaker_pretrain_duration_s, seed)
                waves.append(torch.tensor(wave.samples, dtype=torch.float32))
                labels.append(label)
        waves = torch.stack(waves)
        labels = torch.tensor(labels)
        order = torch.randperm(len(labels), generator=generator)

        correct = 0
        for chunk in torch.split(order, cfg.batch_size):
            embedding = model.embed_speaker(waves[chunk])
            logits = PRETRAIN_LOGIT_SCALE * head(embedding)
            loss = F.cross_entropy(logits, labels[chunk])
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            correct += int((logits.argmax(dim=-1) == labels[chunk]).sum())
        accuracy = correct / len(labels)
        print_logger(f"Speaker pretrain epoch {epoch} accuracy {accuracy:.3f}")

    if cfg.freeze_speaker:
        model.encoders.freeze_speaker()
    return accuracy


# %%
# Trainer #


class Trainer:
    """PAR training loop with plateau LR halving, early stopping and checkpoints"""

    def __init__(
        self,
        model: MomentumExtractor,
        cfg: TrainConfig,
        train_specs: Sequence[MixtureSpec],
        val_specs: Sequence[MixtureSpec],
        storage=None,
        checkpoint_name: str = "model",
    ):
        self.model = model
        self.cfg = cfg
        self.storage = storage
        self.checkpoint_name = checkpoint_name
        self.train_data = MixtureDataset(train_specs)
        self.val_data = MixtureDataset(val_specs)
        self.generator = torch.Generator().manual_seed(cfg.seed)
        self.schedule = CurriculumSchedule(ep_cr=cfg.ep_cr)
        self.tracker = PlateauTracker(cfg.halve_patience, cfg.stop_patience)
        self.optimizer = torch.optim.Adam(self._trainable(), lr=cfg.lr)
        self.epoch = 0
        self.history: List[dict] = []
        self.best_state = None

    def _trainable(self):
        return [p for p in self.model.parameters() if p.requires_grad]

    @property
    def lr(self) -> float:
        return self.optimizer.param_groups[0]["lr"]

    def _halve_lr(self):
        for group in self.optimizer.param_groups:
            group["lr"] *= 0.5
        print_logger(f"Learning rate halved to {self.lr:.2e}")

    def train_epoch(self) -> dict:
        self.model.train()
        if self.model.encoders.speaker_frozen:
            self.model.encoders.speaker.eval()
        self.schedule.current_epoch = self.epoch
        loader = DataLoader(
            self.train_data,
            batch_size=self.cfg.batch_size,
            shuffle=True,
            generator=self.generator,
            collate_fn=crop_collate,
        )
        totals = {"loss": 0.0, "loss1": 0.0, "loss2": 0.0}
        batches = 0
        for batch in tqdm(loader, desc=f"Epoch {self.epoch}", total=len(loader)):
            self.optimizer.zero_grad()
            result = par_step(self.model, batch, self.cfg, self.schedule, self.generator)
            if self.cfg.grad_clip:
                nn.utils.clip_grad_norm_(self._trainable(), self.cfg.grad_clip)
            self.optimizer.step()
            totals["loss"] += float(result.loss.detach())
            totals["loss1"] += float(result.stage1_loss.detach())
            if result.stage2_loss is not None:
                totals["loss2"] += float(result.stage2_loss.detach())
            batches += 1
        return {key: value / max(batches, 1) for key, value in totals.items()}

    @torch.no_grad()
    def validate(self) -> dict:
        self.model.eval()
        generator = torch.Generator().manual_seed(self.cfg.seed + 1)
        loader = DataLoader(
            self.val_data, batch_size=self.cfg.batch_size, shuffle=False, collate_fn=crop_collate
        )
        losses, scores = [], []
        for batch in loader:
            result = par_step(
                self.model, batch, self.cfg, self.schedule, generator, backward=False
            )
            losses.append(float(result.loss))
            final = result.stage2_loss if result.stage2_loss is not None else result.stage1_loss
            scores.append(-float(final))
        return {
            "val_loss": sum(losses) / max(len(losses), 1),
            "val_sisnr": sum(scores) / max(len(scores), 1),
        }

    def state_dict(self) -> dict:
        return {
            "header": json.dumps(self.model.header({"train": self.cfg.seed})),
            "train_config": self.cfg.to_dict(),
            "state_dict": self.model.state_dict(),
            "optimizer": self.optimizer.state_dict(),
            "tracker": asdict(self.tracker),
            "epoch": self.epoch,
            "generator_state": self.generator.get_state(),
            "history": list(self.history),
            "speaker_frozen": self.model.encoders.speaker_frozen,
        }

    def load_state_dict(self, state: dict):
        if state.get("speaker_frozen"):
            self.model.encoders.freeze_speaker()
        self.model.load_state_dict(state["state_dict"])
        self.optimizer = torch.optim.Adam(self._trainable(), lr=self.cfg.lr)
        self.optimizer.load_state_dict(state["optimizer"])
        self.tracker = PlateauTracker(**state["tracker"])
        self.epoch = int(state["epoch"])
        self.generator.set_state(state["generator_state"])
        self.history = list(state["history"])

    def _save(self, suffix: str):
        if self.storage is not None:
            self.storage.save_checkpoint(f"{self.checkpoint_name}_{suffix}", self.state_dict())

    def fit(self, epochs: Optional[int] = None) -> pd.DataFrame:
        """Run up to `epochs` more epochs (default: until max_epochs or early stop)"""
        end_epoch = self.cfg.max_epochs if epochs is None else min(self.epoch + epochs, self.cfg.max_epochs)
        while self.epoch < end_epoch:
            try:
                train_stats = self.train_epoch()
                val_stats = self.validate()
            except TrainingDivergenceError:
                print_logger(f"Training diverged at epoch {self.epoch}")
                if self.best_state is not None:
                    self.model.load_state_dict(self.best_state)
                raise

            row = {
                "epoch": self.epoch,
                "alpha": self.schedule.alpha(),
                **train_stats,
                **val_stats,
                "lr": self.lr,
            }
            self.history.append(row)
            print_logger(
                f"Epoch {self.epoch} alpha {row['alpha']:.2f} loss1 {row['loss1']:.3f} "
                f"loss2 {row['loss2']:.3f} val_sisnr {row['val_sisnr']:.2f} dB lr {row['lr']:.1e}"
            )

            action = self.tracker.update(val_stats["val_loss"])
            self.epoch += 1
            if action == "improved":
                self.best_state = copy.deepcopy(self.model.state_dict())
                self._save("best")
            elif action == "halve":
                self._halve_lr()
            self._save("last")
            if action == "stop":
                print_logger(f"Early stop after {self.tracker.bad_epochs} epochs without improvement")
                break

        if self.best_state is not None:
            self.model.load_state_dict(self.best_state)
        history = pd.DataFrame(self.history)
        if self.storage is not None and not history.empty:
            self.storage.write_report("train_metrics", history)
        return history


def train(
    train_specs: Sequence[MixtureSpec],
    val_specs: Sequence[MixtureSpec],
    cfg: TrainConfig,
    model: Optional[MomentumExtractor] = None,
    storage=None,
    checkpoint_name: str = "model",
    resume: bool = False,
) -> Trainer:
    """Pretrain (and freeze) the speaker encoder, then PAR-train; returns the trainer"""
    from momentum_model import ModelConfig

    torch.manual_seed(cfg.seed)
    if model is None:
        model = MomentumExtractor(ModelConfig(bank_mode=cfg.bank_mode))
    trainer = Trainer(model, cfg, train_specs, val_specs, storage, checkpoint_name)

    if resume and storage is not None and storage.has_checkpoint(f"{checkpoint_name}_last"):
        trainer.load_state_dict(storage.load_checkpoint(f"{checkpoint_name}_last"))
        if storage.has_checkpoint(f"{checkpoint_name}_best"):
            trainer.best_state = storage.load_checkpoint(f"{checkpoint_name}_best")["state_dict"]
        print_logger(f"Resumed {checkpoint_name} at epoch {trainer.epoch}")
    else:
        speakers = sorted({s.target_id for s in train_specs}, key=speaker_index)
        pretrain_speaker_encoder(model, speakers, cfg)
        trainer.optimizer = torch.optim.Adam(trainer._trainable(), lr=cfg.lr)

    history = trainer.fit()
    if not history.empty:
        print_logger(f"Training history of {checkpoint_name}:")
        pprint_df(history.tail())
    return trainer


# %%
