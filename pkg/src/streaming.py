# %%
# Imports #

import math
import time
from dataclasses import asdict, dataclass, field
from typing import List, Optional, Tuple

import numpy as np
import torch
from readable_utils.display_tools import pprint_df, print_logger  # noqa F401

from config import AUDIO_RATE
from encoders import latent_length
from errors import InvalidArgumentError
from memory import ContextualBank, SpeakerBank, UpdatePolicy
from momentum_model import MomentumExtractor
from signals import CueStream, Waveform
from training import INIT_MODES, V_INIT, VP_INIT


# %%
# Vars #

VISUAL_ONLY = "VisualOnly"
SELF_ENRO = "SelfEnro"
PRE_ENRO = "PreEnro"
TGT_ENRO = "TgtEnro"
EVAL_SETTINGS = (VISUAL_ONLY, SELF_ENRO, PRE_ENRO, TGT_ENRO)

ENERGY_FLOOR = 1e-20
# literal gains never push a window past 16-bit full scale
LITERAL_PEAK_CAP = 1.0


# %%
# Config #


@dataclass(frozen=True)
class StreamConfig:
    """Window sizes are in samples at AUDIO_RATE"""

    T_win: int = 2 * AUDIO_RATE
    T_sh: int = AUDIO_RATE // 5
    T_init: int = 2 * AUDIO_RATE
    gamma: float = 0.7
    speaker_capacity: int = 1
    contextual_capacity: int = 1
    policy: str = UpdatePolicy.FIFO.value
    self_enroll_len: int = 2 * AUDIO_RATE
    init_mode: str = V_INIT
    eval_setting: str = SELF_ENRO
    empty_on_switch: bool = False
    clean_init: bool = True
    energy_mode: str = "literal"

    def __post_init__(self):
        if min(self.T_win, self.T_sh, self.T_init, self.self_enroll_len) < 1:
            raise InvalidArgumentError("window lengths must be positive")
        if self.T_sh > self.T_win:
            raise InvalidArgumentError(f"T_sh {self.T_sh} exceeds T_win {self.T_win}")
        if self.T_init < self.T_win:
            raise InvalidArgumentError(f"T_init {self.T_init} is shorter than T_win {self.T_win}")
        if self.gamma <= 0:
            raise InvalidArgumentError("gamma must be positive")
        if self.speaker_capacity < 1 or self.contextual_capacity < 1:
            raise InvalidArgumentError("bank capacities must be >= 1")
        if self.init_mode not in INIT_MODES:
            raise InvalidArgumentError(f"init_mode must be one of {INIT_MODES}")
        if self.eval_setting not in EVAL_SETTINGS:
            raise InvalidArgumentError(f"eval_setting must be one of {EVAL_SETTINGS}")
        if self.energy_mode not in ("literal", "rms"):
            raise InvalidArgumentError(f"unknown energy_mode {self.energy_mode!r}")
        UpdatePolicy(self.policy)

    @classmethod
    def from_seconds(cls, win_s=2.0, shift_s=0.2, init_s=2.0, self_enroll_s=2.0, **kwargs):
        return cls(
            T_win=int(round(win_s * AUDIO_RATE)),
            T_sh=int(round(shift_s * AUDIO_RATE)),
            T_init=int(round(init_s * AUDIO_RATE)),
            self_enroll_len=int(round(self_enroll_s * AUDIO_RATE)),
            **kwargs,
        )

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class StepTrace:
    step: int
    start: int
    end: int
    emitted: int
    speaker_slots_before: int
    contextual_slots_before: int
    speaker_slots_after: int
    contextual_slots_after: int
    slot_scores: dict
    slot_fingerprint: dict
    raw_energy: float
    prev_energy: float
    output_energy: float
    cumulative_energy: float
    reset: bool
    wall_s: float
    saturated: bool = False

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class StreamState:
    k: int = 0
    speaker_bank: Optional[SpeakerBank] = None
    contextual_bank: Optional[ContextualBank] = None
    emitted: List[np.ndarray] = field(default_factory=list)
    cumulative_energy: float = 0.0
    trace: List[StepTrace] = field(default_factory=list)
    reset_step: Optional[int] = None

    @property
    def emitted_length(self) -> int:
        return sum(chunk.size for chunk in self.emitted)

    def banks(self):
        return [bank for bank in (self.speaker_bank, self.contextual_bank) if bank is not None]

    def emitted_samples(self) -> np.ndarray:
        if not self.emitted:
            return np.zeros(0)
        return np.concatenate(self.emitted)


@dataclass
class StreamResult:
    estimate: Waveform
    trace: List[StepTrace]
    processing_s: float
    reset_step: Optional[int] = None

    @property
    def duration_s(self) -> float:
        return self.estimate.duration_s


# %%
# Functions: Energy #


def energy_scale(
    estimate: np.ndarray,
    k: int,
    prev_energy: float,
    gamma: float,
    emitted_length: int = 0,
    energy_mode: str = "literal",
) -> Tuple[float, bool]:
    """Gain applied to a window estimate and whether the literal gain hit the peak cap.

    literal: k = 0 -> gamma / |x|^2, k > 0 -> E_prev / |x|^2,
             capped so the window peak stays within LITERAL_PEAK_CAP
    rms:     k = 0 -> gamma / |x|,   k > 0 -> rms(history) / rms(x)
    """
    raw_energy = float(np.dot(estimate, estimate))
    if raw_energy <= ENERGY_FLOOR:
        return 0.0, False
    if energy_mode != "literal":
        if k == 0:
            return gamma / math.sqrt(raw_energy), False
        history_rms = math.sqrt(prev_energy / max(emitted_length, 1))
        return history_rms / math.sqrt(raw_energy / estimate.size), False

    scale = (gamma if k == 0 else prev_energy) / raw_energy
    # E_prev^2 / |x|^2 compounds across steps once E_prev exceeds the window energy
    ceiling = LITERAL_PEAK_CAP / float(np.max(np.abs(estimate)))
    if scale > ceiling:
        return ceiling, True
    return scale, False


def _tail(samples: np.ndarray, length: int) -> np.ndarray:
    """Last `length` samples, left-zero-padded when shorter"""
    if samples.size >= length:
        return samples[samples.size - length :]
    return np.concatenate([np.zeros(length - samples.size), samples])


def reset_step_index(switch_sample: int, T_init: int, T_sh: int) -> int:
    """First step whose window [end - T_win, end) contains the switch sample"""
    if switch_sample < T_init:
        return 1
    return (switch_sample - T_init) // T_sh + 1


# %%
# Engine #


class StreamEngine:
    """Sliding-window online extraction with self-enrolled memory banks"""

    def __init__(self, model: MomentumExtractor, cfg: StreamConfig):
        self.model = model.eval()
        self.cfg = cfg
        self.dtype = next(model.parameters()).dtype

    @property
    def uses_banks(self) -> bool:
        return self.cfg.eval_setting != VISUAL_ONLY

    def new_state(self) -> StreamState:
        state = StreamState()
        if not self.uses_banks:
            return state
        policy = UpdatePolicy(self.cfg.policy)
        if self.model.config.uses_speaker:
            state.speaker_bank = SpeakerBank(
                self.cfg.speaker_capacity, self.model.speaker_attention, policy
            )
        if self.model.config.uses_contextual:
            state.contextual_bank = ContextualBank(
                self.cfg.contextual_capacity, self.model.contextual_attention, policy
            )
        return state

    def _tensor(self, values) -> torch.Tensor:
        return torch.as_tensor(np.asarray(values), dtype=self.dtype).unsqueeze(0)

    @torch.no_grad()
    def _store(self, state: StreamState, reference: np.ndarray):
        wave = self._tensor(reference)
        if state.speaker_bank is not None:
            state.speaker_bank.store(self.model.embed_speaker(wave))
        if state.contextual_bank is not None:
            state.contextual_bank.store(self.model.embed_context(wave, self.cfg.T_win))

    @torch.no_grad()
    def _extract(self, state, mixture_window, cue_window, speaker_feature=None):
        """Raw window estimate plus the slot scores of any retrieval"""
        mixture = self._tensor(mixture_window)
        mixture_latent, visual_latent = self.model.encode_inputs(mixture, self._tensor(cue_window))
        length = mixture_latent.shape[1]

        scores = {}
        contextual_feature = None
        if state.speaker_bank is not None and not state.speaker_bank.is_empty:
            retrieved = state.speaker_bank.retrieve(length)
            speaker_feature = retrieved.feature
            scores["speaker"] = retrieved.slot_scores[0].tolist()
        if state.contextual_bank is not None and not state.contextual_bank.is_empty:
            retrieved = state.contextual_bank.retrieve(mixture_latent)
            contextual_feature = retrieved.feature
            scores["contextual"] = retrieved.slot_scores[0].tolist()

        estimate = self.model.extract(
            mixture_latent,
            visual_latent,
            mixture.shape[-1],
            speaker_feature,
            contextual_feature,
        )
        return estimate[0].double().cpu().numpy(), scores

    @torch.no_grad()
    def _init_speaker_feature(self, pre_enrolled, length: int):
        """Single-slot speaker cue from pre-enrolled speech (VP_Init)"""
        slots = self.model.embed_speaker(self._tensor(pre_enrolled)).unsqueeze(1)
        speaker, _, _ = self.model.speaker_attention(slots)
        return speaker.unsqueeze(1).expand(-1, length, -1)

    def _sizes(self, state):
        return (
            0 if state.speaker_bank is None else len(state.speaker_bank),
            0 if state.contextual_bank is None else len(state.contextual_bank),
        )

    @staticmethod
    def _fingerprint(state) -> dict:
        prints = {}
        if state.speaker_bank is not None:
            prints["speaker"] = [float(s.abs().sum()) for s in state.speaker_bank.slots]
        if state.contextual_bank is not None:
            prints["contextual"] = [float(s.abs().sum()) for s in state.contextual_bank.slots]
        return prints

    def _finish(self, state, estimate, emit, start, end, scores, before, reset):
        """Normalize, emit the newest `emit` samples and update the energy ledger"""
        prev_energy = state.cumulative_energy
        raw_energy = float(np.dot(estimate, estimate))
        scale, saturated = energy_scale(
            estimate,
            state.k,
            prev_energy,
            self.cfg.gamma,
            state.emitted_length,
            self.cfg.energy_mode,
        )
        normalized = estimate * scale
        emitted = normalized[normalized.size - emit :].copy()
        state.emitted.append(emitted)
        state.cumulative_energy = prev_energy + float(np.dot(emitted, emitted))

        trace = StepTrace(
            step=state.k,
            start=int(start),
            end=int(end),
            emitted=int(emit),
            speaker_slots_before=before[0],
            contextual_slots_before=before[1],
            speaker_slots_after=0,
            contextual_slots_after=0,
            slot_scores=scores,
            slot_fingerprint={},
            raw_energy=raw_energy,
            prev_energy=prev_energy,
            output_energy=float(np.dot(normalized, normalized)),
            cumulative_energy=state.cumulative_energy,
            reset=reset,
            wall_s=0.0,
            saturated=saturated,
        )
        state.trace.append(trace)
        state.k += 1
        return normalized, emitted, trace

    def _close_trace(self, state, trace, started):
        trace.speaker_slots_after, trace.contextual_slots_after = self._sizes(state)
        trace.slot_fingerprint = self._fingerprint(state)
        trace.wall_s = time.perf_counter() - started

    def init_step(
        self,
        state: StreamState,
        mixture_window,
        cue_window,
        pre_enrolled=None,
        target_window=None,
    ) -> np.ndarray:
        """Cue-only (or cue + pre-enrolled) extraction of the first T_init samples"""
        started = time.perf_counter()
        cfg = self.cfg
        if state.k != 0:
            raise InvalidArgumentError("init_step runs once, at k = 0")
        if len(mixture_window) != cfg.T_init:
            raise InvalidArgumentError(
                f"init window has {len(mixture_window)} samples, expected {cfg.T_init}"
            )
        has_banks = bool(state.banks())
        if pre_enrolled is None and (
            cfg.init_mode == VP_INIT or (cfg.eval_setting == PRE_ENRO and has_banks)
        ):
            raise InvalidArgumentError(f"{cfg.init_mode}/{cfg.eval_setting} needs pre-enrolled speech")
        if cfg.eval_setting == TGT_ENRO and has_banks and target_window is None:
            raise InvalidArgumentError("TgtEnro needs the target window")

        speaker_feature = None
        if cfg.init_mode == VP_INIT:
            length = latent_length(cfg.T_init, self.model.hop)
            speaker_feature = self._init_speaker_feature(pre_enrolled, length)

        before = self._sizes(state)
        estimate, scores = self._extract(state, mixture_window, cue_window, speaker_feature)
        normalized, emitted, trace = self._finish(
            state, estimate, cfg.T_init, 0, cfg.T_init, scores, before, False
        )

        if cfg.eval_setting == SELF_ENRO:
            self._store(state, _tail(normalized, cfg.self_enroll_len))
        elif cfg.eval_setting == PRE_ENRO:
            self._store(state, np.asarray(pre_enrolled))
        elif cfg.eval_setting == TGT_ENRO:
            self._store(state, _tail(np.asarray(target_window), cfg.self_enroll_len))
        self._close_trace(state, trace, started)
        return emitted

    def step(
        self,
        state: StreamState,
        mixture_window,
        cue_window,
        start: int = 0,
        emit: Optional[int] = None,
        target_window=None,
        reset: bool = False,
    ) -> np.ndarray:
        """One T_win window; returns the newly emitted samples (T_sh unless `emit`)"""
        started = time.perf_counter()
        cfg = self.cfg
        if state.k < 1:
            raise InvalidArgumentError("step needs a completed init_step")
        if len(mixture_window) != cfg.T_win:
            raise InvalidArgumentError(
                f"window has {len(mixture_window)} samples, expected {cfg.T_win}"
            )
        emit = cfg.T_sh if emit is None else int(emit)
        if not 1 <= emit <= cfg.T_win:
            raise InvalidArgumentError(f"cannot emit {emit} samples from one window")

        if reset:
            for bank in state.banks():
                bank.reset()
            state.reset_step = state.k
            print_logger(f"Memory banks emptied at step {state.k}")

        if cfg.eval_setting == TGT_ENRO and state.banks():
            if target_window is None:
                raise InvalidArgumentError("TgtEnro needs the target window")
            self._store(state, _tail(np.asarray(target_window), cfg.self_enroll_len))

        before = self._sizes(state)
        estimate, scores = self._extract(state, mixture_window, cue_window)
        normalized, emitted, trace = self._finish(
            state, estimate, emit, start, start + cfg.T_win, scores, before, reset
        )
        if cfg.eval_setting == SELF_ENRO:
            self._store(state, _tail(normalized, cfg.self_enroll_len))
        self._close_trace(state, trace, started)
        return emitted


# %%
# Functions: Runs #


def _samples(wave) -> np.ndarray:
    return wave.samples if isinstance(wave, Waveform) else np.asarray(wave, dtype=np.float64)


def window_schedule(num_samples: int, cfg: StreamConfig):
    """(start, end, emit) for every step after init; the last one may emit a remainder"""
    if num_samples < cfg.T_init:
        raise InvalidArgumentError(
            f"stream of {num_samples} samples is shorter than T_init {cfg.T_init}"
        )
    schedule = []
    end = cfg.T_init + cfg.T_sh
    while end <= num_samples:
        schedule.append((end - cfg.T_win, end, cfg.T_sh))
        end += cfg.T_sh
    remainder = num_samples - (end - cfg.T_sh)
    if remainder > 0:
        schedule.append((num_samples - cfg.T_win, num_samples, remainder))
    return schedule


def run_stream(
    model: MomentumExtractor,
    mixture,
    cues: CueStream,
    cfg: StreamConfig,
    pre_enrolled=None,
    target=None,
    switch_sample: Optional[int] = None,
) -> StreamResult:
    """Online extraction of a whole mixture"""
    mixture = _samples(mixture)
    pre = None if pre_enrolled is None else _samples(pre_enrolled)
    target_samples = None if target is None else _samples(target)
    if cfg.eval_setting == TGT_ENRO and target_samples is None:
        raise InvalidArgumentError("TgtEnro needs the ground-truth target")
    if cfg.eval_setting == PRE_ENRO and pre is None:
        raise InvalidArgumentError("PreEnro needs pre-enrolled speech")

    engine = StreamEngine(model, cfg)
    state = engine.new_state()
    schedule = window_schedule(mixture.size, cfg)
    reset_at = None
    if cfg.empty_on_switch and switch_sample is not None and switch_sample < mixture.size:
        reset_at = reset_step_index(switch_sample, cfg.T_init, cfg.T_sh)

    def target_slice(start, end):
        return None if target_samples is None else target_samples[start:end]

    engine.init_step(
        state,
        mixture[: cfg.T_init],
        cues.window(0, cfg.T_init, use_clean=cfg.clean_init),
        pre_enrolled=pre,
        target_window=target_slice(0, cfg.T_init),
    )
    for step_index, (start, end, emit) in enumerate(schedule, start=1):
        engine.step(
            state,
            mixture[start:end],
            cues.window(start, end),
            start=start,
            emit=emit,
            target_window=target_slice(start, end),
            reset=step_index == reset_at,
        )

    estimate = Waveform(state.emitted_samples())
    processing_s = sum(item.wall_s for item in state.trace)
    return StreamResult(estimate, state.trace, processing_s, state.reset_step)


def run_switch_stream(
    model: MomentumExtractor, mixture, cues: CueStream, cfg: StreamConfig, **kwargs
) -> StreamResult:
    """run_stream with the Empty strategy keyed by the cue stream's switch time"""
    if cues.switch_time_s is None:
        raise InvalidArgumentError("cue stream carries no switch time")
    switch_sample = int(round(cues.switch_time_s * AUDIO_RATE))
    return run_stream(model, mixture, cues, cfg, switch_sample=switch_sample, **kwargs)


@torch.no_grad()
def run_offline(
    model: MomentumExtractor,
    mixture,
    cues: CueStream,
    cfg: StreamConfig,
    pre_enrolled=None,
    target=None,
) -> StreamResult:
    """Whole utterance as one window; SelfEnro composes two passes"""
    started = time.perf_counter()
    mixture = _samples(mixture)
    engine = StreamEngine(model, cfg)
    state = engine.new_state()
    num_samples = mixture.size
    frames = cues.frames

    speaker_feature = None
    if cfg.init_mode == VP_INIT:
        if pre_enrolled is None:
            raise InvalidArgumentError("VP_Init needs pre-enrolled speech")
        speaker_feature = engine._init_speaker_feature(
            _samples(pre_enrolled), latent_length(num_samples, model.hop)
        )

    def store(reference):
        wave = engine._tensor(reference)
        if state.speaker_bank is not None:
            state.speaker_bank.store(model.embed_speaker(wave))
        if state.contextual_bank is not None:
            state.contextual_bank.store(model.embed_context(wave, num_samples))

    passes = 1
    if state.banks():
        if cfg.eval_setting == SELF_ENRO:
            first, _ = engine._extract(state, mixture, frames, speaker_feature)
            store(first)
            passes = 2
        elif cfg.eval_setting == PRE_ENRO:
            if pre_enrolled is None:
                raise InvalidArgumentError("PreEnro needs pre-enrolled speech")
            store(_samples(pre_enrolled))
        elif cfg.eval_setting == TGT_ENRO:
            if target is None:
                raise InvalidArgumentError("TgtEnro needs the ground-truth target")
            store(_samples(target))

    estimate, scores = engine._extract(state, mixture, frames, speaker_feature)
    wall_s = time.perf_counter() - started
    energy = float(np.dot(estimate, estimate))
    trace = StepTrace(
        step=0,
        start=0,
        end=num_samples,
        emitted=num_samples,
        speaker_slots_before=engine._sizes(state)[0],
        contextual_slots_before=engine._sizes(state)[1],
        speaker_slots_after=engine._sizes(state)[0],
        contextual_slots_after=engine._sizes(state)[1],
        slot_scores={**scores, "passes": passes},
        slot_fingerprint=engine._fingerprint(state),
        raw_energy=energy,
        prev_energy=0.0,
        output_energy=energy,
        cumulative_energy=energy,
        reset=False,
        wall_s=wall_s,
    )
    return StreamResult(Waveform(estimate), [trace], wall_s)


def measure_rtf(result: StreamResult) -> float:
    """Processing seconds per second of speech"""
    if result.duration_s <= 0:
        raise InvalidArgumentError("cannot measure RTF of an empty run")
    return result.processing_s / result.duration_s


# %%
# Main #

if __name__ == "__main__":
    from signals import MixtureSpec, build_mixture

    bundle = build_mixture(MixtureSpec("spk_0", "spk_1", duration_s=4.0, seed=3))
    result = run_stream(MomentumExtractor(), bundle.mixture, bundle.cues, StreamConfig())
    print(f"steps: {len(result.trace)}, RTF: {measure_rtf(result):.3f}")


# %%
