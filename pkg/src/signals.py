# %%
# Imports #

import math
from dataclasses import asdict, dataclass
from typing import Optional, Sequence, Tuple, Union

import numpy as np
from scipy.ndimage import uniform_filter1d

from config import AUDIO_RATE, CUE_DIM, FRAME_RATE
from errors import InvalidArgumentError


# %%
# Vars #

CLEAN = "clean"
IMPAIRMENT_TYPES = ("missing", "occluded", "low_res")

# one synthesis band; neighbouring speakers sit two bands apart
SYNTH_BAND_HZ = 450.0
FORMANT_BASE_HZ = 400.0
FORMANT_SIGMA_HZ = 160.0
TARGET_RMS = 0.1

CUE_SCALE = 1.0 / TARGET_RMS
OCCLUSION_WEIGHT = 0.7
LOW_RES_KERNEL = 5
LOW_RES_LEVELS = 4
LOW_RES_NOISE_STD = 0.5

SPLITS = ("train", "val", "test")
# train/val degrade low-res frames by noise or blur, test by down-sampling
TRAIN_LOW_RES_METHODS = ("noise", "blur")
TEST_LOW_RES_METHOD = "downsample"
# occluder 0 only ever appears in the test split
OCCLUDER_FREQS = (0.75, 0.35, 0.55, 0.9)
TEST_OCCLUDER = 0
TRAIN_DURATION_RANGE_S = (4.0, 6.0)

SNR_RANGE_DB = (-10.0, 10.0)
SWITCH_RANGE_S = (4.0, 6.0)
MIN_SWITCH_DURATION_S = 10.0

SpeakerId = Union[str, int]


# %%
# Types #


@dataclass(frozen=True, eq=False)
class Waveform:
    """Mono sample sequence at a fixed audio rate"""

    samples: np.ndarray
    rate: int = AUDIO_RATE

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim != 1 or samples.size < 1:
            raise InvalidArgumentError("waveform must be a non-empty 1-D sequence")
        if not np.all(np.isfinite(samples)):
            raise InvalidArgumentError("waveform contains non-finite samples")
        if self.rate <= 0:
            raise InvalidArgumentError(f"invalid sample rate {self.rate}")
        object.__setattr__(self, "samples", samples)

    def __len__(self):
        return self.samples.size

    @property
    def duration_s(self) -> float:
        return self.samples.size / self.rate

    @property
    def energy(self) -> float:
        return float(np.dot(self.samples, self.samples))

    def segment(self, start: int, end: int) -> "Waveform":
        return Waveform(self.samples[start:end], self.rate)


@dataclass(eq=False)
class CueStream:
    """Frame-rate cue features standing in for lip frames.

    `frames` is what the extractor sees, `clean_frames` keeps the
    pre-impairment features so a clean initialization window can be served.
    """

    frames: np.ndarray
    frame_rate: float = FRAME_RATE
    impairment_mask: Optional[np.ndarray] = None
    clean_frames: Optional[np.ndarray] = None
    switch_time_s: Optional[float] = None

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        if self.frames.ndim != 2 or self.frames.shape[0] < 1:
            raise InvalidArgumentError("cue frames must be a non-empty (F, D) matrix")
        if self.impairment_mask is None:
            self.impairment_mask = np.full(self.frames.shape[0], CLEAN, dtype="<U8")
        self.impairment_mask = np.asarray(self.impairment_mask, dtype="<U8")
        if self.impairment_mask.shape != (self.frames.shape[0],):
            raise InvalidArgumentError("every cue frame needs exactly one label")
        if self.clean_frames is None:
            self.clean_frames = self.frames.copy()
        self.clean_frames = np.asarray(self.clean_frames, dtype=np.float64)
        if self.clean_frames.shape != self.frames.shape:
            raise InvalidArgumentError("clean_frames must match frames")

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def dim(self) -> int:
        return self.frames.shape[1]

    @property
    def impaired_fraction(self) -> float:
        return float(np.mean(self.impairment_mask != CLEAN))

    def window(
        self, start_sample: int, end_sample: int, audio_rate=AUDIO_RATE, use_clean=False
    ) -> np.ndarray:
        """Frames covering samples [start_sample, end_sample)"""
        source = self.clean_frames if use_clean else self.frames
        first = int(math.floor(start_sample * self.frame_rate / audio_rate))
        count = int(math.floor((end_sample - start_sample) * self.frame_rate / audio_rate))
        first = min(max(first, 0), self.num_frames - 1)
        count = max(count, 1)
        return source[first : min(first + count, self.num_frames)]

    def with_clean_frames(self) -> "CueStream":
        return CueStream(
            frames=self.clean_frames.copy(),
            frame_rate=self.frame_rate,
            clean_frames=self.clean_frames.copy(),
            switch_time_s=self.switch_time_s,
        )


@dataclass(frozen=True)
class MixtureSpec:
    target_id: str
    interferer_id: str
    snr_db: float = 0.0
    duration_s: float = 4.0
    impairment_ratio: float = 0.0
    impairment_type: str = "missing"
    seed: int = 0
    protect_prefix_s: float = 0.0
    impairment_runs: int = 1
    split: str = "test"

    def __post_init__(self):
        if str(self.target_id) == str(self.interferer_id):
            raise InvalidArgumentError("target and interferer must differ")
        if not SNR_RANGE_DB[0] <= self.snr_db <= SNR_RANGE_DB[1]:
            raise InvalidArgumentError(f"snr_db {self.snr_db} outside {SNR_RANGE_DB}")
        if self.duration_s <= 0:
            raise InvalidArgumentError("duration_s must be positive")
        if self.split not in SPLITS:
            raise InvalidArgumentError(f"unknown split {self.split!r}")
        _check_impairment(self.impairment_type, self.impairment_ratio)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class SwitchSpec:
    speaker_a: str
    speaker_b: str
    interferer: str
    switch_time_s: float = 5.0
    total_duration_s: float = 12.0
    post_switch_clean_s: float = 1.0
    seed: int = 0
    snr_db: float = 0.0
    impairment_type: str = "missing"
    impairment_ratio: float = 0.0
    protect_prefix_s: float = 0.0

    def __post_init__(self):
        ids = {str(self.speaker_a), str(self.speaker_b), str(self.interferer)}
        if len(ids) != 3:
            raise InvalidArgumentError("switch speakers and interferer must be distinct")
        if not SWITCH_RANGE_S[0] <= self.switch_time_s <= SWITCH_RANGE_S[1]:
            raise InvalidArgumentError(
                f"switch_time_s {self.switch_time_s} outside {SWITCH_RANGE_S}"
            )
        if self.total_duration_s < MIN_SWITCH_DURATION_S:
            raise InvalidArgumentError("switch mixtures last at least 10 seconds")
        if self.post_switch_clean_s < 0:
            raise InvalidArgumentError("post_switch_clean_s must be non-negative")
        if not SNR_RANGE_DB[0] <= self.snr_db <= SNR_RANGE_DB[1]:
            raise InvalidArgumentError(f"snr_db {self.snr_db} outside {SNR_RANGE_DB}")
        _check_impairment(self.impairment_type, self.impairment_ratio)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(eq=False)
class MixtureBundle:
    spec: MixtureSpec
    mixture: Waveform
    target: Waveform
    interferer: Waveform
    cues: CueStream
    pre_enrolled: Waveform


@dataclass(eq=False)
class SwitchBundle:
    spec: SwitchSpec
    mixture: Waveform
    reference: Waveform
    interferer: Waveform
    cues: CueStream
    switch_sample: int


@dataclass(frozen=True)
class SpeakerVoice:
    f0_hz: float
    formant_hz: float


# %%
# Functions: Validation #


def _check_impairment(impairment_type, ratio):
    if impairment_type not in IMPAIRMENT_TYPES:
        raise InvalidArgumentError(f"unknown impairment type {impairment_type!r}")
    if not 0.0 <= ratio < 1.0:
        raise InvalidArgumentError(f"impairment ratio {ratio} outside [0, 1)")


def speaker_index(speaker_id: SpeakerId) -> int:
    if isinstance(speaker_id, (int, np.integer)):
        index = int(speaker_id)
    else:
        text = str(speaker_id)
        digits = text.rsplit("_", 1)[-1]
        if not digits.isdigit():
            raise InvalidArgumentError(f"speaker id {speaker_id!r} is not spk_<n>")
        index = int(digits)
    if index < 0:
        raise InvalidArgumentError(f"negative speaker index {index}")
    return index


def speaker_name(index: int) -> str:
    return f"spk_{index}"


# %%
# Functions: Synthesis #


def speaker_voice(speaker_id: SpeakerId) -> SpeakerVoice:
    """Fixed per-speaker generator parameters"""
    index = speaker_index(speaker_id)
    formant = (
        FORMANT_BASE_HZ
        + 2 * SYNTH_BAND_HZ * (index % 8)
        + SYNTH_BAND_HZ * ((index // 8) % 2)
    )
    f0 = 95.0 + 12.0 * (index % 7) + 5.0 * ((index // 8) % 2)
    return SpeakerVoice(f0_hz=f0, formant_hz=formant)


def _syllable_envelope(n, rate, rng):
    envelope = np.zeros(n)
    pos = int(rng.uniform(0.0, 0.1) * rate)
    while pos < n:
        syllable = int(rng.uniform(0.12, 0.3) * rate)
        gap = int(rng.uniform(0.04, 0.15) * rate)
        envelope[pos : pos + syllable] = rng.uniform(0.5, 1.0)
        pos += syllable + gap

    width = max(int(0.02 * rate), 1)
    window = np.hanning(width + 2)[1:-1]
    window /= window.sum()
    return np.convolve(envelope, window, mode="same")


def synth_speaker(
    speaker_id: SpeakerId, duration_s: float, seed: int, rate: int = AUDIO_RATE
) -> Waveform:
    """Band-limited harmonic voice with a syllabic envelope"""
    if duration_s <= 0:
        raise InvalidArgumentError("duration_s must be positive")
    n = int(round(duration_s * rate))
    if n < 1:
        raise InvalidArgumentError("duration_s shorter than one sample")

    index = speaker_index(speaker_id)
    voice = speaker_voice(index)
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), index]))

    t = np.arange(n) / rate
    vibrato = 1.0 + 0.03 * np.sin(
        2 * np.pi * rng.uniform(2.0, 5.0) * t + rng.uniform(0, 2 * np.pi)
    )
    f0_track = voice.f0_hz * rng.uniform(0.97, 1.03) * vibrato
    phase = 2 * np.pi * np.cumsum(f0_track) / rate

    low = max(1, int(math.floor((voice.formant_hz - 3 * FORMANT_SIGMA_HZ) / voice.f0_hz)))
    high = int(math.ceil((voice.formant_hz + 3 * FORMANT_SIGMA_HZ) / voice.f0_hz))
    signal = np.zeros(n)
    for harmonic in range(low, high + 1):
        weight = math.exp(
            -0.5 * ((harmonic * voice.f0_hz - voice.formant_hz) / FORMANT_SIGMA_HZ) ** 2
        )
        signal += weight * np.sin(harmonic * phase + rng.uniform(0, 2 * np.pi))

    signal *= _syllable_envelope(n, rate, rng)
    rms = math.sqrt(float(np.mean(signal**2)))
    if rms > 0:
        signal *= TARGET_RMS / rms
    return Waveform(signal, rate)


# %%
# Functions: Mixing #


def interferer_gain(target: Waveform, interferer: Waveform, snr_db: float) -> float:
    p_target = float(np.mean(target.samples**2))
    p_interferer = float(np.mean(interferer.samples**2))
    if p_target == 0:
        raise InvalidArgumentError("target has zero power")
    if p_interferer == 0:
        raise InvalidArgumentError("interferer has zero power")
    return math.sqrt(p_target / (p_interferer * 10 ** (snr_db / 10.0)))


def mix_at_snr(target: Waveform, interferer: Waveform, snr_db: float) -> Waveform:
    if len(target) != len(interferer) or target.rate != interferer.rate:
        raise InvalidArgumentError("target and interferer must share length and rate")
    gain = interferer_gain(target, interferer, snr_db)
    return Waveform(target.samples + gain * interferer.samples, target.rate)


# %%
# Functions: Cues #


def derive_cues(target: Waveform, frame_rate: float = FRAME_RATE) -> CueStream:
    """Envelope and coarse band-share features, one vector per cue frame"""
    span = target.rate / frame_rate
    if span != int(span):
        raise InvalidArgumentError("frame rate must divide the audio rate")
    span = int(span)
    n_frames = int(math.floor(len(target) * frame_rate / target.rate))
    if n_frames < 1:
        raise InvalidArgumentError("waveform shorter than one cue frame")

    chunks = target.samples[: n_frames * span].reshape(n_frames, span)
    rms = np.sqrt(np.mean(chunks**2, axis=1))
    delta = np.diff(rms, prepend=0.0)

    power = np.abs(np.fft.rfft(chunks * np.hanning(span), axis=1)) ** 2
    bands = np.array_split(power, CUE_DIM - 2, axis=1)
    band_power = np.stack([band.sum(axis=1) for band in bands], axis=1)
    total = band_power.sum(axis=1, keepdims=True)
    share = np.divide(band_power, total, out=np.zeros_like(band_power), where=total > 0)

    frames = np.concatenate([rms[:, None], delta[:, None], np.sqrt(share) * rms[:, None]], axis=1)
    return CueStream(frames=frames * CUE_SCALE, frame_rate=frame_rate)


def _protected_frames(total, frame_rate, protect_prefix_s, protect_spans_s):
    protected = np.zeros(total, dtype=bool)
    prefix = int(math.ceil(protect_prefix_s * frame_rate - 1e-9))
    protected[: min(prefix, total)] = True
    for start_s, end_s in protect_spans_s:
        first = max(int(math.floor(start_s * frame_rate + 1e-9)), 0)
        last = min(int(math.ceil(end_s * frame_rate - 1e-9)), total)
        protected[first:last] = True
    return protected


def _schedule_runs(n_eligible, n_bad, runs, rng):
    """Positions (into the eligible frame list) of `runs` contiguous runs"""
    runs = max(1, min(runs, n_bad))
    free = n_eligible - n_bad
    cuts = np.sort(rng.integers(0, free + 1, size=runs))
    gaps = np.diff(np.concatenate([[0], cuts, [free]]))
    lengths = [len(part) for part in np.array_split(np.arange(n_bad), runs)]

    positions = []
    pos = 0
    for run in range(runs):
        pos += int(gaps[run])
        positions.extend(range(pos, pos + lengths[run]))
        pos += lengths[run]
    return np.asarray(positions, dtype=int)


def _occluder_pattern(dim, rng, split="test"):
    if split == "test":
        occluder = TEST_OCCLUDER
    else:
        occluder = 1 + int(rng.integers(len(OCCLUDER_FREQS) - 1))
    freq = OCCLUDER_FREQS[occluder]
    pattern = np.cos(np.pi * freq * np.arange(dim)) + 0.5 * np.sin((1 + occluder) * np.arange(dim))
    return np.roll(pattern, int(rng.integers(dim)))


def _occlude(frames, chosen, rng, split="test"):
    out = frames.copy()
    pattern = _occluder_pattern(frames.shape[1], rng, split)
    norms = np.linalg.norm(frames, axis=1)
    floor = float(norms[norms > 0].mean()) if np.any(norms > 0) else 1.0
    for index in chosen:
        clean = frames[index]
        norm = norms[index]
        distractor = pattern.copy()
        if norm > 0:
            unit = clean / norm
            distractor = distractor - np.dot(distractor, unit) * unit
        if np.linalg.norm(distractor) < 1e-12:
            distractor = np.roll(pattern, 1)
        distractor /= np.linalg.norm(distractor)
        scale = norm if norm > 0 else floor
        out[index] = (1 - OCCLUSION_WEIGHT) * clean + OCCLUSION_WEIGHT * scale * distractor
    return out


def low_res_method(split: str, rng) -> str:
    if split == "test":
        return TEST_LOW_RES_METHOD
    return TRAIN_LOW_RES_METHODS[int(rng.integers(len(TRAIN_LOW_RES_METHODS)))]


def _low_resolution(frames, chosen, method, rng):
    out = frames.copy()
    if method == "noise":
        frame_rms = np.linalg.norm(frames[chosen], axis=1, keepdims=True) / np.sqrt(frames.shape[1])
        level = LOW_RES_NOISE_STD * frame_rms
        out[chosen] = frames[chosen] + level * rng.standard_normal(frames[chosen].shape)
        return out

    smoothed = uniform_filter1d(frames, size=LOW_RES_KERNEL, axis=0, mode="nearest")
    if method == "blur":
        out[chosen] = smoothed[chosen]
        return out
    step = max(float(np.abs(smoothed).max()) / LOW_RES_LEVELS, 1e-12)
    quantized = np.round(smoothed / step) * step
    out[chosen] = quantized[chosen]
    return out


def apply_impairment(
    cues: CueStream,
    impairment_type: str,
    ratio: float,
    seed: int,
    protect_prefix_s: float = 0.0,
    protect_spans_s: Sequence[Tuple[float, float]] = (),
    runs: int = 1,
    split: str = "test",
) -> CueStream:
    """Corrupt round-half-up(ratio * eligible) frames outside the protected spans.

    Low-resolution frames are noised or blurred for train/val and down-sampled for
    test; occluded frames in test use an occluder never seen in train/val.
    """
    _check_impairment(impairment_type, ratio)
    if protect_prefix_s < 0:
        raise InvalidArgumentError("protect_prefix_s must be non-negative")
    if runs < 1:
        raise InvalidArgumentError("runs must be at least 1")
    if split not in SPLITS:
        raise InvalidArgumentError(f"unknown split {split!r}")

    total = cues.num_frames
    protected = _protected_frames(total, cues.frame_rate, protect_prefix_s, protect_spans_s)
    eligible = np.flatnonzero(~protected)
    n_bad = int(math.floor(ratio * eligible.size + 0.5))

    frames = cues.frames.copy()
    mask = cues.impairment_mask.copy()
    if n_bad > 0:
        rng = np.random.default_rng(seed)
        chosen = eligible[_schedule_runs(eligible.size, n_bad, runs, rng)]
        if impairment_type == "missing":
            frames[chosen] = 0.0
        elif impairment_type == "occluded":
            frames = _occlude(frames, chosen, rng, split)
        else:
            frames = _low_resolution(frames, chosen, low_res_method(split, rng), rng)
        mask[chosen] = impairment_type

    return CueStream(
        frames=frames,
        frame_rate=cues.frame_rate,
        impairment_mask=mask,
        clean_frames=cues.clean_frames.copy(),
        switch_time_s=cues.switch_time_s,
    )


# %%
# Functions: Bundles #


def _role_seed(seed, role):
    return int(seed) * 4 + role


def build_mixture(spec: MixtureSpec, rate: int = AUDIO_RATE) -> MixtureBundle:
    target = synth_speaker(spec.target_id, spec.duration_s, _role_seed(spec.seed, 0), rate)
    raw_interferer = synth_speaker(
        spec.interferer_id, spec.duration_s, _role_seed(spec.seed, 1), rate
    )
    pre_enrolled = synth_speaker(
        spec.target_id, spec.duration_s, _role_seed(spec.seed, 2), rate
    )

    gain = interferer_gain(target, raw_interferer, spec.snr_db)
    interferer = Waveform(gain * raw_interferer.samples, rate)
    mixture = Waveform(target.samples + interferer.samples, rate)

    cues = apply_impairment(
        derive_cues(target),
        spec.impairment_type,
        spec.impairment_ratio,
        seed=_role_seed(spec.seed, 3),
        protect_prefix_s=spec.protect_prefix_s,
        runs=spec.impairment_runs,
        split=spec.split,
    )
    return MixtureBundle(
        spec=spec,
        mixture=mixture,
        target=target,
        interferer=interferer,
        cues=cues,
        pre_enrolled=pre_enrolled,
    )


def build_switch_mixture(spec: SwitchSpec, rate: int = AUDIO_RATE) -> SwitchBundle:
    """Target switches from speaker A to speaker B while the interferer keeps talking"""
    speaker_a = synth_speaker(spec.speaker_a, spec.total_duration_s, _role_seed(spec.seed, 0), rate)
    speaker_b = synth_speaker(spec.speaker_b, spec.total_duration_s, _role_seed(spec.seed, 1), rate)
    raw_interferer = synth_speaker(
        spec.interferer, spec.total_duration_s, _role_seed(spec.seed, 2), rate
    )

    switch_sample = int(round(spec.switch_time_s * rate))
    piecewise = np.concatenate(
        [speaker_a.samples[:switch_sample], speaker_b.samples[switch_sample:]]
    )
    reference = Waveform(piecewise, rate)

    gain = interferer_gain(reference, raw_interferer, spec.snr_db)
    interferer = Waveform(gain * raw_interferer.samples, rate)
    mixture = Waveform(reference.samples + interferer.samples, rate)

    clean_span = (spec.switch_time_s, spec.switch_time_s + spec.post_switch_clean_s)
    cues = apply_impairment(
        derive_cues(reference),
        spec.impairment_type,
        spec.impairment_ratio,
        seed=_role_seed(spec.seed, 3),
        protect_prefix_s=spec.protect_prefix_s,
        protect_spans_s=[clean_span],
    )
    cues.switch_time_s = spec.switch_time_s
    return SwitchBundle(
        spec=spec,
        mixture=mixture,
        reference=reference,
        interferer=interferer,
        cues=cues,
        switch_sample=switch_sample,
    )


# %%
# Main #

if __name__ == "__main__":
    bundle = build_mixture(
        MixtureSpec("spk_0", "spk_1", snr_db=0.0, impairment_ratio=0.5, seed=7)
    )
    print(f"mixture samples: {len(bundle.mixture)}")
    print(f"cue frames: {bundle.cues.num_frames}, impaired: {bundle.cues.impaired_fraction:.2f}")


# %%
