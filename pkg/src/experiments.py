# %%
# Running Imports #

import json
import os
from dataclasses import dataclass, fields, replace
from typing import Dict, List, Optional, Tuple

import numpy as np
import pandas as pd
import torch
from dotenv import dotenv_values
from readable_utils.display_tools import pprint_df, print_logger  # noqa F401
from tqdm import tqdm

from config import AUDIO_RATE, FRAME_RATE
from data_storage import RunStorage
from encoders import EncoderConfig
from errors import ConfigError, InvalidArgumentError
from extractor import ExtractorConfig
from metrics import aggregate_reports, score, segmental_si_snr
from momentum_model import MomentumExtractor, ModelConfig
from signals import (
    IMPAIRMENT_TYPES,
    SNR_RANGE_DB,
    TRAIN_DURATION_RANGE_S,
    MixtureSpec,
    SwitchSpec,
    build_mixture,
    build_switch_mixture,
    speaker_name,
)
from streaming import (
    EVAL_SETTINGS,
    VISUAL_ONLY,
    StreamConfig,
    measure_rtf,
    run_offline,
    run_stream,
    run_switch_stream,
)
from training import TrainConfig, train

ENV_PREFIX = "MEMO_"
SCENARIOS = ("clean", "impaired")
MODES = ("offline", "online")
SWEEP_AXES = ("slots", "window", "shift", "ratio", "self_enroll", "init", "beta")


# %%
# Config #


@dataclass(frozen=True)
class ExperimentConfig:
    """Every key of the experiment file; keys are the field names in upper case"""

    run_name: str = "default"
    overwrite: bool = False
    seed: int = 0

    # dataset
    n_train_speakers: int = 8
    n_test_speakers: int = 4
    n_train: int = 512
    n_val: int = 64
    n_test: int = 64
    n_switch: int = 16
    duration_s: float = 4.0
    train_duration_range_s: Tuple[float, ...] = TRAIN_DURATION_RANGE_S
    switch_duration_s: float = 12.0
    snr_range_db: Tuple[float, ...] = SNR_RANGE_DB
    train_ratio_max: float = 0.8
    test_ratio_max: float = 1.0
    test_protect_prefix_s: float = 0.0

    # model / training
    channels: int = 64
    bank_modes: Tuple[str, ...] = ("none", "speaker", "contextual")
    init_mode: str = "V_Init"
    loss_beta: float = 0.2
    lr: float = 1e-3
    max_epochs: int = 100
    ep_cr: int = 50
    batch_size: int = 8
    max_slots: int = 5
    max_shift_s: float = 1.0
    detach_stage1: bool = False
    energy_mode: str = "literal"
    speaker_pretrain_epochs: int = 5
    resume: bool = False

    # streaming
    win_s: float = 2.0
    shift_s: float = 0.2
    init_s: float = 2.0
    gamma: float = 0.7
    capacity: int = 1
    policy: str = "fifo"
    self_enroll_s: float = 2.0
    clean_init: bool = True

    # eval and sweeps
    eval_max_items: int = 64
    export_items: int = 4
    sweep_model: str = "contextual"
    sweep_axes: Tuple[str, ...] = ("slots", "window", "shift", "ratio", "self_enroll", "init")
    sweep_slots: Tuple[str, ...] = ("1:fifo", "2:fifo", "4:fifo", "4:abs")
    sweep_win_s: Tuple[float, ...] = (1.0, 2.0, 3.0)
    sweep_shift_s: Tuple[float, ...] = (0.1, 0.2, 0.4)
    sweep_ratio_bins: Tuple[float, ...] = (0.0, 0.2, 0.4, 0.6, 0.8, 1.0)
    sweep_self_enroll_s: Tuple[float, ...] = (0.5, 1.0, 2.0)
    sweep_betas: Tuple[float, ...] = (0.0, 0.2, 0.5, 0.8, 1.0)
    sweep_beta_epochs: int = 5
    sweep_max_items: int = 16
    segment_boundaries_s: Tuple[float, ...] = (0.0, 2.0, 4.0, 8.0, 12.0, 16.0)

    def __post_init__(self):
        for mode in self.bank_modes:
            if mode not in ("none", "speaker", "contextual", "both"):
                raise ConfigError(f"unknown bank mode {mode!r}")
        for axis in self.sweep_axes:
            if axis not in SWEEP_AXES:
                raise ConfigError(f"unknown sweep axis {axis!r}")
        if self.n_test_speakers < 2 or self.n_train_speakers < 2:
            raise ConfigError("each speaker pool needs at least two speakers")
        if len(self.snr_range_db) != 2 or self.snr_range_db[0] > self.snr_range_db[1]:
            raise ConfigError("SNR_RANGE_DB takes two ascending values")
        if self.snr_range_db[0] < SNR_RANGE_DB[0] or self.snr_range_db[1] > SNR_RANGE_DB[1]:
            raise ConfigError(f"SNR_RANGE_DB must lie within {SNR_RANGE_DB}")
        durations = self.train_duration_range_s
        if len(durations) != 2 or not 0 < durations[0] <= durations[1]:
            raise ConfigError("TRAIN_DURATION_RANGE_S takes two ascending positive values")

    def train_config(self, bank_mode: str, **overrides) -> TrainConfig:
        values = dict(
            init_mode=self.init_mode,
            bank_mode=bank_mode,
            loss_beta=self.loss_beta,
            slots_range=(1, self.max_slots),
            shift_range=(0, int(round(self.max_shift_s * AUDIO_RATE))),
            lr=self.lr,
            max_epochs=self.max_epochs,
            ep_cr=self.ep_cr,
            batch_size=self.batch_size,
            detach_stage1=self.detach_stage1,
            energy_mode=self.energy_mode,
            seed=self.seed,
            speaker_pretrain_epochs=self.speaker_pretrain_epochs,
        )
        values.update(overrides)
        try:
            return TrainConfig(**values)
        except InvalidArgumentError as e:
            raise ConfigError(str(e)) from e

    def stream_config(self, **overrides) -> StreamConfig:
        values = dict(
            win_s=self.win_s,
            shift_s=self.shift_s,
            init_s=self.init_s,
            self_enroll_s=self.self_enroll_s,
            gamma=self.gamma,
            speaker_capacity=self.capacity,
            contextual_capacity=self.capacity,
            policy=self.policy,
            init_mode=self.init_mode,
            clean_init=self.clean_init,
            energy_mode=self.energy_mode,
        )
        values.update(overrides)
        try:
            return StreamConfig.from_seconds(**values)
        except (InvalidArgumentError, ValueError) as e:
            raise ConfigError(str(e)) from e

    def model_config(self, bank_mode: str) -> ModelConfig:
        return ModelConfig(
            encoder=EncoderConfig(channels=self.channels),
            extractor=ExtractorConfig(channels=self.channels),
            bank_mode=bank_mode,
        )


def _parse_value(raw: str, default):
    raw = raw.strip()
    if isinstance(default, bool):
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    if isinstance(default, tuple):
        element = default[0] if default else ""
        return tuple(_parse_value(part, element) for part in raw.split(",") if part.strip())
    return raw


def load_experiment_config(path: Optional[str] = None, environ=None) -> ExperimentConfig:
    """KEY=value file, then MEMO_KEY environment overrides"""
    defaults = {f.name: f.default for f in fields(ExperimentConfig)}
    raw_values = {}
    if path is not None:
        if not os.path.exists(path):
            raise ConfigError(f"config file {path} does not exist")
        raw_values.update({k.lower(): v for k, v in dotenv_values(path).items()})
    environ = os.environ if environ is None else environ
    for key, value in environ.items():
        if not key.startswith(ENV_PREFIX):
            continue
        name = key[len(ENV_PREFIX) :].lower()
        # MEMO_ variables that are not config keys (e.g. MEMO_RUN_SLOW) belong to other tools
        if name not in defaults:
            continue
        raw_values[name] = value

    parsed = {}
    for key, value in raw_values.items():
        if key not in defaults:
            raise ConfigError(f"unknown config key {key.upper()}")
        if value is None:
            raise ConfigError(f"config key {key.upper()} has no value")
        try:
            parsed[key] = _parse_value(value, defaults[key])
        except ValueError as e:
            raise ConfigError(f"bad value for {key.upper()}: {e}") from e
    return ExperimentConfig(**parsed)


# %%
# Functions: Simulate #


def _speaker_pools(cfg: ExperimentConfig):
    train_pool = [speaker_name(i) for i in range(cfg.n_train_speakers)]
    test_pool = [
        speaker_name(i)
        for i in range(cfg.n_train_speakers, cfg.n_train_speakers + cfg.n_test_speakers)
    ]
    return train_pool, test_pool


def _draw_duration(rng, duration_range_s) -> float:
    """Whole cue frames within the range"""
    low, high = duration_range_s
    return max(1, int(round(rng.uniform(low, high) * FRAME_RATE))) / FRAME_RATE


def _draw_specs(rng, pool, count, ratio_max, seed_base, split, cfg, protect_prefix_s=0.0):
    specs = []
    for i in range(count):
        target, interferer = rng.choice(len(pool), size=2, replace=False)
        if split == "test":
            duration_s = cfg.duration_s
        else:
            duration_s = _draw_duration(rng, cfg.train_duration_range_s)
        specs.append(
            MixtureSpec(
                target_id=pool[target],
                interferer_id=pool[interferer],
                snr_db=float(rng.uniform(*cfg.snr_range_db)),
                duration_s=duration_s,
                impairment_ratio=float(rng.uniform(0.0, ratio_max)),
                impairment_type=IMPAIRMENT_TYPES[int(rng.integers(len(IMPAIRMENT_TYPES)))],
                seed=seed_base + i,
                protect_prefix_s=protect_prefix_s,
                split=split,
            )
        )
    return specs


def simulate_specs(cfg: ExperimentConfig) -> Dict[str, list]:
    """Deterministic train/val/test/switch specs from the config seed"""
    rng = np.random.default_rng(cfg.seed)
    train_pool, test_pool = _speaker_pools(cfg)
    splits = {
        "train": _draw_specs(rng, train_pool, cfg.n_train, cfg.train_ratio_max, 0, "train", cfg),
        "val": _draw_specs(rng, train_pool, cfg.n_val, cfg.train_ratio_max, 100_000, "val", cfg),
        "test": _draw_specs(
            rng,
            test_pool,
            cfg.n_test,
            cfg.test_ratio_max,
            200_000,
            "test",
            cfg,
            cfg.test_protect_prefix_s,
        ),
    }
    switch_specs = []
    if cfg.n_test_speakers >= 3:
        for i in range(cfg.n_switch):
            a, b, c = rng.choice(len(test_pool), size=3, replace=False)
            switch_specs.append(
                SwitchSpec(
                    speaker_a=test_pool[a],
                    speaker_b=test_pool[b],
                    interferer=test_pool[c],
                    switch_time_s=float(rng.uniform(4.0, 6.0)),
                    total_duration_s=cfg.switch_duration_s,
                    seed=300_000 + i,
                    snr_db=float(rng.uniform(*cfg.snr_range_db)),
                    impairment_ratio=float(rng.uniform(0.0, cfg.test_ratio_max)),
                    impairment_type=IMPAIRMENT_TYPES[int(rng.integers(len(IMPAIRMENT_TYPES)))],
                )
            )
    splits["switch_test"] = switch_specs
    return splits


def cmd_simulate(cfg: ExperimentConfig, storage: RunStorage) -> Dict[str, list]:
    splits = simulate_specs(cfg)
    for name, specs in splits.items():
        storage.write_manifest(name, [spec.to_dict() for spec in specs])
        print_logger(f"{name}: {len(specs)} items")
    for index, spec in enumerate(splits["test"][: cfg.export_items]):
        bundle = build_mixture(spec)
        storage.write_wav(f"test_{index}_mixture", bundle.mixture)
        storage.write_wav(f"test_{index}_target", bundle.target)
        storage.write_wav(f"test_{index}_pre_enrolled", bundle.pre_enrolled)
        storage.write_cues(f"test_{index}", bundle.cues)
    return splits


def load_specs(storage: RunStorage, split: str) -> list:
    records = storage.read_manifest(split)
    spec_type = SwitchSpec if split == "switch_test" else MixtureSpec
    return [spec_type(**record) for record in records]


# %%
# Functions: Train #


def _checkpoint_name(bank_mode: str, beta: Optional[float] = None) -> str:
    if beta is None:
        return f"model_{bank_mode}"
    return f"model_{bank_mode}_beta{beta:g}"


def cmd_train(cfg: ExperimentConfig, storage: RunStorage) -> Dict[str, str]:
    """One model per configured bank mode; returns checkpoint paths"""
    train_specs = load_specs(storage, "train")
    val_specs = load_specs(storage, "val")
    checkpoints = {}
    for bank_mode in cfg.bank_modes:
        torch.manual_seed(cfg.seed)
        model = MomentumExtractor(cfg.model_config(bank_mode))
        name = _checkpoint_name(bank_mode)
        train(
            train_specs,
            val_specs,
            cfg.train_config(bank_mode),
            model=model,
            storage=storage,
            checkpoint_name=name,
            resume=cfg.resume,
        )
        checkpoints[bank_mode] = str(storage.checkpoint_path(f"{name}_best"))
    return checkpoints


def load_model(storage: RunStorage, name: str) -> MomentumExtractor:
    checkpoint = f"{name}_best"
    if not storage.has_checkpoint(checkpoint):
        raise ConfigError(f"checkpoint {checkpoint} missing, run train first")
    payload = storage.load_checkpoint(checkpoint)
    model = MomentumExtractor.from_header(json.loads(payload["header"]))
    model.load_state_dict(payload["state_dict"])
    return model.eval()


# %%
# Functions: Eval #


def evaluate_item(model, bundle, stream_cfg: StreamConfig, mode: str, scenario: str):
    """Score one mixture under one setting; returns (ScoreReport, StreamResult)"""
    cues = bundle.cues.with_clean_frames() if scenario == "clean" else bundle.cues
    run = run_offline if mode == "offline" else run_stream
    result = run(
        model,
        bundle.mixture,
        cues,
        stream_cfg,
        pre_enrolled=bundle.pre_enrolled,
        target=bundle.target,
    )
    report = score(result.estimate, bundle.target, bundle.mixture)
    report.rtf = measure_rtf(result)
    return report, result


def is_applicable(bank_mode: str, setting: str) -> bool:
    return setting == VISUAL_ONLY or bank_mode != "none"


def cmd_eval(cfg: ExperimentConfig, storage: RunStorage) -> pd.DataFrame:
    """settings x scenarios x modes for every trained model"""
    specs = load_specs(storage, "test")[: cfg.eval_max_items]
    bundles = [build_mixture(spec) for spec in specs]
    rows = []
    cells = [
        (bank_mode, setting, scenario, mode)
        for bank_mode in cfg.bank_modes
        for setting in EVAL_SETTINGS
        for scenario in SCENARIOS
        for mode in MODES
    ]
    models = {mode: load_model(storage, _checkpoint_name(mode)) for mode in cfg.bank_modes}
    for bank_mode, setting, scenario, mode in tqdm(cells, desc="Eval grid", total=len(cells)):
        cell = {"model": bank_mode, "setting": setting, "scenario": scenario, "mode": mode}
        if not is_applicable(bank_mode, setting):
            rows.append({**cell, "item": None, "status": "N/A"})
            continue
        stream_cfg = cfg.stream_config(eval_setting=setting)
        for index, bundle in enumerate(bundles):
            report, result = evaluate_item(models[bank_mode], bundle, stream_cfg, mode, scenario)
            if index < cfg.export_items and mode == "online" and scenario == "impaired":
                name = f"{bank_mode}_{setting}_{index}"
                storage.write_trace(name, result.trace)
                storage.write_wav(name, result.estimate, allow_overwrite=True)
            rows.append(
                {
                    **cell,
                    "item": index,
                    "status": "ok",
                    "impairment_type": bundle.spec.impairment_type,
                    "impairment_ratio": bundle.spec.impairment_ratio,
                    **report.to_row(),
                }
            )

    df_scores = pd.DataFrame(rows)
    storage.write_report("eval_scores", df_scores)
    df_ok = df_scores[df_scores["status"] == "ok"]
    aggregate = {
        "cells": aggregate_reports(df_ok, ["impairment_type"]),
        "na_cells": df_scores.loc[df_scores["status"] == "N/A", ["model", "setting", "scenario", "mode"]]
        .to_dict(orient="records"),
    }
    grouped = df_ok.groupby(["model", "setting", "scenario", "mode"])
    aggregate["by_cell"] = {
        "/".join(key): {
            "si_snri_db": float(group["si_snri_db"].mean()),
            "si_snr_db": float(group["si_snr_db"].mean()),
            "sdr_db": float(group["sdr_db"].mean()),
            "count": int(len(group)),
        }
        for key, group in grouped
    }
    storage.write_json("eval_aggregate", aggregate)
    if not df_ok.empty:
        print_logger("Eval means by cell:")
        pprint_df(grouped[["si_snri_db", "sdr_db", "rtf"]].mean().reset_index())
    return df_scores


# %%
# Functions: Sweep #


def _mean_scores(model, bundles, stream_cfg, mode="online", scenario="impaired") -> dict:
    reports = [evaluate_item(model, b, stream_cfg, mode, scenario)[0] for b in bundles]
    return {
        "si_snri_db": float(np.mean([r.si_snri_db for r in reports])),
        "si_snr_db": float(np.mean([r.si_snr_db for r in reports])),
        "rtf": float(np.mean([r.rtf for r in reports])),
        "count": len(reports),
    }


def _parse_slot_row(entry: str):
    count, _, policy = entry.partition(":")
    return int(count), (policy or "fifo").lower()


def cmd_sweep(cfg: ExperimentConfig, storage: RunStorage) -> Dict[str, pd.DataFrame]:
    """Ablation grids on shared test items, one CSV per axis"""
    specs = load_specs(storage, "test")[: cfg.sweep_max_items]
    bundles = [build_mixture(spec) for spec in specs]
    model = load_model(storage, _checkpoint_name(cfg.sweep_model)) if cfg.sweep_axes else None
    base = cfg.stream_config(eval_setting="SelfEnro")
    results = {}

    for axis in cfg.sweep_axes:
        rows = []
        if axis == "slots":
            for entry in cfg.sweep_slots:
                count, policy = _parse_slot_row(entry)
                stream_cfg = replace(
                    base, speaker_capacity=count, contextual_capacity=count, policy=policy
                )
                rows.append({"slots": count, "policy": policy, **_mean_scores(model, bundles, stream_cfg)})
        elif axis == "window":
            for win_s in cfg.sweep_win_s:
                stream_cfg = cfg.stream_config(
                    eval_setting="SelfEnro", win_s=win_s, init_s=max(cfg.init_s, win_s)
                )
                rows.append({"win_s": win_s, **_mean_scores(model, bundles, stream_cfg)})
        elif axis == "shift":
            for shift_s in cfg.sweep_shift_s:
                stream_cfg = cfg.stream_config(eval_setting="SelfEnro", shift_s=shift_s)
                rows.append({"shift_s": shift_s, **_mean_scores(model, bundles, stream_cfg)})
        elif axis == "ratio":
            rng = np.random.default_rng(cfg.seed)
            bins = cfg.sweep_ratio_bins
            for low, high in zip(bins[:-1], bins[1:]):
                binned = [
                    build_mixture(replace(spec, impairment_ratio=float(rng.uniform(low, high))))
                    for spec in specs
                ]
                for setting in (VISUAL_ONLY, "SelfEnro"):
                    stream_cfg = replace(base, eval_setting=setting)
                    rows.append(
                        {
                            "ratio_low": low,
                            "ratio_high": high,
                            "setting": setting,
                            **_mean_scores(model, binned, stream_cfg),
                        }
                    )
        elif axis == "self_enroll":
            for length_s in cfg.sweep_self_enroll_s:
                stream_cfg = cfg.stream_config(eval_setting="SelfEnro", self_enroll_s=length_s)
                rows.append({"self_enroll_s": length_s, **_mean_scores(model, bundles, stream_cfg)})
        elif axis == "init":
            for clean_init in (True, False):
                stream_cfg = replace(base, clean_init=clean_init)
                rows.append({"clean_init": clean_init, **_mean_scores(model, bundles, stream_cfg)})
        elif axis == "beta":
            rows = _sweep_beta(cfg, storage, bundles)

        df_sweep = pd.DataFrame(rows)
        storage.write_report(f"sweep_{axis}", df_sweep)
        results[axis] = df_sweep
        print_logger(f"Sweep {axis} done:")
        pprint_df(df_sweep)
    return results


def _sweep_beta(cfg: ExperimentConfig, storage: RunStorage, bundles) -> List[dict]:
    train_specs = load_specs(storage, "train")
    val_specs = load_specs(storage, "val")
    rows = []
    for beta in cfg.sweep_betas:
        torch.manual_seed(cfg.seed)
        model = MomentumExtractor(cfg.model_config(cfg.sweep_model))
        train_cfg = cfg.train_config(
            cfg.sweep_model, loss_beta=beta, max_epochs=cfg.sweep_beta_epochs
        )
        trainer = train(
            train_specs,
            val_specs,
            train_cfg,
            model=model,
            storage=storage,
            checkpoint_name=_checkpoint_name(cfg.sweep_model, beta),
        )
        stream_cfg = cfg.stream_config(eval_setting="SelfEnro")
        rows.append({"beta": beta, **_mean_scores(trainer.model.eval(), bundles, stream_cfg)})
    return rows


# %%
# Functions: Switch #


def cmd_switch_eval(cfg: ExperimentConfig, storage: RunStorage) -> pd.DataFrame:
    """Segmental SI-SNR around a speaker switch, with and without emptying the banks"""
    specs = load_specs(storage, "switch_test")
    bank_model = load_model(storage, _checkpoint_name(cfg.sweep_model))
    baseline = load_model(storage, _checkpoint_name("none")) if "none" in cfg.bank_modes else None

    variants = {
        "bank": (bank_model, cfg.stream_config(eval_setting="SelfEnro")),
        "bank_empty": (bank_model, cfg.stream_config(eval_setting="SelfEnro", empty_on_switch=True)),
    }
    if baseline is not None:
        variants["baseline"] = (baseline, cfg.stream_config(eval_setting=VISUAL_ONLY))

    rows = []
    for index, spec in enumerate(tqdm(specs, desc="Switch eval", total=len(specs))):
        bundle = build_switch_mixture(spec)
        for variant, (model, stream_cfg) in variants.items():
            result = run_switch_stream(model, bundle.mixture, bundle.cues, stream_cfg)
            segments = segmental_si_snr(result.estimate, bundle.reference, cfg.segment_boundaries_s)
            row = {
                "item": index,
                "variant": variant,
                "switch_time_s": spec.switch_time_s,
                "reset_step": result.reset_step,
                "segment_mean_db": float(np.mean([v for _, v in segments])) if segments else None,
            }
            for (start, end), value in segments:
                row[f"seg_{start:g}_{end:g}"] = value
            rows.append(row)

    df_switch = pd.DataFrame(rows)
    storage.write_report("switch_scores", df_switch)
    seg_cols = [col for col in df_switch.columns if col.startswith("seg_")]
    storage.write_json(
        "switch_aggregate",
        {
            variant: {col: float(group[col].mean()) for col in seg_cols}
            for variant, group in df_switch.groupby("variant")
        },
    )
    print_logger("Switch segment means:")
    pprint_df(df_switch.groupby("variant")[seg_cols].mean().reset_index())
    return df_switch


# %%
