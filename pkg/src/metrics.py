# %%
# Imports #

from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
import torch
from readable_utils.display_tools import pprint_df, print_logger  # noqa F401

from config import AUDIO_RATE
from errors import InvalidArgumentError
from signals import Waveform
from training import SI_SNR_CLAMP_DB, SI_SNR_EPS, si_snr

SCORE_COLUMNS = ["si_snr_db", "si_snri_db", "sdr_db"]


# %%
# Types #


@dataclass
class ScoreReport:
    si_snr_db: float
    si_snri_db: float
    sdr_db: float
    segmental: List[Tuple[Tuple[float, float], float]] = field(default_factory=list)
    rtf: Optional[float] = None

    def to_row(self) -> dict:
        row = {
            "si_snr_db": self.si_snr_db,
            "si_snri_db": self.si_snri_db,
            "sdr_db": self.sdr_db,
            "rtf": self.rtf,
        }
        for (start, end), value in self.segmental:
            row[f"seg_{start:g}_{end:g}"] = value
        return row


# %%
# Functions #


def _samples(wave) -> np.ndarray:
    return wave.samples if isinstance(wave, Waveform) else np.asarray(wave, dtype=np.float64)


def si_snr_db(estimate, reference) -> float:
    est = torch.as_tensor(_samples(estimate), dtype=torch.float64)
    ref = torch.as_tensor(_samples(reference), dtype=torch.float64)
    return float(si_snr(est, ref))


def sdr_db(estimate, reference) -> float:
    """Plain energy ratio 10*log10(|ref|^2 / |ref - est|^2), clamped like SI-SNR"""
    est, ref = _samples(estimate), _samples(reference)
    if est.shape != ref.shape:
        raise InvalidArgumentError("estimate and reference lengths differ")
    error = ref - est
    ratio = (np.dot(ref, ref) + SI_SNR_EPS) / (np.dot(error, error) + SI_SNR_EPS)
    return float(np.clip(10 * np.log10(ratio), -SI_SNR_CLAMP_DB, SI_SNR_CLAMP_DB))


def score(estimate, reference, mixture) -> ScoreReport:
    """Global SI-SNR, SI-SNRi and SDR of one estimate"""
    lengths = {len(_samples(estimate)), len(_samples(reference)), len(_samples(mixture))}
    if len(lengths) != 1:
        raise InvalidArgumentError(f"estimate, reference and mixture lengths differ: {lengths}")
    value = si_snr_db(estimate, reference)
    return ScoreReport(
        si_snr_db=value,
        si_snri_db=value - si_snr_db(mixture, reference),
        sdr_db=sdr_db(estimate, reference),
    )


def segmental_si_snr(
    estimate, reference, boundaries_s: Sequence[float], rate: int = AUDIO_RATE
) -> List[Tuple[Tuple[float, float], float]]:
    """SI-SNR per [b_i, b_i+1) interval; boundaries past the end are clipped"""
    est, ref = _samples(estimate), _samples(reference)
    if est.shape != ref.shape:
        raise InvalidArgumentError("estimate and reference lengths differ")
    if list(boundaries_s) != sorted(boundaries_s):
        raise InvalidArgumentError("segment boundaries must be ascending")

    results = []
    for start_s, end_s in zip(boundaries_s[:-1], boundaries_s[1:]):
        start = min(int(round(start_s * rate)), est.size)
        end = min(int(round(end_s * rate)), est.size)
        if end <= start:
            print_logger(f"Skipping empty segment {start_s:g}-{end_s:g} s")
            continue
        segment_ref = ref[start:end]
        if not np.any(segment_ref - segment_ref.mean()):
            print_logger(f"Skipping silent reference segment {start_s:g}-{end_s:g} s")
            continue
        results.append(((start / rate, end / rate), si_snr_db(est[start:end], segment_ref)))
    return results


def aggregate_reports(df_scores: pd.DataFrame, group_cols: Sequence[str]) -> dict:
    """Overall means/counts plus per-group means of the score columns"""
    value_cols = [col for col in SCORE_COLUMNS + ["rtf"] if col in df_scores]
    aggregate = {
        "count": int(len(df_scores)),
        "mean": {col: float(df_scores[col].mean()) for col in value_cols},
    }
    for col in group_cols:
        if col not in df_scores:
            continue
        grouped = df_scores.groupby(col, dropna=False)[value_cols].agg(["mean", "count"])
        aggregate[f"by_{col}"] = {
            str(key): {
                f"{value}_{stat}": float(grouped.loc[key, (value, stat)])
                for value in value_cols
                for stat in ("mean", "count")
            }
            for key in grouped.index
        }
    return aggregate


# %%
# Main #

if __name__ == "__main__":
    from signals import MixtureSpec, build_mixture

    bundle = build_mixture(MixtureSpec("spk_0", "spk_1", seed=1))
    report = score(bundle.mixture, bundle.target, bundle.mixture)
    pprint_df(pd.DataFrame([report.to_row()]))


# %%
