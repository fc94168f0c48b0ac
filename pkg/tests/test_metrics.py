# %%
# Imports #

import math

import config_test_utils  # noqa F401
import numpy as np
import pandas as pd
import pytest

from errors import InvalidArgumentError
from metrics import aggregate_reports, score, sdr_db, segmental_si_snr, si_snr_db
from signals import MixtureSpec, build_mixture


@pytest.fixture(scope="module")
def bundle():
    return build_mixture(MixtureSpec("spk_0", "spk_1", snr_db=0.0, duration_s=2.0, seed=5))


# %%
# Tests: Scores #


def test_mixture_has_zero_improvement(bundle):
    report = score(bundle.mixture, bundle.target, bundle.mixture)
    assert report.si_snri_db == pytest.approx(0.0, abs=1e-12)
    # 0 dB mixing puts SDR of the mixture at 0 dB
    assert report.sdr_db == pytest.approx(0.0, abs=1e-6)


def test_perfect_estimate_hits_the_clamp(bundle):
    report = score(bundle.target, bundle.target, bundle.mixture)
    assert report.si_snr_db == pytest.approx(60.0)
    assert report.sdr_db == pytest.approx(60.0)
    assert report.si_snri_db > 50


def test_si_snr_db_matches_oracle():
    rng = np.random.default_rng(0)
    reference = rng.standard_normal(1000)
    estimate = 0.5 * reference + 0.2 * rng.standard_normal(1000)
    ref0, est0 = reference - reference.mean(), estimate - estimate.mean()
    projection = (est0 @ ref0) / (ref0 @ ref0) * ref0
    noise = est0 - projection
    expected = 10 * math.log10((projection @ projection) / (noise @ noise))
    assert si_snr_db(estimate, reference) == pytest.approx(expected, abs=1e-6)


def test_sdr_is_scale_sensitive():
    reference = np.sin(np.linspace(0, 30, 800))
    assert sdr_db(0.5 * reference, reference) == pytest.approx(10 * math.log10(4), abs=1e-6)
    assert si_snr_db(0.5 * reference, reference) == pytest.approx(60.0)


def test_length_mismatch_raises(bundle):
    with pytest.raises(InvalidArgumentError):
        score(bundle.target.samples[:-1], bundle.target, bundle.mixture)


def test_to_row_columns():
    rows = score(np.ones(4) + np.arange(4), np.arange(4.0), np.arange(4.0) * 2).to_row()
    assert {"si_snr_db", "si_snri_db", "sdr_db", "rtf"} <= set(rows)


# %%
# Tests: Segmental #


def test_segments_partition_the_stream(bundle):
    segments = segmental_si_snr(bundle.mixture, bundle.target, [0.0, 0.5, 1.0, 2.0])
    assert [bounds for bounds, _ in segments] == [(0.0, 0.5), (0.5, 1.0), (1.0, 2.0)]
    first = si_snr_db(bundle.mixture.samples[:8000], bundle.target.samples[:8000])
    assert segments[0][1] == pytest.approx(first, abs=1e-12)


def test_segments_clip_and_skip(bundle):
    segments = segmental_si_snr(bundle.mixture, bundle.target, [0.0, 1.5, 3.0, 4.0])
    assert [bounds for bounds, _ in segments] == [(0.0, 1.5), (1.5, 2.0)]


def test_silent_segment_is_skipped():
    reference = np.concatenate([np.zeros(16000), np.sin(np.linspace(0, 50, 16000))])
    estimate = reference + 0.1
    segments = segmental_si_snr(estimate, reference, [0.0, 1.0, 2.0])
    assert [bounds for bounds, _ in segments] == [(1.0, 2.0)]


def test_boundaries_must_ascend(bundle):
    with pytest.raises(InvalidArgumentError):
        segmental_si_snr(bundle.mixture, bundle.target, [0.0, 1.0, 0.5])


# %%
# Tests: Aggregation #


def test_aggregate_reports():
    df_scores = pd.DataFrame(
        {
            "setting": ["SelfEnro", "SelfEnro", "PreEnro"],
            "si_snr_db": [10.0, 12.0, 5.0],
            "si_snri_db": [9.0, 11.0, 4.0],
            "sdr_db": [8.0, 10.0, 3.0],
        }
    )
    aggregate = aggregate_reports(df_scores, ["setting", "missing_col"])
    assert aggregate["count"] == 3
    assert aggregate["mean"]["si_snr_db"] == pytest.approx(9.0)
    assert aggregate["by_setting"]["SelfEnro"]["si_snr_db_mean"] == pytest.approx(11.0)
    assert aggregate["by_setting"]["PreEnro"]["sdr_db_count"] == 1
    assert "by_missing_col" not in aggregate


# %%
# Main #

if __name__ == "__main__":
    test_si_snr_db_matches_oracle()
    test_aggregate_reports()


# %%
