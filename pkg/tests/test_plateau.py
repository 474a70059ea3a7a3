import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from plateau_lab.interventions import SweepProfile
from plateau_lab.plateau import (detect_plateau_onset, fallback_k_star, neighbor_candidates, neighbor_search_k0,
                                 resolve_k_star, segmented_fit_knee, smooth)

from synthetic import three_segment_curve

SPEC_CURVE = [0.30, 0.30, 0.30, 0.30, 0.40, 0.50, 0.60, 0.70, 0.80, 0.80, 0.80, 0.80, 0.80]


def test_piecewise_example():
    seg = detect_plateau_onset(SPEC_CURVE)
    assert seg.found and seg.k_star == 9 and seg.mid_end == 9
    assert 1 <= seg.early_end < seg.mid_end
    assert segmented_fit_knee(SPEC_CURVE) == 9


def test_accepts_profile_object():
    prof = SweepProfile("m", "t", list(enumerate(SPEC_CURVE, 1)))
    assert detect_plateau_onset(prof).k_star == 9


def test_constant_and_linear_have_no_plateau():
    assert not detect_plateau_onset([0.5] * 13).found
    assert not detect_plateau_onset(np.linspace(0.1, 0.9, 13)).found


def test_segmentation_slope_invariant():
    seg = detect_plateau_onset(SPEC_CURVE)
    assert seg.mid_slope > seg.plateau_slope


def test_too_short_curve():
    with pytest.raises(ValueError):
        detect_plateau_onset([0.1, 0.2, 0.3], min_plateau_len=2)


def test_smooth_window_and_boundaries():
    np.testing.assert_allclose(smooth([0, 3, 6], 3), [1, 3, 5])
    np.testing.assert_array_equal(smooth([1.0, 2.0], 1), [1.0, 2.0])


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.05, 20.0), st.floats(-5.0, 5.0))
def test_affine_invariance(seed, a, b):
    y, _ = three_segment_curve(seed)
    s1, s2 = detect_plateau_onset(y), detect_plateau_onset(a * y + b)
    assert (s1.found, s1.k_star) == (s2.found, s2.k_star)


def test_agreement_with_oracle_sample():
    hits = 0
    for seed in range(40):
        y, _ = three_segment_curve(seed)
        seg = detect_plateau_onset(y)
        hits += seg.found and abs(seg.k_star - segmented_fit_knee(y)) <= 1
    assert hits >= 37


def test_oracle_recovers_noise_free_truth():
    for seed in range(20):
        y, truth = three_segment_curve(seed, sigma=0.0)
        assert segmented_fit_knee(y) == truth


def test_fallback():
    assert fallback_k_star(12) == 8 and fallback_k_star(32) == 22
    seg = resolve_k_star(detect_plateau_onset([0.5] * 13), 12)
    assert seg.fallback and seg.k_star == 8
    data = json.loads(seg.to_json())
    assert data["fallback"] is True and "plateau_slope_tol_frac" in data


def test_neighbor_search_rules():
    k0, table = neighbor_search_k0(6, 0, lambda k: 0.5, 12)
    assert k0 == 6 and table == {6: 0.5}
    k0, table = neighbor_search_k0(6, 3, lambda k: 0.5, 12)
    assert k0 == 9 and list(table) == [3, 4, 5, 6, 7, 8, 9]
    k0, _ = neighbor_search_k0(6, 3, lambda k: -abs(k - 5), 12)
    assert k0 == 5


def test_neighbor_candidates_clipped():
    assert neighbor_candidates(1, 2, 12) == [2, 3]
    assert neighbor_candidates(12, 3, 12) == [9, 10, 11, 12]
    for k in range(1, 14):
        for r in range(5):
            assert all(2 <= c <= 12 for c in neighbor_candidates(k, r, 12))
    with pytest.raises(ValueError):
        neighbor_candidates(5, -1, 12)


def test_neighbor_search_failures():
    def fn(k):
        if k == 7:
            raise RuntimeError("x")
        return 0.1 * k

    k0, table = neighbor_search_k0(6, 1, fn, 12)
    assert k0 == 6 and table[7] is None
    with pytest.raises(RuntimeError):
        neighbor_search_k0(6, 1, lambda k: 1 / 0, 12)
