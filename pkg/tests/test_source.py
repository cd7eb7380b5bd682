import math
from types import SimpleNamespace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from bellsim.source import (MINUS, PLUS, EmissionConfig, EntangledStateParams, JointOutcome,
                            correlation_from_probabilities, emit_pairs, outcome_probabilities,
                            sample_joint_outcome)

angles = st.floats(-2 * math.pi, 2 * math.pi, allow_nan=False)
visibilities = st.floats(0.0, 1.0)


def test_probabilities_equal_angles():
    assert outcome_probabilities(0.0, 0.0, EntangledStateParams()) == (0.0, 0.0, 0.5, 0.5)


def test_probability_at_22_5_degrees():
    # independent evaluation of sin^2(beta - alpha) / 2
    expected = math.sin(math.radians(22.5)) ** 2 / 2
    p_pp, *_ = outcome_probabilities(0.0, math.pi / 8, EntangledStateParams())
    assert p_pp == pytest.approx(expected, abs=1e-15)
    assert p_pp == pytest.approx(0.07322, abs=1e-5)


def test_reduced_visibility():
    p_pp, p_mm, _, _ = outcome_probabilities(0.0, 0.0, EntangledStateParams(visibility_V=0.97))
    assert p_pp == pytest.approx(0.0075, abs=1e-15)
    assert p_mm == p_pp


@pytest.mark.parametrize("V", [-0.1, 1.01])
def test_rejects_visibility_out_of_range(V):
    with pytest.raises(ValueError):
        EntangledStateParams(visibility_V=V)
    with pytest.raises(ValueError):
        outcome_probabilities(0.0, 0.1, SimpleNamespace(visibility_V=V))


def test_only_phase_pi_supported():
    with pytest.raises(NotImplementedError):
        EntangledStateParams(phase_phi=0.0)
    with pytest.raises(ValueError):
        EntangledStateParams(phase_phi=math.inf)


@given(angles, angles, visibilities)
def test_probability_invariants(alpha, beta, V):
    p = EntangledStateParams(visibility_V=V)
    p_pp, p_mm, p_pm, p_mp = outcome_probabilities(alpha, beta, p)
    assert min(p_pp, p_mm, p_pm, p_mp) >= 0
    assert p_pp + p_mm + p_pm + p_mp == pytest.approx(1.0, abs=1e-15)
    # no-signaling: each marginal is 1/2 regardless of the remote angle
    assert p_pp + p_pm == pytest.approx(0.5, abs=1e-15)
    assert p_pp + p_mp == pytest.approx(0.5, abs=1e-15)
    E = correlation_from_probabilities(p_pp, p_mm, p_pm, p_mp)
    assert E == pytest.approx(-V * math.cos(2 * (beta - alpha)), abs=1e-14)


@given(angles, angles, st.floats(-math.pi, math.pi), visibilities)
def test_rotational_invariance(alpha, beta, rot, V):
    p = EntangledStateParams(visibility_V=V)
    a = outcome_probabilities(alpha, beta, p)
    b = outcome_probabilities(alpha + rot, beta + rot, p)
    np.testing.assert_allclose(a, b, atol=1e-12)


def test_emission_count_is_poisson():
    cfg = EmissionConfig(pair_rate=1e6, duration=1.0)
    for seed in range(10):
        n = emit_pairs(cfg, np.random.default_rng(seed)).size
        assert abs(n - 1e6) <= 5 * math.sqrt(1e6)


def test_emission_times_ordered_and_exponential():
    cfg = EmissionConfig(pair_rate=1e5, duration=1.0, seed=3)
    t = emit_pairs(cfg)
    assert np.all(np.diff(t) > 0)
    assert t[0] >= 0 and t[-1] < 1.0
    gaps = np.diff(t)
    assert gaps.mean() == pytest.approx(1e-5, rel=0.02)
    assert stats.kstest(gaps, "expon", args=(0, 1e-5)).pvalue > 1e-3


def test_emission_edge_cases():
    assert emit_pairs(EmissionConfig(1e3, 0.0)).size == 0
    assert emit_pairs(EmissionConfig(1.0, 1e-12, seed=1)).size == 0
    a = emit_pairs(EmissionConfig(1e4, 0.1, seed=9))
    b = emit_pairs(EmissionConfig(1e4, 0.1, seed=9))
    np.testing.assert_array_equal(a, b)
    with pytest.raises(ValueError):
        EmissionConfig(0.0, 1.0)


def test_equal_angles_never_same_outcome():
    p = EntangledStateParams()
    u = np.linspace(0, 1, 10_001, endpoint=False)
    a, b = sample_joint_outcome(0.3, 0.3, p, u)
    assert np.all(a != b)


def test_threshold_order_contract():
    assert sample_joint_outcome(0.0, math.pi / 4, EntangledStateParams(), 0.0) == JointOutcome(PLUS, PLUS)
    # the four bands in order ++, --, +-, -+ at P = 1/4 each
    got = [sample_joint_outcome(0.0, math.pi / 4, EntangledStateParams(), u) for u in (0.1, 0.3, 0.6, 0.9)]
    assert got == [JointOutcome(PLUS, PLUS), JointOutcome(MINUS, MINUS),
                   JointOutcome(PLUS, MINUS), JointOutcome(MINUS, PLUS)]


def test_sampled_frequency_matches_law():
    u = np.random.default_rng(11).random(1_000_000)
    a, b = sample_joint_outcome(0.0, math.pi / 8, EntangledStateParams(), u)
    p_pp = np.mean((a == PLUS) & (b == PLUS))
    assert p_pp == pytest.approx(math.sin(math.pi / 8) ** 2 / 2, abs=1e-3)
