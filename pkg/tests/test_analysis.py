import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from sklearn.base import clone

from bellsim.analysis import (ChshEstimator, CorrelationResult, FitFailedError, SinusoidFitter,
                              UndefinedCorrelationError, chsh, correlation, fit_sinusoid, no_signaling_check,
                              sinusoid)
from bellsim.coincidence import CoincidenceTable
from bellsim.models import QuantumModel, sample_ensemble
from bellsim.source import EntangledStateParams

CHSH_A = np.radians([0.0, 45.0])
CHSH_B = np.radians([22.5, 67.5])


def exact(E):
    return CorrelationResult(E, 0.0, 0)


def test_correlation_examples():
    assert correlation([[0, 50], [50, 0]]).E == -1.0
    c = correlation([[25, 25], [25, 25]])
    assert c.E == 0.0 and c.sigma_E == pytest.approx(0.1)
    assert correlation([[10, 0], [0, 0]]).sigma_E == 0.0
    assert correlation([[30, 10], [10, 50]], "poisson-naive").sigma_E == pytest.approx(0.1)
    with pytest.raises(UndefinedCorrelationError):
        correlation([[0, 0], [0, 0]])
    with pytest.raises(ValueError):
        correlation([[1, 0], [0, 1]], "bootstrap")


def test_monte_carlo_correlation_at_22_5_degrees():
    model = QuantumModel(EntangledStateParams(visibility_V=1.0))
    ens = sample_ensemble(model, [0.0, 0.0], [math.pi / 8] * 2, 4_000_000, np.random.default_rng(2))
    c = correlation(ens.table.counts.sum(axis=(0, 1)))
    assert abs(c.E + math.cos(math.pi / 4)) <= 0.001 + 3 * c.sigma_E


def test_chsh_maximal_and_visibility_limit():
    r = 1 / math.sqrt(2)
    # working labeling a = 45, a' = 0, b = 67.5, b' = 22.5 with E = -cos 2(b - a)
    assert chsh(exact(-r), exact(r), exact(-r), exact(-r)).S == pytest.approx(2 * math.sqrt(2), abs=1e-12)
    assert chsh(exact(-0.97 * r), exact(0.97 * r), exact(-0.97 * r), exact(-0.97 * r)).S == pytest.approx(
        2.7436, abs=1e-4)


def test_sigma_S_arithmetic():
    terms = [CorrelationResult(0.0, 0.0092, 3700)] * 4
    res = chsh(exact(-0.69), exact(0.69), exact(-0.68), exact(-0.68))
    assert res.S == pytest.approx(2.74)
    sigma = math.sqrt(sum(t.sigma_E ** 2 for t in terms))
    assert sigma == pytest.approx(0.0184)
    assert (2.74 - 2) / sigma == pytest.approx(40.2, abs=0.1)
    # with per-term N = 14700 / 4 and |E| = 0.69 the significance is ~30 sigma
    s_e = math.sqrt((1 - 0.69 ** 2) / 3675)
    assert 0.74 / (2 * s_e) == pytest.approx(30.0, abs=1.5)


def _table(rng, n=50):
    return CoincidenceTable(rng.integers(1, n, size=(2, 2, 2, 2)))


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 20))
def test_chsh_invariants(seed, k):
    t = _table(np.random.default_rng(seed))
    est = ChshEstimator().fit(t)
    scaled = ChshEstimator().fit(CoincidenceTable(t.counts * k))
    assert scaled.S_ == pytest.approx(est.S_, abs=1e-12)
    assert scaled.sigma_S_ == pytest.approx(est.sigma_S_ / math.sqrt(k), rel=1e-9)
    assert ChshEstimator().fit(t.swap_labels()).S_ == pytest.approx(est.S_, abs=1e-12)
    assert est.S_ <= 4.0


def test_quantum_ensemble_respects_tsirelson_bound():
    rng = np.random.default_rng(7)
    model = QuantumModel(EntangledStateParams(visibility_V=1.0))
    for _ in range(5):
        ens = sample_ensemble(model, rng.uniform(0, math.pi, 2), rng.uniform(0, math.pi, 2), 200_000, rng)
        res = ChshEstimator().fit(ens.table).result_
        assert res.S <= 2 * math.sqrt(2) + 3 * res.sigma_S


def test_chsh_estimator_roles_and_params():
    model = QuantumModel(EntangledStateParams(visibility_V=1.0))
    ens = sample_ensemble(model, CHSH_A, CHSH_B, 400_000, np.random.default_rng(1))
    est = ChshEstimator().fit(ens.table)
    assert est.assignment_ in {(0, 1), (1, 0), (1, 1)}
    assert abs(est.S_ - 2 * math.sqrt(2)) <= 3 * est.sigma_S_
    fixed = clone(est).set_params(alice_primary=0, bob_primary=0).fit(ens.table)
    assert fixed.S_ < 1.0
    assert est.get_params() == {"alice_primary": "auto", "bob_primary": "auto", "error_model": "multinomial"}


ANGLES = np.linspace(0, math.pi, 41)


def test_fit_recovers_noiseless_sinusoid():
    y = sinusoid(ANGLES, 1234.5, 0.97, 0.3)
    fit = fit_sinusoid(ANGLES, y)
    assert fit.visibility == pytest.approx(0.97, abs=1e-6)
    assert fit.mean_level == pytest.approx(1234.5, rel=1e-6)
    assert fit.phase == pytest.approx(0.3, abs=1e-6)
    assert fit.chi2_per_dof < 1e-10
    np.testing.assert_allclose(fit(ANGLES), y, rtol=1e-6)


def test_fit_on_noisy_scan(rng):
    fit = fit_sinusoid(ANGLES, rng.poisson(sinusoid(ANGLES, 5000, 0.97, 1.1)))
    assert fit.visibility == pytest.approx(0.97, abs=0.01)
    assert 0.4 < fit.chi2_per_dof < 2.0
    assert fit.phase_constrained


def test_fit_flags_constant_data(rng):
    fit = fit_sinusoid(ANGLES, rng.poisson(1000, ANGLES.size))
    assert not fit.phase_constrained
    assert fit.visibility < 0.05


def test_fit_input_validation():
    with pytest.raises(ValueError):
        fit_sinusoid(ANGLES[:5], np.ones(5))
    with pytest.raises(ValueError):
        fit_sinusoid(np.linspace(0, 1, 10), np.ones(10))
    with pytest.raises(ValueError):
        fit_sinusoid(ANGLES, np.ones(3))
    assert issubclass(FitFailedError, RuntimeError)


def test_fit_self_consistency(rng):
    # refitting the fitted curve returns the same parameters
    first = fit_sinusoid(ANGLES, rng.poisson(sinusoid(ANGLES, 800, 0.9, 2.0)))
    again = fit_sinusoid(ANGLES, first(ANGLES))
    assert again.visibility == pytest.approx(first.visibility, abs=1e-6)
    assert again.phase == pytest.approx(first.phase, abs=1e-6)


def test_sinusoid_fitter_estimator():
    y = sinusoid(ANGLES, 100.0, 0.5, 0.7)
    m = SinusoidFitter().fit(ANGLES.reshape(-1, 1), y)
    assert m.visibility_ == pytest.approx(0.5, abs=1e-6)
    assert m.score(ANGLES.reshape(-1, 1), y) == pytest.approx(1.0)
    np.testing.assert_allclose(m.predict(ANGLES[:3]), y[:3], rtol=1e-6)
    assert clone(m).get_params()["n_phases"] == 16


def test_no_signaling_on_quantum_table():
    model = QuantumModel(EntangledStateParams(visibility_V=0.97))
    ens = sample_ensemble(model, CHSH_A, CHSH_B, 400_000, np.random.default_rng(3))
    rep = no_signaling_check(ens.table)
    assert rep.passed and rep.max_z < 3
    assert len(rep.comparisons) == 4


def test_no_signaling_flags_biased_table():
    counts = np.full((2, 2, 2, 2), 1000)
    counts[0, 1, 0, :] = 1500  # Alice's + rate depends on Bob's setting
    rep = no_signaling_check(CoincidenceTable(counts))
    assert not rep.passed
    bad = [m for m in rep.comparisons if m.status == "signaling"]
    assert bad[0].side == "alice" and bad[0].local_setting == 0


def test_no_signaling_insufficient_data():
    counts = np.full((2, 2, 2, 2), 10)
    counts[1, 1] = 0
    rep = no_signaling_check(CoincidenceTable(counts))
    assert sum(m.status == "insufficient data" for m in rep.comparisons) == 2
    assert rep.passed


def test_no_signaling_z_scores_follow_the_null():
    # under no-signaling each z is |N(0, 1)|: mean sqrt(2/pi), P(z >= 3) = 0.27 %
    model = QuantumModel(EntangledStateParams(visibility_V=0.97))
    zs = []
    for seed in range(150):
        ens = sample_ensemble(model, CHSH_A, CHSH_B, 100_000, np.random.default_rng(seed))
        zs += [c.z for c in no_signaling_check(ens.table).comparisons]
    zs = np.asarray(zs)
    assert abs(zs.mean() - math.sqrt(2 / math.pi)) < 0.06
    assert (zs >= 2).mean() < 0.08
    # a real signaling bias would grow with N; here z stays small
    big = sample_ensemble(model, CHSH_A, CHSH_B, 20_000_000, np.random.default_rng(151))
    assert no_signaling_check(big.table).max_z < 4
