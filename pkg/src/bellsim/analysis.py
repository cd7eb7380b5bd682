"""Correlations, CHSH statistic, sinusoid fits and no-signaling checks."""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import least_squares
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_is_fitted

from .coincidence import CoincidenceTable

ERROR_MODELS = ("multinomial", "poisson-naive")


class UndefinedCorrelationError(ValueError):
    pass


class FitFailedError(RuntimeError):
    pass


@dataclass(frozen=True)
class CorrelationResult:
    E: float
    sigma_E: float
    N: int


@dataclass(frozen=True)
class ChshResult:
    S: float
    sigma_S: float
    n_sigma_violation: float
    terms: tuple = ()


def correlation(cell, error_model: str = "multinomial") -> CorrelationResult:
    """Correlation from the 2x2 detector counts ``cell[i][j]`` of one setting pair.

    The multinomial error ``sqrt((1 - E^2) / N)`` equals the full
    per-cell Poisson propagation including the fluctuation of N;
    ``"poisson-naive"`` holds N fixed and gives ``1 / sqrt(N)``.
    """
    c = np.asarray(cell, dtype=float).reshape(2, 2)
    N = c.sum()
    if N <= 0:
        raise UndefinedCorrelationError("no coincidences for this setting pair")
    E = (c[0, 0] + c[1, 1] - c[0, 1] - c[1, 0]) / N
    if error_model == "multinomial":
        sigma = math.sqrt(max(1.0 - E * E, 0.0) / N)
    elif error_model == "poisson-naive":
        sigma = 1.0 / math.sqrt(N)
    else:
        raise ValueError(f"error_model must be one of {ERROR_MODELS}")
    return CorrelationResult(float(E), sigma, int(N))


def chsh(e_ab, e_a2b, e_ab2, e_a2b2) -> ChshResult:
    """S = |E(a,b) - E(a',b)| + |E(a,b') + E(a',b')| from four correlations."""
    terms = (e_ab, e_a2b, e_ab2, e_a2b2)
    S = abs(e_ab.E - e_a2b.E) + abs(e_ab2.E + e_a2b2.E)
    sigma = math.sqrt(sum(t.sigma_E ** 2 for t in terms))
    nsig = (S - 2.0) / sigma if sigma > 0 else (math.inf if S > 2 else -math.inf if S < 2 else 0.0)
    return ChshResult(S, sigma, nsig, terms)


def chsh_from_table(table: CoincidenceTable, alice_primary: int, bob_primary: int,
                    error_model: str = "multinomial") -> ChshResult:
    a, a2 = alice_primary, 1 - alice_primary
    b, b2 = bob_primary, 1 - bob_primary
    E = lambda x, y: correlation(table.counts[x, y], error_model)  # noqa: E731
    return chsh(E(a, b), E(a2, b), E(a, b2), E(a2, b2))


class ChshEstimator(BaseEstimator):
    """CHSH statistic of a coincidence table.

    ``alice_primary``/``bob_primary`` pick which setting bit plays the
    unprimed angle; ``"auto"`` tries all four labelings (each a valid CHSH
    expression) and keeps the largest S.
    """

    def __init__(self, alice_primary="auto", bob_primary="auto", error_model="multinomial"):
        self.alice_primary = alice_primary
        self.bob_primary = bob_primary
        self.error_model = error_model

    def fit(self, table: CoincidenceTable, y=None):
        choices_a = (0, 1) if self.alice_primary == "auto" else (int(self.alice_primary),)
        choices_b = (0, 1) if self.bob_primary == "auto" else (int(self.bob_primary),)
        best = None
        for a, b in itertools.product(choices_a, choices_b):
            res = chsh_from_table(table, a, b, self.error_model)
            if best is None or res.S > best[0].S:
                best = (res, (a, b))
        self.result_, self.assignment_ = best
        self.S_ = self.result_.S
        self.sigma_S_ = self.result_.sigma_S
        self.n_sigma_violation_ = self.result_.n_sigma_violation
        self.correlations_ = [[correlation(table.counts[x, y], self.error_model) for y in (0, 1)]
                              for x in (0, 1)]
        return self


def full_ensemble_chsh(product_sum, emitted, both_detected, alice_primary, bob_primary) -> ChshResult:
    """CHSH over all emitted pairs, non-detections contributing 0.

    ``product_sum[a, b]`` is the summed outcome product of both-detected
    pairs, ``emitted[a, b]`` and ``both_detected[a, b]`` the pair counts.
    """
    product_sum = np.asarray(product_sum, dtype=float)
    emitted = np.asarray(emitted, dtype=float)
    both = np.asarray(both_detected, dtype=float)

    def term(x, y):
        n = emitted[x, y]
        E = product_sum[x, y] / n
        return CorrelationResult(E, math.sqrt(max(both[x, y] / n - E * E, 0.0) / n), int(n))

    a, a2, b, b2 = alice_primary, 1 - alice_primary, bob_primary, 1 - bob_primary
    return chsh(term(a, b), term(a2, b), term(a, b2), term(a2, b2))


@dataclass
class SinusoidFit:
    amplitude: float
    mean_level: float
    phase: float
    visibility: float
    chi2_per_dof: float
    errors: dict = field(default_factory=dict)
    phase_constrained: bool = True

    def __call__(self, theta):
        return sinusoid(theta, self.mean_level, self.visibility, self.phase)


def sinusoid(theta, mean_level, visibility, phase):
    return mean_level * (1.0 - visibility * np.cos(2.0 * (np.asarray(theta, dtype=float) - phase)))


def fit_sinusoid(angles, counts, n_phases: int = 16, max_nfev: int = 2000) -> SinusoidFit:
    """Weighted nonlinear least-squares fit of ``M (1 - V cos 2(theta - theta0))``.

    Weights are Poisson, sigma^2 = max(count, 1). Each of ``n_phases``
    starting phases on [0, pi) is refined and the lowest chi^2 kept.
    """
    x = np.asarray(angles, dtype=float).ravel()
    y = np.asarray(counts, dtype=float).ravel()
    if x.size != y.size:
        raise ValueError("angles and counts differ in length")
    if x.size < 6:
        raise ValueError("need at least 6 points")
    if np.ptp(x) < math.pi / 2 - 1e-12:
        raise ValueError("points must span at least half a period (pi/2)")
    sigma = np.sqrt(np.maximum(y, 1.0))
    mean0 = max(float(np.mean(y)), 1e-12)
    vis0 = min(max(float(np.ptp(y)) / (2 * mean0), 0.05), 1.0)

    def resid(p):
        return (sinusoid(x, *p) - y) / sigma

    best = None
    for ph in np.arange(n_phases) * math.pi / n_phases:
        sol = least_squares(resid, [mean0, vis0, ph], method="lm", xtol=1e-15, ftol=1e-15,
                            gtol=1e-15, max_nfev=max_nfev)
        if sol.status > 0 and (best is None or sol.cost < best.cost):
            best = sol
    if best is None:
        raise FitFailedError(f"no start of {n_phases} converged")
    M, V, ph = best.x
    if V < 0:
        V, ph = -V, ph + math.pi / 2
    ph = ph % math.pi
    dof = max(x.size - 3, 1)
    chi2 = 2.0 * best.cost
    J = best.jac
    cov = np.linalg.pinv(J.T @ J)
    err = np.sqrt(np.clip(np.diag(cov), 0.0, None))
    amp = M * V
    amp_err = math.hypot(V * err[0], M * err[1])
    constrained = bool(amp > 3.0 * amp_err and V > 1e-9)
    return SinusoidFit(float(amp), float(M), float(ph), float(V), chi2 / dof,
                       {"mean_level": float(err[0]), "visibility": float(err[1]),
                        "phase": float(err[2]), "amplitude": float(amp_err)},
                       constrained)


class SinusoidFitter(RegressorMixin, BaseEstimator):
    """Estimator form of :func:`fit_sinusoid`; ``X`` holds angles (radians)."""

    def __init__(self, n_phases=16, max_nfev=2000):
        self.n_phases = n_phases
        self.max_nfev = max_nfev

    def fit(self, X, y):
        fit = fit_sinusoid(np.asarray(X, dtype=float).ravel(), y, self.n_phases, self.max_nfev)
        self.fit_ = fit
        self.visibility_ = fit.visibility
        self.mean_level_ = fit.mean_level
        self.amplitude_ = fit.amplitude
        self.phase_ = fit.phase
        self.chi2_per_dof_ = fit.chi2_per_dof
        return self

    def predict(self, X):
        check_is_fitted(self, "fit_")
        return self.fit_(np.asarray(X, dtype=float).ravel())


@dataclass
class MarginalComparison:
    side: str
    local_setting: int
    p_plus: tuple
    n: tuple
    delta: float
    z: float
    status: str


@dataclass
class NoSignalingReport:
    comparisons: list
    max_abs_delta: float
    max_z: float
    z_threshold: float

    @property
    def passed(self) -> bool:
        return all(c.status != "signaling" for c in self.comparisons)


def no_signaling_check(table: CoincidenceTable, z_threshold: float = 3.0) -> NoSignalingReport:
    """Compare each side's P(+) at a fixed local setting across the two remote settings."""
    c = table.counts
    out = []
    for side in ("alice", "bob"):
        for s in (0, 1):
            if side == "alice":
                cells = [c[s, r] for r in (0, 1)]
                plus = [cell[0, :].sum() for cell in cells]
            else:
                cells = [c[r, s] for r in (0, 1)]
                plus = [cell[:, 0].sum() for cell in cells]
            n = [int(cell.sum()) for cell in cells]
            if min(n) == 0:
                out.append(MarginalComparison(side, s, (math.nan, math.nan), tuple(n), math.nan,
                                              math.nan, "insufficient data"))
                continue
            p = [plus[k] / n[k] for k in (0, 1)]
            pooled = (plus[0] + plus[1]) / (n[0] + n[1])
            se = math.sqrt(pooled * (1 - pooled) * (1 / n[0] + 1 / n[1]))
            delta = p[0] - p[1]
            z = abs(delta) / se if se > 0 else (0.0 if delta == 0 else math.inf)
            out.append(MarginalComparison(side, s, (float(p[0]), float(p[1])), tuple(n), float(delta),
                                          float(z), "signaling" if z >= z_threshold else "ok"))
    deltas = [abs(m.delta) for m in out if m.status != "insufficient data"]
    zs = [m.z for m in out if m.status != "insufficient data"]
    return NoSignalingReport(out, max(deltas, default=math.nan), max(zs, default=math.nan), z_threshold)
