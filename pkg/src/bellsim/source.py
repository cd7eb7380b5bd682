"""Entangled-pair source: Poissonian emission and the quantum outcome law."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

PLUS = 1
MINUS = -1


@dataclass(frozen=True)
class EntangledStateParams:
    """Polarization-entangled state with relative phase and net visibility.

    Only ``phase_phi = pi`` (the singlet-like state) is supported by the
    outcome law below; the field is kept so configs can record it.
    """

    phase_phi: float = math.pi
    visibility_V: float = 1.0

    def __post_init__(self):
        if not math.isfinite(self.phase_phi):
            raise ValueError("phase_phi must be finite")
        if not 0.0 <= self.visibility_V <= 1.0:
            raise ValueError(f"visibility_V must lie in [0, 1], got {self.visibility_V}")
        if not math.isclose(math.cos(self.phase_phi), -1.0, abs_tol=1e-12):
            raise NotImplementedError("only phase_phi = pi is modelled")


@dataclass(frozen=True)
class EmissionConfig:
    pair_rate: float
    duration: float
    seed: int = 0

    def __post_init__(self):
        if not self.pair_rate > 0:
            raise ValueError("pair_rate must be > 0")
        if not self.duration >= 0:
            raise ValueError("duration must be >= 0")


@dataclass(frozen=True)
class JointOutcome:
    alice_result: int
    bob_result: int

    def __post_init__(self):
        if self.alice_result not in (PLUS, MINUS) or self.bob_result not in (PLUS, MINUS):
            raise ValueError("results must be +1 or -1")


def outcome_probabilities(alpha, beta, params: EntangledStateParams):
    """Return ``(P_pp, P_mm, P_pm, P_mp)`` for analyzer angles in radians.

    Accepts scalars or broadcastable arrays.
    """
    V = params.visibility_V
    if not 0.0 <= V <= 1.0:
        raise ValueError(f"visibility_V must lie in [0, 1], got {V}")
    c = V * np.cos(2.0 * (np.asarray(beta, dtype=float) - np.asarray(alpha, dtype=float)))
    same = (1.0 - c) / 4.0
    diff = (1.0 + c) / 4.0
    if np.ndim(same) == 0:
        same, diff = float(same), float(diff)
    return same, same, diff, diff


def correlation_from_probabilities(p_pp, p_mm, p_pm, p_mp):
    return p_pp + p_mm - p_pm - p_mp


def emit_pairs(config: EmissionConfig, rng: np.random.Generator | None = None) -> np.ndarray:
    """Emission times (seconds) of a homogeneous Poisson process on ``[0, duration)``.

    Conditional on the Poisson count the times are i.i.d. uniform, so sorting
    uniforms gives the same law as summing exponential gaps and vectorizes.
    """
    if rng is None:
        rng = np.random.default_rng(config.seed)
    if config.duration == 0:
        return np.empty(0, dtype=float)
    n = rng.poisson(config.pair_rate * config.duration)
    times = np.sort(rng.uniform(0.0, config.duration, size=n))
    # exact duplicates have probability ~0 but would break strict ordering
    if n > 1 and np.any(np.diff(times) <= 0):
        times = np.unique(times)
    return times


def sample_joint_outcome(alpha, beta, params: EntangledStateParams, random_draw):
    """Map a uniform draw to a joint outcome by thresholding in the fixed
    order (++, --, +-, -+).

    Scalar inputs return a :class:`JointOutcome`; array inputs return a pair
    of int8 arrays ``(alice, bob)`` holding +1/-1.
    """
    p_pp, p_mm, p_pm, _ = outcome_probabilities(alpha, beta, params)
    u = np.asarray(random_draw, dtype=float)
    t1 = p_pp
    t2 = t1 + p_mm
    t3 = t2 + p_pm
    alice = np.where((u < t1) | ((u >= t2) & (u < t3)), PLUS, MINUS).astype(np.int8)
    bob = np.where((u < t1) | (u >= t3), PLUS, MINUS).astype(np.int8)
    if np.ndim(alice) == 0:
        return JointOutcome(int(alice), int(bob))
    return alice, bob
