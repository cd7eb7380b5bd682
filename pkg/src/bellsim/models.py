"""Outcome models behind one per-side response interface.

Every model answers ``respond(side, setting_angle, lam, random_draw)``. The
signature carries no remote setting or remote result, so the local models are
local by construction. The quantum model cannot be written that way; its
Bob-side response needs Alice's applied angle, passed explicitly as
``partner_angle``. That argument is the simulation device standing in for the
nonlocal correlation, not a claim about physics.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .coincidence import CoincidenceTable
from .source import MINUS, PLUS, EntangledStateParams, outcome_probabilities


class Side(str, Enum):
    ALICE = "alice"
    BOB = "bob"


@dataclass(frozen=True)
class LocalResponse:
    """Detection flag and result (+1/-1). Fields may be scalars or arrays;
    ``result`` is meaningless where ``detected`` is false."""

    detected: object
    result: object


def _sign(x):
    # sign(0) resolves to +
    return np.where(np.asarray(x) >= 0, PLUS, MINUS).astype(np.int8)


def _pack(detected, result):
    if np.ndim(result) == 0:
        return LocalResponse(bool(detected), int(result))
    return LocalResponse(np.broadcast_to(np.asarray(detected, dtype=bool), np.shape(result)).copy(),
                         np.asarray(result, dtype=np.int8))


class OutcomeModel:
    """Base class. Subclasses implement :meth:`sample_hidden` and :meth:`respond`."""

    name = "base"

    def sample_hidden(self, rng: np.random.Generator, n: int) -> np.ndarray:
        """Hidden variable lambda, uniform on [0, pi)."""
        return rng.uniform(0.0, math.pi, size=n)

    def respond(self, side, setting_angle, lam, random_draw=0.0) -> LocalResponse:
        raise NotImplementedError

    def joint_response(self, alpha, beta, lam, draw_a, draw_b):
        """Responses of both stations to the same hidden variable."""
        return (self.respond(Side.ALICE, alpha, lam, draw_a),
                self.respond(Side.BOB, beta, lam, draw_b))

    def __repr__(self):
        return f"{type(self).__name__}()"


class QuantumModel(OutcomeModel):
    """Samples the quantum prediction for the phi = pi state.

    ``lam`` is a shared uniform draw fixing Alice's result (marginal 1/2);
    Bob's result is drawn from the conditional law given Alice's result and
    her applied angle.
    """

    name = "quantum"

    def __init__(self, params: EntangledStateParams | None = None):
        self.params = params if params is not None else EntangledStateParams()

    def sample_hidden(self, rng, n):
        return rng.random(n)

    def respond(self, side, setting_angle, lam, random_draw=0.0, partner_angle=None):
        side = Side(side)
        alice_plus = np.asarray(lam) < 0.5
        if side is Side.ALICE:
            return _pack(True, np.where(alice_plus, PLUS, MINUS))
        if partner_angle is None:
            raise ValueError("the quantum model needs Alice's applied angle for Bob's response")
        p_pp, _, _, p_mp = outcome_probabilities(partner_angle, setting_angle, self.params)
        # P(Bob = + | Alice result) = P(Alice result, +) / (1/2)
        p_bob_plus = np.where(alice_plus, 2.0 * np.asarray(p_pp), 2.0 * np.asarray(p_mp))
        return _pack(True, np.where(np.asarray(random_draw) < p_bob_plus, PLUS, MINUS))

    def joint_response(self, alpha, beta, lam, draw_a, draw_b):
        return (self.respond(Side.ALICE, alpha, lam, draw_a),
                self.respond(Side.BOB, beta, lam, draw_b, partner_angle=alpha))

    def __repr__(self):
        return f"QuantumModel(V={self.params.visibility_V})"


class DeterministicLHV(OutcomeModel):
    """Sign model: Alice sign(cos 2(a - lam)), Bob -sign(cos 2(b - lam))."""

    name = "lhv-deterministic"

    def respond(self, side, setting_angle, lam, random_draw=0.0):
        side = Side(side)
        s = _sign(np.cos(2.0 * (np.asarray(setting_angle) - np.asarray(lam))))
        if side is Side.BOB:
            s = -s
        return _pack(True, s)


def deterministic_lhv(side, setting_angle, lam) -> int:
    return DeterministicLHV().respond(side, setting_angle, lam).result


class DetectionLoopholeLHV(OutcomeModel):
    """Local model exploiting non-detection on Bob's side.

    Alice always detects with sign(cos 2(a - lam)). Bob detects with
    probability |cos 2(b - lam)| and then answers sign(cos 2(b - lam)).
    On the both-detected subset this gives E = cos 2(b - a); Bob's mean
    efficiency is 2/pi.
    """

    name = "lhv-detection-loophole"

    def respond(self, side, setting_angle, lam, random_draw=0.0):
        side = Side(side)
        c = np.cos(2.0 * (np.asarray(setting_angle) - np.asarray(lam)))
        if side is Side.ALICE:
            return _pack(True, _sign(c))
        return _pack(np.asarray(random_draw) < np.abs(c), _sign(c))


MODEL_NAMES = ("quantum", "lhv-deterministic", "lhv-detection-loophole")


def get_model(name: str, params: EntangledStateParams | None = None) -> OutcomeModel:
    if name == "quantum":
        return QuantumModel(params)
    if name == "lhv-deterministic":
        return DeterministicLHV()
    if name == "lhv-detection-loophole":
        return DetectionLoopholeLHV()
    raise ValueError(f"unknown model {name!r}; expected one of {MODEL_NAMES}")


@dataclass
class EnsembleCounts:
    """Monte Carlo outcome of an untimed pair ensemble.

    ``table`` counts both-detected pairs. ``emitted[a, b]`` counts all pairs
    per setting pair, and ``product_sum[a, b]`` sums the outcome products
    with non-detections contributing zero.
    """

    table: CoincidenceTable
    emitted: np.ndarray
    product_sum: np.ndarray
    alice_detected: np.ndarray
    bob_detected: np.ndarray


def sample_ensemble(model: OutcomeModel, alice_angles, bob_angles, n_pairs: int,
                    rng: np.random.Generator, efficiency: float = 1.0,
                    alice_bias: float = 0.5, bob_bias: float = 0.5,
                    chunk: int = 2_000_000) -> EnsembleCounts:
    """Draw ``n_pairs`` pairs with random local settings and tally outcomes.

    No timing is simulated. ``efficiency`` is an extra independent
    per-photon loss applied on both sides.
    """
    alice_angles = np.asarray(alice_angles, dtype=float)
    bob_angles = np.asarray(bob_angles, dtype=float)
    counts = np.zeros((2, 2, 2, 2), dtype=np.int64)
    emitted = np.zeros((2, 2), dtype=np.int64)
    product_sum = np.zeros((2, 2), dtype=np.int64)
    a_det = np.zeros(2, dtype=np.int64)
    b_det = np.zeros(2, dtype=np.int64)
    remaining = int(n_pairs)
    while remaining > 0:
        n = min(chunk, remaining)
        remaining -= n
        sa = (rng.random(n) < alice_bias).astype(np.int64)
        sb = (rng.random(n) < bob_bias).astype(np.int64)
        lam = model.sample_hidden(rng, n)
        ra, rb = model.joint_response(alice_angles[sa], bob_angles[sb], lam,
                                      rng.random(n), rng.random(n))
        da = ra.detected
        db = rb.detected
        if efficiency < 1.0:
            da = da & (rng.random(n) < efficiency)
            db = db & (rng.random(n) < efficiency)
        both = da & db
        i = (ra.result == MINUS).astype(np.int64)
        j = (rb.result == MINUS).astype(np.int64)
        flat = ((sa * 2 + sb) * 2 + i) * 2 + j
        counts += np.bincount(flat[both], minlength=16).reshape(2, 2, 2, 2)
        emitted += np.bincount(sa * 2 + sb, minlength=4).reshape(2, 2)
        prod = ra.result.astype(np.int64) * rb.result.astype(np.int64) * both
        product_sum += np.bincount(sa * 2 + sb, weights=prod, minlength=4).astype(np.int64).reshape(2, 2)
        a_det += np.bincount(sa[da], minlength=2)
        b_det += np.bincount(sb[db], minlength=2)
    return EnsembleCounts(CoincidenceTable(counts), emitted, product_sum, a_det, b_det)
