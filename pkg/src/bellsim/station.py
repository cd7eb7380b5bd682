"""One observer station: random switching, detection, dead time, time tagging."""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .models import LocalResponse
from .source import MINUS
from .tagstream import TagStream

_U64 = np.uint64
_GOLDEN = _U64(0x9E3779B97F4A7C15)
_MIX1 = _U64(0xBF58476D1CE4E5B9)
_MIX2 = _U64(0x94D049BB133111EB)


def _splitmix64(x):
    x = np.asarray(x, dtype=np.uint64)
    z = x + _GOLDEN
    z = (z ^ (z >> _U64(30))) * _MIX1
    z = (z ^ (z >> _U64(27))) * _MIX2
    return z ^ (z >> _U64(31))


def slot_bits(slots, key: int, bias: float = 0.5) -> np.ndarray:
    """Latched random bit for each slot index.

    Counter-based (a hash of slot and key), so any slot can be queried in any
    order and the same key always reproduces the same bit sequence.
    """
    slots = np.asarray(slots, dtype=np.int64).view(np.uint64)
    with np.errstate(over="ignore"):
        h = _splitmix64(slots ^ _splitmix64(_U64(key & 0xFFFFFFFFFFFFFFFF)))
    u = (h >> _U64(11)).astype(np.float64) * 2.0 ** -53
    return (u < bias).astype(np.uint8)


def setting_at(t, key: int, sample_period: float = 100e-9, bias: float = 0.5):
    """Return ``(bit, slot)`` for global time(s) ``t``; the bit is the one
    latched at the start of slot ``floor(t / sample_period)``."""
    slot = np.floor(np.asarray(t, dtype=float) / sample_period).astype(np.int64)
    bit = slot_bits(slot, key, bias)
    if np.ndim(slot) == 0:
        return int(bit), int(slot)
    return bit, slot


@dataclass(frozen=True)
class ClockModel:
    """Station time base. ``offset`` is the intended offset; the realized one
    is rounded to ``sync_quantization``."""

    offset: float = 0.0
    drift: float = 0.0
    jitter_sigma: float = 0.5e-9
    sync_quantization: float = 20e-9

    def __post_init__(self):
        if not abs(self.drift) < 1e-6:
            raise ValueError("|drift| must be < 1e-6")
        if self.jitter_sigma < 0:
            raise ValueError("jitter_sigma must be >= 0")
        if self.sync_quantization < 0:
            raise ValueError("sync_quantization must be >= 0")

    @property
    def realized_offset(self) -> float:
        q = self.sync_quantization
        if q == 0:
            return self.offset
        return round(self.offset / q) * q

    def clock_map(self, t):
        """Global seconds to local seconds (no jitter)."""
        return np.asarray(t, dtype=float) * (1.0 + self.drift) + self.realized_offset


def clock_map(t, clock: ClockModel):
    return clock.clock_map(t)


BLANK_MODES = ("transitions", "all")


@dataclass(frozen=True)
class StationConfig:
    setting_angles: tuple = (0.0, math.pi / 4)
    sample_period: float = 100e-9
    rng_bias: float = 0.5
    settle_delay: float = 75e-9
    settle_margin: float = 25e-9
    transition_blank: float = 10e-9
    blank_mode: str = "transitions"
    efficiency: float = 0.05
    dark_rate: float = 300.0
    dead_time: float = 1e-6
    tag_resolution: float = 75e-12
    fiber_delay: float = 2.435e-6
    analyzer_offset: float = 0.0
    clock: ClockModel = field(default_factory=ClockModel)

    def __post_init__(self):
        if len(self.setting_angles) != 2:
            raise ValueError("setting_angles must hold two angles")
        if not 0.48 <= self.rng_bias <= 0.52:
            raise ValueError("rng_bias must lie in [0.48, 0.52]")
        if not 0.0 <= self.efficiency <= 1.0:
            raise ValueError("efficiency must lie in [0, 1]")
        if self.dead_time < 0 or self.dark_rate < 0 or self.transition_blank < 0:
            raise ValueError("dead_time, dark_rate and transition_blank must be >= 0")
        if self.sample_period <= 0:
            raise ValueError("sample_period must be > 0")
        if self.blank_mode not in BLANK_MODES:
            raise ValueError(f"blank_mode must be one of {BLANK_MODES}")
        tick = self.tag_resolution / 1e-12
        if self.tag_resolution <= 0 or abs(tick - round(tick)) > 1e-6:
            raise ValueError("tag_resolution must be a whole number of picoseconds")

    @property
    def tick_ps(self) -> int:
        return int(round(self.tag_resolution / 1e-12))

    def applied_angles(self) -> np.ndarray:
        return np.asarray(self.setting_angles, dtype=float) + self.analyzer_offset

    def with_(self, **kw) -> "StationConfig":
        return replace(self, **kw)


@dataclass(frozen=True)
class TimeTag:
    timestamp: int
    setting_bit: int
    detector_bit: int


@dataclass
class StationStats:
    arrivals: int = 0
    detected: int = 0
    dark: int = 0
    blanked: int = 0
    dead: int = 0
    before_clock_start: int = 0
    accepted: int = 0


def dead_time_filter(times, channels, dead_time: float) -> np.ndarray:
    """Non-paralyzable per-channel dead time; ``times`` must be sorted and in
    the same unit as ``dead_time``.

    Returns a keep-mask. An event is dropped when it falls within
    ``dead_time`` of the previous *accepted* event on its channel.
    """
    times = np.asarray(times)
    channels = np.asarray(channels)
    keep = np.ones(times.shape[0], dtype=bool)
    if dead_time <= 0 or times.size == 0:
        return keep
    for ch in np.unique(channels):
        idx = np.flatnonzero(channels == ch)
        ts = times[idx]
        gaps = np.diff(ts)
        if gaps.size == 0 or gaps.min() >= dead_time:
            continue
        last = -math.inf
        local = keep[idx]
        for k, t in enumerate(ts.tolist()):
            if t - last < dead_time:
                local[k] = False
            else:
                last = t
        keep[idx] = local
    return keep


class Station:
    """Stateful station simulator.

    ``rng`` drives efficiency, jitter and dark counts; ``setting_key`` keys
    the counter-based switching bit sequence.
    """

    def __init__(self, config: StationConfig, station_id: int, rng: np.random.Generator,
                 setting_key: int):
        self.config = config
        self.station_id = station_id
        self.rng = rng
        self.setting_key = int(setting_key)
        self.stats = StationStats()
        self._last_t = -math.inf
        self._last_accepted = {}

    def setting_at(self, t):
        return setting_at(t, self.setting_key, self.config.sample_period, self.config.rng_bias)

    def applied_setting(self, t):
        """Setting optically in force at global time ``t`` (electronics latency)."""
        return self.setting_at(np.asarray(t, dtype=float) - self.config.settle_delay)[0]

    def blanked(self, t) -> np.ndarray:
        cfg = self.config
        if cfg.transition_blank <= 0:
            return np.zeros(np.shape(t), dtype=bool)
        # the modulator switches when t - settle_delay crosses a slot boundary
        x = np.asarray(t, dtype=float) - cfg.settle_delay
        k = np.rint(x / cfg.sample_period).astype(np.int64)
        near = np.abs(x - k * cfg.sample_period) <= cfg.transition_blank / 2 + 1e-15
        if cfg.blank_mode == "all":
            return near
        key, bias = self.setting_key, cfg.rng_bias
        return near & (slot_bits(k, key, bias) != slot_bits(k - 1, key, bias))

    def _quantize(self, local_seconds):
        tick = self.config.tick_ps
        return (np.rint(np.asarray(local_seconds) / (tick * 1e-12)).astype(np.int64)) * tick

    def process_arrival(self, t: float, response: LocalResponse):
        """Single-event path; returns a :class:`TimeTag` or ``None``."""
        if t < self._last_t:
            raise ValueError(f"arrival at {t} s precedes previous arrival at {self._last_t} s")
        self._last_t = t
        cfg = self.config
        self.stats.arrivals += 1
        if not response.detected or not self.rng.random() < cfg.efficiency:
            return None
        self.stats.detected += 1
        if self.blanked(t):
            self.stats.blanked += 1
            return None
        det = int(response.result == MINUS)
        local = cfg.clock.clock_map(t) + self.rng.normal(0.0, cfg.clock.jitter_sigma)
        ps = int(self._quantize(local))
        if ps < 0:
            self.stats.before_clock_start += 1
            return None
        if ps - self._last_accepted.get(det, -math.inf) < cfg.dead_time * 1e12:
            self.stats.dead += 1
            return None
        self._last_accepted[det] = ps
        self.stats.accepted += 1
        return TimeTag(ps, int(self.applied_setting(t)), det)

    def dark_counts(self, duration: float):
        """Dark-count times and detector bits, merged in time order."""
        rate = self.config.dark_rate
        if rate == 0 or duration <= 0:
            return np.empty(0), np.empty(0, dtype=np.uint8)
        times, dets = [], []
        for det in (0, 1):
            n = self.rng.poisson(rate * duration)
            times.append(self.rng.uniform(0.0, duration, n))
            dets.append(np.full(n, det, dtype=np.uint8))
        t = np.concatenate(times)
        d = np.concatenate(dets)
        order = np.argsort(t, kind="stable")
        return t[order], d[order]

    def acquire(self, arrival_times, response: LocalResponse, duration: float) -> TagStream:
        """Vectorized pipeline for a whole run.

        ``arrival_times`` are global seconds (sorted); ``response`` holds the
        model's per-photon arrays. Dark counts over ``[0, duration)`` are
        merged in before blanking and dead time.
        """
        cfg = self.config
        t = np.asarray(arrival_times, dtype=float)
        if t.size > 1 and np.any(np.diff(t) < 0):
            raise ValueError("arrival times must be non-decreasing")
        self.stats.arrivals += t.size
        det_mask = np.asarray(response.detected, dtype=bool) & (self.rng.random(t.size) < cfg.efficiency)
        sig_t = t[det_mask]
        sig_d = (np.asarray(response.result)[det_mask] == MINUS).astype(np.uint8)
        self.stats.detected += sig_t.size
        dark_t, dark_d = self.dark_counts(duration)
        self.stats.dark += dark_t.size
        all_t = np.concatenate([sig_t, dark_t])
        all_d = np.concatenate([sig_d, dark_d])
        order = np.argsort(all_t, kind="stable")
        all_t, all_d = all_t[order], all_d[order]

        blank = self.blanked(all_t)
        self.stats.blanked += int(blank.sum())
        all_t, all_d = all_t[~blank], all_d[~blank]
        settings = self.applied_setting(all_t)
        local = cfg.clock.clock_map(all_t)
        if cfg.clock.jitter_sigma > 0:
            local = local + self.rng.normal(0.0, cfg.clock.jitter_sigma, all_t.size)
        ps = self._quantize(local)
        ok = ps >= 0
        self.stats.before_clock_start += int((~ok).sum())
        order = np.argsort(ps[ok], kind="stable")
        ps, settings, all_d = ps[ok][order], settings[ok][order], all_d[ok][order]

        # dead time acts on the tagged times so the output stream itself obeys it
        keep = dead_time_filter(ps, all_d, cfg.dead_time * 1e12)
        self.stats.dead += int((~keep).sum())
        ps, settings, all_d = ps[keep], settings[keep], all_d[keep]
        self.stats.accepted += ps.size
        start = int(self._quantize(max(cfg.clock.clock_map(0.0), 0.0)))
        return TagStream(ps, settings, all_d, station_id=self.station_id,
                         tick_ps=cfg.tick_ps, start_time=start)
