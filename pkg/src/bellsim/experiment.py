"""Experiment configuration and the end-to-end simulate / analyze / scan runs."""
from __future__ import annotations

import copy
import csv
import json
import logging
import math
import os
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import yaml

from .analysis import (ChshEstimator, ChshResult, NoSignalingReport, SinusoidFit, fit_sinusoid,
                       no_signaling_check)
from .coincidence import (ClockOffsetEstimator, CoincidenceTable, OffsetEstimate, match_coincidences)
from .locality import Geometry, MeasurementBudget
from .models import get_model
from .source import EmissionConfig, EntangledStateParams, emit_pairs, outcome_probabilities
from .station import ClockModel, Station, StationConfig
from .tagstream import ALICE, BOB, TagStream, load_stream, write_stream

log = logging.getLogger(__name__)

# Back-computed so each detector sees ~14.5k counts/s at 5% efficiency after
# transition blanking and dead time; the source rate itself is not reported.
DEFAULT_PAIR_RATE = 620_000.0

ORACLE_FILENAME = "ORACLE_true_offset.json"
ALICE_FILE = "alice.btag"
BOB_FILE = "bob.btag"
MANIFEST_FILE = "manifest.json"


class ConfigurationError(ValueError):
    pass


@dataclass(frozen=True)
class AnalysisParams:
    window: float = 6e-9
    search_range: float = 1e-3
    coarse_bin: float = 1e-9
    refine_bin: float = 75e-12
    pairing: str = "nearest"
    snr_threshold: float = 5.0


@dataclass(frozen=True)
class ScanParams:
    start: float = 0.0
    stop: float = math.pi
    points: int = 41
    dwell: float = 5.0
    volts_per_degree: float | None = None


def _default_alice():
    return StationConfig(setting_angles=(0.0, math.pi / 4), fiber_delay=2.435e-6,
                         clock=ClockModel(offset=0.0))


def _default_bob():
    return StationConfig(setting_angles=(math.pi / 8, 3 * math.pi / 8), fiber_delay=2.440e-6,
                         clock=ClockModel(offset=87.654321e-6))


@dataclass(frozen=True)
class ExperimentConfig:
    model: str = "quantum"
    state: EntangledStateParams = field(default_factory=lambda: EntangledStateParams(math.pi, 0.97))
    emission: EmissionConfig = field(default_factory=lambda: EmissionConfig(DEFAULT_PAIR_RATE, 10.0))
    alice: StationConfig = field(default_factory=_default_alice)
    bob: StationConfig = field(default_factory=_default_bob)
    geometry: Geometry = field(default_factory=Geometry)
    budget: MeasurementBudget | None = None
    analysis: AnalysisParams = field(default_factory=AnalysisParams)
    scan: ScanParams = field(default_factory=ScanParams)
    output_dir: str = "run"
    seed: int = 20260101

    def __post_init__(self):
        get_model(self.model, self.state)

    @property
    def measurement_budget(self) -> MeasurementBudget:
        if self.budget is not None:
            return self.budget
        local = max(s.settle_delay + s.settle_margin for s in (self.alice, self.bob))
        return MeasurementBudget(choice_to_application=local)

    def replace(self, **kw) -> "ExperimentConfig":
        return replace(self, **kw)

    def with_duration(self, duration: float) -> "ExperimentConfig":
        return replace(self, emission=replace(self.emission, duration=duration))

    def to_dict(self) -> dict:
        return config_to_dict(self)


# --- structured text (YAML) ----------------------------------------------------

def _station_to_dict(s: StationConfig) -> dict:
    d = asdict(s)
    d["setting_angles_deg"] = [math.degrees(x) for x in d.pop("setting_angles")]
    d["analyzer_offset_deg"] = math.degrees(d.pop("analyzer_offset"))
    return d


def _station_from_dict(d: dict, base: StationConfig) -> StationConfig:
    d = dict(d)
    kw = {}
    if "setting_angles_deg" in d:
        kw["setting_angles"] = tuple(math.radians(x) for x in d.pop("setting_angles_deg"))
    if "analyzer_offset_deg" in d:
        kw["analyzer_offset"] = math.radians(d.pop("analyzer_offset_deg"))
    clock = d.pop("clock", None)
    if clock is not None:
        kw["clock"] = replace(base.clock, **clock)
    unknown = set(d) - set(StationConfig.__dataclass_fields__)
    if unknown:
        raise ConfigurationError(f"unknown station keys: {sorted(unknown)}")
    kw.update(d)
    return replace(base, **kw)


def config_to_dict(cfg: ExperimentConfig) -> dict:
    sc = asdict(cfg.scan)
    return {
        "model": cfg.model,
        "seed": cfg.seed,
        "state": {"phase_phi_deg": math.degrees(cfg.state.phase_phi), "visibility": cfg.state.visibility_V},
        "emission": {"pair_rate": cfg.emission.pair_rate, "duration": cfg.emission.duration},
        "alice": _station_to_dict(cfg.alice),
        "bob": _station_to_dict(cfg.bob),
        "geometry": asdict(cfg.geometry),
        "budget": None if cfg.budget is None else asdict(cfg.budget),
        "analysis": asdict(cfg.analysis),
        "scan": {"start_deg": math.degrees(sc["start"]), "stop_deg": math.degrees(sc["stop"]),
                 "points": sc["points"], "dwell": sc["dwell"], "volts_per_degree": sc["volts_per_degree"]},
        "output_dir": cfg.output_dir,
    }


def config_from_dict(d: dict | None) -> ExperimentConfig:
    d = copy.deepcopy(d or {})
    base = ExperimentConfig()
    kw = {}
    try:
        if "model" in d:
            kw["model"] = d.pop("model")
        if "seed" in d:
            kw["seed"] = int(d.pop("seed"))
        if "output_dir" in d:
            kw["output_dir"] = str(d.pop("output_dir"))
        st = d.pop("state", None)
        if st:
            kw["state"] = EntangledStateParams(math.radians(st.get("phase_phi_deg", 180.0)),
                                               st.get("visibility", base.state.visibility_V))
        em = d.pop("emission", None)
        if em:
            kw["emission"] = replace(base.emission, **em)
        for side in ("alice", "bob"):
            sd = d.pop(side, None)
            if sd:
                kw[side] = _station_from_dict(sd, getattr(base, side))
        geo = d.pop("geometry", None)
        if geo:
            kw["geometry"] = Geometry(**geo)
        bud = d.pop("budget", None)
        if bud:
            kw["budget"] = MeasurementBudget(**bud)
        an = d.pop("analysis", None)
        if an:
            kw["analysis"] = replace(base.analysis, **an)
        sc = d.pop("scan", None)
        if sc:
            sc = dict(sc)
            skw = {}
            for key in ("start", "stop"):
                if f"{key}_deg" in sc:
                    skw[key] = math.radians(sc.pop(f"{key}_deg"))
            skw.update(sc)
            kw["scan"] = replace(base.scan, **skw)
    except TypeError as exc:
        raise ConfigurationError(str(exc)) from exc
    if d:
        raise ConfigurationError(f"unknown config keys: {sorted(d)}")
    return replace(base, **kw)


def load_config(path) -> ExperimentConfig:
    with open(path) as fh:
        return config_from_dict(yaml.safe_load(fh))


def dump_config(cfg: ExperimentConfig, path) -> None:
    with open(path, "w") as fh:
        yaml.safe_dump(config_to_dict(cfg), fh, sort_keys=False)


# --- simulation -----------------------------------------------------------------

def _split_seed(seed, *extra):
    ss = np.random.SeedSequence([int(seed), *[int(e) for e in extra]])
    src, a, b = ss.spawn(3)
    return src, a, b


def _make_station(cfg: StationConfig, station_id: int, ss: np.random.SeedSequence) -> Station:
    key_ss, rng_ss = ss.spawn(2)
    key = int(key_ss.generate_state(1, np.uint64)[0])
    return Station(cfg, station_id, np.random.default_rng(rng_ss), key)


def true_offset(cfg: ExperimentConfig, t: float = 0.0) -> float:
    """Apparent offset tB - tA for a pair emitted at global time ``t``.

    Oracle for tests only; analysis never reads it.
    """
    ta = cfg.alice.clock.clock_map(t + cfg.alice.fiber_delay)
    tb = cfg.bob.clock.clock_map(t + cfg.bob.fiber_delay)
    return float(tb - ta)


@dataclass
class SimulationResult:
    stream_a: TagStream
    stream_b: TagStream
    n_pairs: int
    stats: dict
    true_offset: float


def simulate(cfg: ExperimentConfig, seed_extra: tuple = ()) -> SimulationResult:
    """Run source plus both stations; returns the two tag streams."""
    src_ss, a_ss, b_ss = _split_seed(cfg.seed, *seed_extra)
    src_rng = np.random.default_rng(src_ss)
    model = get_model(cfg.model, cfg.state)
    st_a = _make_station(cfg.alice, ALICE, a_ss)
    st_b = _make_station(cfg.bob, BOB, b_ss)
    duration = cfg.emission.duration
    t_emit = emit_pairs(cfg.emission, src_rng)
    lam = model.sample_hidden(src_rng, t_emit.size)
    ta = t_emit + cfg.alice.fiber_delay
    tb = t_emit + cfg.bob.fiber_delay
    alpha = cfg.alice.applied_angles()[st_a.applied_setting(ta)]
    beta = cfg.bob.applied_angles()[st_b.applied_setting(tb)]
    ra, rb = model.joint_response(alpha, beta, lam, st_a.rng.random(t_emit.size), st_b.rng.random(t_emit.size))
    del lam, alpha, beta
    stream_a = st_a.acquire(ta, ra, duration)
    stream_b = st_b.acquire(tb, rb, duration)
    stats = {"alice": asdict(st_a.stats), "bob": asdict(st_b.stats)}
    return SimulationResult(stream_a, stream_b, int(t_emit.size), stats, true_offset(cfg))


def write_run(result: SimulationResult, cfg: ExperimentConfig, out_dir) -> dict:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_stream(out / ALICE_FILE, result.stream_a)
    write_stream(out / BOB_FILE, result.stream_b)
    manifest = {
        "config": config_to_dict(cfg),
        "files": {"alice": ALICE_FILE, "bob": BOB_FILE},
        "pairs_emitted": result.n_pairs,
        "records": {"alice": len(result.stream_a), "bob": len(result.stream_b)},
        "station_stats": result.stats,
        "oracle_file": ORACLE_FILENAME,
    }
    with open(out / MANIFEST_FILE, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    with open(out / ORACLE_FILENAME, "w") as fh:
        json.dump({"_note": "simulation ground truth for tests; never read by analysis",
                   "true_offset_s": result.true_offset,
                   "alice_realized_clock_offset_s": cfg.alice.clock.realized_offset,
                   "bob_realized_clock_offset_s": cfg.bob.clock.realized_offset}, fh, indent=2)
    return manifest


# --- analysis -------------------------------------------------------------------

@dataclass
class AnalysisReport:
    offset: OffsetEstimate
    table: CoincidenceTable
    chsh: ChshResult
    assignment: tuple
    correlations: list
    no_signaling: NoSignalingReport
    singles: dict
    span: float
    window: float
    pairs: np.ndarray = field(repr=False, default=None)

    @property
    def coincidences(self) -> int:
        return self.table.total


def _singles(stream: TagStream) -> dict:
    return {f"s{s}{'+-'[d]}": int(np.sum((stream.settings == s) & (stream.detectors == d)))
            for s in (0, 1) for d in (0, 1)}


def analyze_streams(stream_a: TagStream, stream_b: TagStream, params: AnalysisParams = AnalysisParams(),
                    offset: float | None = None, center: float = 0.0) -> AnalysisReport:
    """Offline analysis of two streams; the offset comes from the streams."""
    if stream_a.station_id != ALICE or stream_b.station_id != BOB:
        raise ConfigurationError(
            f"expected station ids (0, 1), got ({stream_a.station_id}, {stream_b.station_id})")
    if len(stream_a) == 0 or len(stream_b) == 0:
        raise ConfigurationError("cannot analyze an empty stream")
    est = ClockOffsetEstimator(coarse_range=params.search_range if offset is None else 20e-9,
                               coarse_bin=params.coarse_bin, refine_bin=params.refine_bin,
                               center=center if offset is None else offset,
                               snr_threshold=params.snr_threshold).fit(stream_a, stream_b)
    match = match_coincidences(stream_a, stream_b, est.offset_, params.window, params.pairing)
    chsh_est = ChshEstimator().fit(match.table)
    span = max(stream_a.timestamps[-1] - stream_a.timestamps[0],
               stream_b.timestamps[-1] - stream_b.timestamps[0]) * 1e-12
    return AnalysisReport(est.estimate_, match.table, chsh_est.result_, chsh_est.assignment_,
                          chsh_est.correlations_, no_signaling_check(match.table),
                          {"alice": _singles(stream_a), "bob": _singles(stream_b)}, span, params.window,
                          match.pairs)


def analyze_files(path_a, path_b, params: AnalysisParams = AnalysisParams()) -> AnalysisReport:
    return analyze_streams(load_stream(path_a), load_stream(path_b), params)


def write_report(report: AnalysisReport, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    report.table.to_csv(out / "coincidences.csv", report.span or None)
    with open(out / "correlations.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["alice_setting", "bob_setting", "E", "sigma_E", "N"])
        for a in (0, 1):
            for b in (0, 1):
                c = report.correlations[a][b]
                w.writerow([a, b, f"{c.E:.6f}", f"{c.sigma_E:.6f}", c.N])
        w.writerow([])
        w.writerow(["S", "sigma_S", "n_sigma_violation", "alice_primary", "bob_primary"])
        r = report.chsh
        w.writerow([f"{r.S:.6f}", f"{r.sigma_S:.6f}", f"{r.n_sigma_violation:.3f}", *report.assignment])
    with open(out / "no_signaling.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["side", "local_setting", "p_plus_remote0", "p_plus_remote1", "n_remote0", "n_remote1",
                    "delta", "z", "status"])
        for m in report.no_signaling.comparisons:
            w.writerow([m.side, m.local_setting, *m.p_plus, *m.n, m.delta, m.z, m.status])
    o = report.offset
    with open(out / "peak.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["offset_s", "peak_height", "background_mean", "snr", "fwhm_s", "window_s", "coincidences"])
        w.writerow([repr(o.offset), o.peak_height, o.background_mean, o.snr, o.fwhm, report.window,
                    report.coincidences])
    with open(out / "singles.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["station", "setting", "detector", "count"])
        for side, d in report.singles.items():
            for k, v in d.items():
                w.writerow([side, k[1], k[2], v])


def format_report(report: AnalysisReport) -> str:
    r, o = report.chsh, report.offset
    lines = [
        f"offset        {o.offset * 1e6:.6f} us  (snr {o.snr:.1f}, fwhm {o.fwhm * 1e9:.2f} ns)",
        f"coincidences  {report.coincidences} in {report.span:.3f} s, window {report.window * 1e9:g} ns",
    ]
    for a in (0, 1):
        for b in (0, 1):
            c = report.correlations[a][b]
            lines.append(f"E({a},{b})        {c.E:+.4f} +/- {c.sigma_E:.4f}  (N={c.N})")
    lines.append(f"S             {r.S:.4f} +/- {r.sigma_S:.4f}  ({r.n_sigma_violation:.1f} sigma above 2)")
    ns = report.no_signaling
    lines.append(f"no-signaling  max |dP| {ns.max_abs_delta:.4f}, max z {ns.max_z:.2f}, "
                 f"{'ok' if ns.passed else 'FLAGGED'}")
    return "\n".join(lines)


# --- analyzer scan ------------------------------------------------------------------

CURVES = {
    "A+0/B+0": (0, 0, 0, 0),
    "A+1/B-0": (1, 0, 0, 1),
    "A-0/B+1": (0, 1, 1, 0),
    "A-1/B-1": (1, 1, 1, 1),
}


@dataclass
class ScanResult:
    angles: np.ndarray
    counts: np.ndarray  # (points, 2, 2, 2, 2)
    singles: np.ndarray  # (points, 2 stations, 2 detectors)
    fits: dict
    dwell: float
    singles_oscillation_z: np.ndarray
    volts_per_degree: float | None = None

    def curve(self, name):
        a, b, i, j = CURVES[name]
        return self.counts[:, a, b, i, j]

    @property
    def singles_flat(self) -> bool:
        return bool(np.all(self.singles_oscillation_z < 3.0))


def oscillation_significance(angles, counts) -> float:
    """Amplitude of a cos/sin 2-theta component in ``counts`` over its
    standard error (Poisson-weighted linear least squares)."""
    y = np.asarray(counts, dtype=float)
    w = 1.0 / np.sqrt(np.maximum(y, 1.0))
    X = np.column_stack([np.ones_like(y), np.cos(2 * angles), np.sin(2 * angles)])
    coef, *_ = np.linalg.lstsq(X * w[:, None], y * w, rcond=None)
    cov = np.linalg.inv((X * w[:, None]).T @ (X * w[:, None]))
    amp = math.hypot(coef[1], coef[2])
    if amp == 0:
        return 0.0
    g = np.array([0.0, coef[1] / amp, coef[2] / amp])
    return float(amp / math.sqrt(g @ cov @ g))


def run_scan(cfg: ExperimentConfig, angles=None, dwell: float | None = None, noiseless: bool = False,
             progress=None) -> ScanResult:
    """Sweep Alice's analyzer rotation and fit the coincidence curves.

    Each point is an independent acquisition of ``dwell`` seconds sharing
    the run's clocks; the offset is searched fully at the first point and
    in a narrow window around it afterwards.
    """
    sp = cfg.scan
    if angles is None:
        angles = np.linspace(sp.start, sp.stop, sp.points)
    angles = np.asarray(angles, dtype=float)
    dwell = sp.dwell if dwell is None else dwell
    counts = np.zeros((angles.size, 2, 2, 2, 2))
    singles = np.zeros((angles.size, 2, 2))
    offset = None
    for k, theta in enumerate(angles):
        point_cfg = replace(cfg, alice=replace(cfg.alice, analyzer_offset=cfg.alice.analyzer_offset + theta))
        point_cfg = point_cfg.with_duration(dwell)
        if noiseless:
            counts[k], singles[k] = _expected_counts(point_cfg)
        else:
            sim = simulate(point_cfg, seed_extra=(k,))
            rep = analyze_streams(sim.stream_a, sim.stream_b, cfg.analysis, offset=offset)
            offset = rep.offset.offset
            counts[k] = rep.table.counts
            for s, st in enumerate((sim.stream_a, sim.stream_b)):
                singles[k, s] = [np.sum(st.detectors == 0), np.sum(st.detectors == 1)]
        if progress:
            progress(k, angles.size)
    fits = {name: fit_sinusoid(angles, counts[:, a, b, i, j]) for name, (a, b, i, j) in CURVES.items()}
    osc = np.array([oscillation_significance(angles, singles[:, s, d]) for s in (0, 1) for d in (0, 1)])
    return ScanResult(angles, counts, singles, fits, dwell, osc, sp.volts_per_degree)


def _expected_counts(cfg: ExperimentConfig):
    """Mean coincidence and singles counts of one scan point (quantum model only)."""
    if cfg.model != "quantum":
        raise ConfigurationError("noiseless scan is defined for the quantum model only")
    n = cfg.emission.pair_rate * cfg.emission.duration
    eta = cfg.alice.efficiency * cfg.bob.efficiency
    out = np.zeros((2, 2, 2, 2))
    al, be = cfg.alice.applied_angles(), cfg.bob.applied_angles()
    for a in (0, 1):
        pa = cfg.alice.rng_bias if a else 1 - cfg.alice.rng_bias
        for b in (0, 1):
            pb = cfg.bob.rng_bias if b else 1 - cfg.bob.rng_bias
            p_pp, p_mm, p_pm, p_mp = outcome_probabilities(al[a], be[b], cfg.state)
            out[a, b] = n * eta * pa * pb * np.array([[p_pp, p_pm], [p_mp, p_mm]])
    singles = np.array([[n * cfg.alice.efficiency / 2] * 2, [n * cfg.bob.efficiency / 2] * 2])
    return out, singles


def write_scan(result: ScanResult, out_dir, samples_per_point: int = 4) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "scan_rates.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        cols = [f"{name}_per_s" for name in CURVES]
        head = ["angle_deg"] + (["bias_volts"] if result.volts_per_degree else []) + cols
        head += ["alice+_per_s", "alice-_per_s", "bob+_per_s", "bob-_per_s"]
        w.writerow(head)
        for k, th in enumerate(result.angles):
            row = [f"{math.degrees(th):.4f}"]
            if result.volts_per_degree:
                row.append(f"{math.degrees(th) * result.volts_per_degree:.4f}")
            row += [f"{result.curve(name)[k] / result.dwell:.6g}" for name in CURVES]
            row += [f"{x / result.dwell:.6g}" for x in result.singles[k].ravel()]
            w.writerow(row)
    with open(out / "scan_fits.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["curve", "mean_level", "amplitude", "visibility", "visibility_err", "phase_deg",
                    "chi2_per_dof"])
        for name, f in result.fits.items():
            w.writerow([name, f.mean_level, f.amplitude, f.visibility, f.errors.get("visibility"),
                        math.degrees(f.phase), f.chi2_per_dof])
    fine = np.linspace(result.angles[0], result.angles[-1], (result.angles.size - 1) * samples_per_point + 1)
    with open(out / "scan_fit_curves.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["angle_deg"] + [f"{name}_fit_per_s" for name in CURVES])
        for th in fine:
            w.writerow([f"{math.degrees(th):.4f}"] + [f"{result.fits[n](th) / result.dwell:.6g}" for n in CURVES])
