"""Command line: ``bellsim {simulate,analyze,scan,audit}``."""
from __future__ import annotations

import argparse
import logging
import math
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import experiment as ex
from .coincidence import NoPeakError
from .locality import audit, audit_streams
from .models import MODEL_NAMES
from .tagstream import TagStreamError, load_stream

log = logging.getLogger("bellsim")


def _config(args) -> ex.ExperimentConfig:
    cfg = ex.load_config(args.config) if getattr(args, "config", None) else ex.ExperimentConfig()
    if getattr(args, "model", None):
        cfg = replace(cfg, model=args.model)
    if getattr(args, "seed", None) is not None:
        cfg = replace(cfg, seed=args.seed)
    if getattr(args, "duration", None) is not None:
        cfg = cfg.with_duration(args.duration)
    if getattr(args, "visibility", None) is not None:
        cfg = replace(cfg, state=replace(cfg.state, visibility_V=args.visibility))
    an = cfg.analysis
    if getattr(args, "window", None) is not None:
        an = replace(an, window=args.window * 1e-9)
    if getattr(args, "search_range", None) is not None:
        an = replace(an, search_range=args.search_range * 1e-6)
    if getattr(args, "pairing", None):
        an = replace(an, pairing=args.pairing)
    cfg = replace(cfg, analysis=an)
    if getattr(args, "output_dir", None):
        cfg = replace(cfg, output_dir=args.output_dir)
    return cfg


def cmd_simulate(args) -> int:
    cfg = _config(args)
    res = ex.simulate(cfg)
    manifest = ex.write_run(res, cfg, cfg.output_dir)
    dur = cfg.emission.duration
    print(f"wrote {cfg.output_dir}/{ex.ALICE_FILE} ({manifest['records']['alice']} tags) and "
          f"{cfg.output_dir}/{ex.BOB_FILE} ({manifest['records']['bob']} tags)")
    if dur > 0:
        for name, st in (("alice", res.stream_a), ("bob", res.stream_b)):
            per_det = np.bincount(st.detectors, minlength=2) / dur
            print(f"{name} singles/s per detector: + {per_det[0]:.0f}, - {per_det[1]:.0f}")
    return 0


def cmd_analyze(args) -> int:
    cfg = _config(args)
    a, b = load_stream(args.file_a), load_stream(args.file_b)
    report = ex.analyze_streams(a, b, cfg.analysis)
    ex.write_report(report, cfg.output_dir)
    print(ex.format_report(report))
    if args.audit:
        rep = audit_streams(a, b, cfg.geometry, cfg.measurement_budget, report.offset.offset, report.pairs)
        print(f"locality      {rep.status}, min slack {rep.min_slack * 1e6:.3f} us over {rep.n_coincidences}")
    return 0


def cmd_scan(args) -> int:
    cfg = _config(args)
    sp = cfg.scan
    if args.start is not None or args.stop is not None or args.points is not None:
        sp = replace(sp, start=math.radians(args.start) if args.start is not None else sp.start,
                     stop=math.radians(args.stop) if args.stop is not None else sp.stop,
                     points=args.points or sp.points)
    if args.dwell is not None:
        sp = replace(sp, dwell=args.dwell)
    cfg = replace(cfg, scan=sp)
    res = ex.run_scan(cfg, noiseless=args.noiseless,
                      progress=lambda k, n: log.info("scan point %d/%d", k + 1, n))
    ex.write_scan(res, cfg.output_dir)
    for name, f in res.fits.items():
        print(f"{name}: V = {f.visibility:.4f} +/- {f.errors['visibility']:.4f}, "
              f"phase {math.degrees(f.phase):.2f} deg, chi2/dof {f.chi2_per_dof:.2f}")
    print(f"singles oscillation z (A+, A-, B+, B-): {np.round(res.singles_oscillation_z, 2).tolist()}"
          f" -> {'flat' if res.singles_flat else 'OSCILLATING'}")
    return 0


def cmd_audit(args) -> int:
    cfg = _config(args)
    geo = cfg.geometry
    if args.separation is not None:
        geo = replace(geo, separation=args.separation)
    rep = audit(geo, cfg.measurement_budget)
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    rep.to_csv(out / "locality.csv")
    print("\n".join(rep.lines()))
    return 0 if rep.passed or not args.strict else 3


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="bellsim", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, analysis=True):
        sp.add_argument("--config", help="YAML experiment config")
        sp.add_argument("--output-dir", "-o")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--model", choices=MODEL_NAMES)
        if analysis:
            sp.add_argument("--window", type=float, help="coincidence window, ns (full width)")
            sp.add_argument("--search-range", type=float, help="offset search half range, us")
            sp.add_argument("--pairing", choices=("nearest", "all"))

    s = sub.add_parser("simulate", help="simulate both stations to tag files")
    common(s, analysis=False)
    s.add_argument("--duration", type=float, help="seconds")
    s.add_argument("--visibility", type=float)
    s.set_defaults(func=cmd_simulate)

    a = sub.add_parser("analyze", help="offline coincidence analysis of two tag files")
    common(a)
    a.add_argument("file_a")
    a.add_argument("file_b")
    a.add_argument("--audit", action="store_true", help="also audit space-like separation per coincidence")
    a.set_defaults(func=cmd_analyze)

    c = sub.add_parser("scan", help="sweep Alice's analyzer and fit the coincidence curves")
    common(c)
    c.add_argument("--start", type=float, help="degrees")
    c.add_argument("--stop", type=float, help="degrees")
    c.add_argument("--points", type=int)
    c.add_argument("--dwell", type=float, help="seconds per point")
    c.add_argument("--visibility", type=float)
    c.add_argument("--noiseless", action="store_true", help="expected counts instead of sampling")
    c.set_defaults(func=cmd_scan)

    d = sub.add_parser("audit", help="space-like separation budget check")
    common(d, analysis=False)
    d.add_argument("--separation", type=float, help="meters")
    d.add_argument("--strict", action="store_true", help="exit 3 when the audit fails")
    d.set_defaults(func=cmd_audit)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ex.ConfigurationError, TagStreamError, NoPeakError, ValueError, OSError) as exc:
        print(f"bellsim: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
