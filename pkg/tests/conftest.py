import math
import time

import numpy as np
import pytest

from bellsim.experiment import ExperimentConfig, analyze_streams, simulate

ACCEPTANCE_LINES = []


@pytest.fixture(scope="session")
def default_run():
    """The default 10 s quantum run, simulated and analyzed once per session."""
    cfg = ExperimentConfig()
    t0 = time.perf_counter()
    sim = simulate(cfg)
    report = analyze_streams(sim.stream_a, sim.stream_b, cfg.analysis)
    elapsed = time.perf_counter() - t0
    return cfg, sim, report, elapsed


@pytest.fixture
def rng():
    return np.random.default_rng(20240607)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
