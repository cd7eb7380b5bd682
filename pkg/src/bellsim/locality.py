"""Space-like separation audit for the two measurement processes."""
from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass

import numpy as np

from ._validation import check_stream

SPEED_OF_LIGHT = 299_792_458.0


@dataclass(frozen=True)
class Geometry:
    separation: float = 400.0
    signal_speed: float = SPEED_OF_LIGHT

    def __post_init__(self):
        if not self.separation > 0:
            raise ValueError("separation must be > 0")
        if not self.signal_speed > 0:
            raise ValueError("signal_speed must be > 0")

    @property
    def light_time(self) -> float:
        return self.separation / self.signal_speed


@dataclass(frozen=True)
class MeasurementBudget:
    """Durations of one measurement process (seconds).

    ``choice_to_application`` defaults to the 75 ns delay chain plus a 25 ns
    margin. Detection is folded into it, hence the zero default for
    ``application_to_registration``.
    """

    choice_to_application: float = 100e-9
    application_to_registration: float = 0.0
    source_sync_skew: float = 5e-9

    def __post_init__(self):
        if min(self.choice_to_application, self.application_to_registration, self.source_sync_skew) < 0:
            raise ValueError("budget entries must be >= 0")

    @property
    def local_duration(self) -> float:
        return self.choice_to_application + self.application_to_registration

    @property
    def total(self) -> float:
        return self.local_duration + self.source_sync_skew

    def scaled(self, k: float) -> "MeasurementBudget":
        return MeasurementBudget(k * self.choice_to_application, k * self.application_to_registration,
                                 k * self.source_sync_skew)


@dataclass(frozen=True)
class LocalityReport:
    light_time: float
    measurement_duration: float
    slack: float
    passed: bool
    margin_ratio: float

    def lines(self):
        return [
            f"light_time_s,{self.light_time:.6e}",
            f"measurement_duration_s,{self.measurement_duration:.6e}",
            f"slack_s,{self.slack:.6e}",
            f"margin_ratio,{self.margin_ratio:.6f}",
            f"pass,{self.passed}",
        ]

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["quantity", "value"])
            for k, v in asdict(self).items():
                w.writerow([k, v])


def audit(geometry: Geometry = Geometry(), budget: MeasurementBudget = MeasurementBudget()) -> LocalityReport:
    light = geometry.light_time
    duration = budget.total
    slack = light - duration
    return LocalityReport(light, duration, slack, slack > 0, duration / light)


@dataclass
class StreamAuditReport:
    status: str  # "pass", "fail" or "no data"
    n_coincidences: int
    min_slack: float
    mean_slack: float
    n_violations: int
    light_time: float

    @property
    def passed(self) -> bool:
        return self.status == "pass"


def audit_streams(stream_a, stream_b, geometry: Geometry, budget: MeasurementBudget, offset: float,
                  pairs=None, window: float = 6e-9) -> StreamAuditReport:
    """Per-coincidence worst case on the common time axis.

    For a coincidence registered at ``tA`` and ``tB`` (offset-corrected),
    the slack of Alice's process against Bob's is
    ``(tB - d + L/c) - tA`` with ``d`` the local measurement duration; the
    reported slack is the smaller of the two directions minus the source
    sync skew, which the offset recovery cannot see.
    """
    if offset is None:
        raise ValueError("audit_streams requires a recovered offset")
    sa = check_stream(stream_a, "stream_a")
    sb = check_stream(stream_b, "stream_b")
    if pairs is None:
        from .coincidence import match_coincidences
        pairs = match_coincidences(sa, sb, offset, window).pairs
    pairs = np.asarray(pairs).reshape(-1, 2)
    light = geometry.light_time
    if pairs.shape[0] == 0:
        return StreamAuditReport("no data", 0, math.nan, math.nan, 0, light)
    ta = sa.timestamps[pairs[:, 0]] * 1e-12
    tb = sb.timestamps[pairs[:, 1]] * 1e-12 - offset
    slack = light - budget.local_duration - np.abs(ta - tb) - budget.source_sync_skew
    n_bad = int(np.sum(slack <= 0))
    return StreamAuditReport("pass" if n_bad == 0 else "fail", int(slack.size), float(slack.min()),
                             float(slack.mean()), n_bad, light)
