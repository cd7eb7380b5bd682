"""Offline reconciliation of two independently clocked tag streams."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator

from ._validation import check_positive, check_stream, seconds_to_ps

DETECTOR_LABELS = ("+", "-")


@dataclass(eq=False)
class CoincidenceTable:
    """``counts[a, b, i, j]``: Alice setting a, Bob setting b, Alice detector
    i, Bob detector j (0 is "+", 1 is "-")."""

    counts: np.ndarray

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.int64)
        if self.counts.shape != (2, 2, 2, 2):
            raise ValueError("counts must have shape (2, 2, 2, 2)")
        if np.any(self.counts < 0):
            raise ValueError("counts must be nonnegative")

    @classmethod
    def zeros(cls):
        return cls(np.zeros((2, 2, 2, 2), dtype=np.int64))

    @property
    def totals(self) -> np.ndarray:
        return self.counts.sum(axis=(2, 3))

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def __eq__(self, other):
        if not isinstance(other, CoincidenceTable):
            return NotImplemented
        return bool(np.array_equal(self.counts, other.counts))

    def __add__(self, other):
        return CoincidenceTable(self.counts + other.counts)

    def swap_labels(self) -> "CoincidenceTable":
        """Relabel + <-> - on both sides."""
        return CoincidenceTable(self.counts[:, :, ::-1, ::-1])

    def rows(self):
        for a in (0, 1):
            for b in (0, 1):
                for i in (0, 1):
                    for j in (0, 1):
                        yield a, b, DETECTOR_LABELS[i], DETECTOR_LABELS[j], int(self.counts[a, b, i, j])

    def to_csv(self, path, duration: float | None = None):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["alice_setting", "bob_setting", "alice_detector", "bob_detector", "count", "rate_per_s"])
            for a, b, i, j, c in self.rows():
                w.writerow([a, b, i, j, c, "" if not duration else f"{c / duration:.6g}"])

    @classmethod
    def from_csv(cls, path):
        counts = np.zeros((2, 2, 2, 2), dtype=np.int64)
        with open(path, newline="") as fh:
            for row in csv.DictReader(fh):
                i = DETECTOR_LABELS.index(row["alice_detector"])
                j = DETECTOR_LABELS.index(row["bob_detector"])
                counts[int(row["alice_setting"]), int(row["bob_setting"]), i, j] = int(row["count"])
        return cls(counts)


@dataclass
class OffsetEstimate:
    offset: float
    peak_height: float
    background_mean: float
    snr: float
    fwhm: float


class NoPeakError(RuntimeError):
    pass


def _window_pairs(a, b, lo, hi, max_pairs=None):
    """Indices ``(ia, ib)`` of all pairs with ``lo <= b - a <= hi``.

    Two sorted-array binary searches then a repeat; cost is linear in the
    number of pairs produced.
    """
    start = np.searchsorted(b, a + lo, side="left")
    stop = np.searchsorted(b, a + hi, side="right")
    n = stop - start
    total = int(n.sum())
    if max_pairs is not None and total > max_pairs:
        raise MemoryError(total)
    ia = np.repeat(np.arange(a.size), n)
    first = np.repeat(np.cumsum(n) - n, n)
    ib = np.arange(total) - first + np.repeat(start, n)
    return ia, ib


def _chunked_differences(a, b, lo, hi, chunk_pairs=4_000_000):
    """Yield arrays of ``b - a`` differences within ``[lo, hi]`` (ps)."""
    start = np.searchsorted(b, a + lo, side="left")
    stop = np.searchsorted(b, a + hi, side="right")
    n = stop - start
    csum = np.cumsum(n)
    i0 = 0
    while i0 < a.size:
        base = csum[i0 - 1] if i0 else 0
        i1 = int(np.searchsorted(csum, base + chunk_pairs, side="right"))
        i1 = max(i1, i0 + 1)
        ia, ib = _window_pairs(a[i0:i1], b, lo, hi)
        yield b[ib] - a[i0:i1][ia]
        i0 = i1


def offset_histogram(stream_a, stream_b, search_range: float, bin_width: float, center: float = 0.0):
    """Histogram of ``tB - tA`` over ``center +/- search_range`` (seconds).

    Returns ``(bin_centers_seconds, counts)``.
    """
    a = check_stream(stream_a, "stream_a", allow_empty=False).timestamps
    b = check_stream(stream_b, "stream_b", allow_empty=False).timestamps
    check_positive(search_range, "search_range")
    check_positive(bin_width, "bin_width")
    R = seconds_to_ps(search_range)
    bw = bin_width * 1e12
    if abs(bw - round(bw)) < 1e-6:  # keep whole-ps bins exact, e.g. 1e-9 * 1e12 != 1000
        bw = float(round(bw))
    c = seconds_to_ps(center)
    nbins = int(math.ceil(2 * R / bw))
    hist = np.zeros(nbins, dtype=np.int64)
    for d in _chunked_differences(a, b, c - R, c + R):
        idx = np.floor((d - (c - R)) / bw).astype(np.int64)
        np.clip(idx, 0, nbins - 1, out=idx)
        hist += np.bincount(idx, minlength=nbins)
    centers = (c - R + (np.arange(nbins) + 0.5) * bw) * 1e-12
    return centers, hist


def _fwhm(centers, hist, background):
    h = hist.astype(float) - background
    k = int(np.argmax(h))
    half = h[k] / 2.0
    if h[k] <= 0:
        return float("nan")
    left = k
    while left > 0 and h[left - 1] > half:
        left -= 1
    right = k
    while right < h.size - 1 and h[right + 1] > half:
        right += 1
    bw = centers[1] - centers[0] if centers.size > 1 else 0.0

    def cross(i_in, i_out):
        if i_out < 0 or i_out >= h.size:
            return centers[i_in] + (bw / 2 if i_out > i_in else -bw / 2)
        y0, y1 = h[i_in], h[i_out]
        frac = (y0 - half) / (y0 - y1)
        return centers[i_in] + frac * (centers[i_out] - centers[i_in])

    return float(cross(right, right + 1) - cross(left, left - 1))


def recover_offset(stream_a, stream_b, coarse_range: float = 1e-3, coarse_bin: float = 1e-9,
                   refine_bin: float = 75e-12, refine_halfwidth: float = 10e-9, center: float = 0.0,
                   snr_threshold: float = 5.0, min_peak_counts: int = 10,
                   exclude_halfwidth: float = 50e-9):
    """Two-pass clock offset recovery.

    The coarse pass locates the coincidence peak over ``center +/-
    coarse_range``; the fine pass takes the centroid of all differences
    within ``refine_halfwidth`` of it. The offset is defined so that
    ``tB - offset`` is on Alice's time axis.

    Returns ``(OffsetEstimate, diagnostics)``; raises :class:`NoPeakError`
    when the peak is not significant.
    """
    a = check_stream(stream_a, "stream_a", allow_empty=False).timestamps
    b = check_stream(stream_b, "stream_b", allow_empty=False).timestamps
    centers, hist = offset_histogram(stream_a, stream_b, coarse_range, coarse_bin, center)
    k = int(np.argmax(hist))
    peak = float(hist[k])
    excl = int(math.ceil(exclude_halfwidth / coarse_bin))
    mask = np.ones(hist.size, dtype=bool)
    mask[max(0, k - excl):k + excl + 1] = False
    background = float(hist[mask].mean()) if mask.any() else 0.0
    snr = peak / background if background > 0 else math.inf
    if (peak < snr_threshold * background or peak < min_peak_counts
            or peak - background < 5.0 * math.sqrt(max(background, 1.0))):
        raise NoPeakError(f"no coincidence peak: height {peak:g}, background {background:.3g}/bin")

    bw = seconds_to_ps(refine_bin)
    mid = int(round(centers[k] * 1e12 / bw)) * bw
    half = int(math.ceil(refine_halfwidth * 1e12 / bw))
    lo, hi = mid - half * bw, mid + half * bw
    diffs = np.concatenate(list(_chunked_differences(a, b, lo, hi)))
    offset_ps = float(diffs.mean())
    edges_idx = np.rint((diffs - lo) / bw).astype(np.int64)
    fine = np.bincount(edges_idx, minlength=2 * half + 1)[: 2 * half + 1]
    fine_centers = (lo + np.arange(2 * half + 1) * bw) * 1e-12
    fwhm = _fwhm(fine_centers, fine, background * refine_bin / coarse_bin)
    est = OffsetEstimate(offset_ps * 1e-12, peak, background, snr, fwhm)
    diag = {"coarse_centers": centers, "coarse_counts": hist,
            "fine_centers": fine_centers, "fine_counts": fine}
    return est, diag


class ClockOffsetEstimator(BaseEstimator):
    """Estimator wrapper around :func:`recover_offset`.

    ``fit(stream_a, stream_b)`` sets ``offset_`` (seconds), ``estimate_`` and
    the coarse/fine histograms.
    """

    def __init__(self, coarse_range=1e-3, coarse_bin=1e-9, refine_bin=75e-12,
                 refine_halfwidth=10e-9, center=0.0, snr_threshold=5.0, min_peak_counts=10):
        self.coarse_range = coarse_range
        self.coarse_bin = coarse_bin
        self.refine_bin = refine_bin
        self.refine_halfwidth = refine_halfwidth
        self.center = center
        self.snr_threshold = snr_threshold
        self.min_peak_counts = min_peak_counts

    def fit(self, stream_a, stream_b):
        est, diag = recover_offset(stream_a, stream_b, self.coarse_range, self.coarse_bin,
                                   self.refine_bin, self.refine_halfwidth, self.center,
                                   self.snr_threshold, self.min_peak_counts)
        self.estimate_ = est
        self.offset_ = est.offset
        self.histograms_ = diag
        return self


@dataclass
class MatchResult:
    table: CoincidenceTable
    pairs: np.ndarray  # (n, 2) indices into stream_a, stream_b
    delays: np.ndarray  # tB - offset - tA, picoseconds


def _greedy_one_to_one(ia, ib, dt, ta, tb_corr):
    """Accept candidate pairs in order of increasing |dt|; ties go to the
    earlier pair on the common axis. Symmetric under swapping the streams."""
    if ia.size == 0:
        return np.zeros(0, dtype=bool)
    accept = np.zeros(ia.size, dtype=bool)
    na = np.bincount(ia)
    nb = np.bincount(ib)
    lone = (na[ia] == 1) & (nb[ib] == 1)
    accept[lone] = True
    rest = np.flatnonzero(~lone)
    if rest.size:
        early = np.minimum(ta[ia[rest]], tb_corr[ib[rest]])
        late = np.maximum(ta[ia[rest]], tb_corr[ib[rest]])
        order = rest[np.lexsort((late, early, np.abs(dt[rest])))]
        used_a, used_b = set(), set()
        for k in order.tolist():
            x, y = int(ia[k]), int(ib[k])
            if x in used_a or y in used_b:
                continue
            used_a.add(x)
            used_b.add(y)
            accept[k] = True
    return accept


def match_coincidences(stream_a, stream_b, offset: float, window: float = 6e-9,
                       pairing: str = "nearest") -> MatchResult:
    """Count coincidences with ``|tA - (tB - offset)| <= window / 2``.

    ``pairing="nearest"`` makes each tag join at most one coincidence;
    ``"all"`` counts every pair inside the window.
    """
    sa = check_stream(stream_a, "stream_a")
    sb = check_stream(stream_b, "stream_b")
    if window < 0:
        raise ValueError("window must be >= 0")
    if pairing not in ("nearest", "all"):
        raise ValueError("pairing must be 'nearest' or 'all'")
    ta = sa.timestamps
    tb = sb.timestamps - seconds_to_ps(offset)
    half = int(math.floor(window * 1e12 / 2 + 1e-6))
    ia, ib = _window_pairs(ta, tb, -half, half)
    dt = tb[ib] - ta[ia]
    if pairing == "nearest":
        keep = _greedy_one_to_one(ia, ib, dt, ta, tb)
        ia, ib, dt = ia[keep], ib[keep], dt[keep]
        order = np.argsort(ta[ia], kind="stable")
        ia, ib, dt = ia[order], ib[order], dt[order]
    flat = ((sa.settings[ia].astype(np.int64) * 2 + sb.settings[ib]) * 2 + sa.detectors[ia]) * 2 + sb.detectors[ib]
    counts = np.bincount(flat, minlength=16).reshape(2, 2, 2, 2)
    return MatchResult(CoincidenceTable(counts), np.stack([ia, ib], axis=1), dt)


class CoincidenceCounter(BaseEstimator):
    """Learns the clock offset (unless given) and counts coincidences.

    >>> counter = CoincidenceCounter(window=6e-9)            # doctest: +SKIP
    >>> table = counter.fit_transform(stream_a, stream_b)    # doctest: +SKIP
    """

    def __init__(self, window=6e-9, offset=None, pairing="nearest", coarse_range=1e-3,
                 coarse_bin=1e-9, refine_bin=75e-12, center=0.0, snr_threshold=5.0):
        self.window = window
        self.offset = offset
        self.pairing = pairing
        self.coarse_range = coarse_range
        self.coarse_bin = coarse_bin
        self.refine_bin = refine_bin
        self.center = center
        self.snr_threshold = snr_threshold

    def fit(self, stream_a, stream_b):
        if self.offset is None:
            est = ClockOffsetEstimator(coarse_range=self.coarse_range, coarse_bin=self.coarse_bin,
                                       refine_bin=self.refine_bin, center=self.center,
                                       snr_threshold=self.snr_threshold).fit(stream_a, stream_b)
            self.offset_estimator_ = est
            self.offset_ = est.offset_
        else:
            self.offset_estimator_ = None
            self.offset_ = float(self.offset)
        return self

    def transform(self, stream_a, stream_b) -> CoincidenceTable:
        if not hasattr(self, "offset_"):
            raise AttributeError("CoincidenceCounter is not fitted yet; call fit first")
        res = match_coincidences(stream_a, stream_b, self.offset_, self.window, self.pairing)
        self.pairs_ = res.pairs
        self.delays_ = res.delays
        self.table_ = res.table
        return res.table

    def fit_transform(self, stream_a, stream_b) -> CoincidenceTable:
        return self.fit(stream_a, stream_b).transform(stream_a, stream_b)
