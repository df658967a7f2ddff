"""Cross-arm time correlation: delay histogram, peak search, gated pairing.

Delays are always ``dt = t_image - t_fourier`` (stream A minus stream B).
"""

from __future__ import annotations

import io
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy.special import ndtr, pdtrc

from pairtrace import kernels
from pairtrace.errors import ContractError, InvalidArgumentError, NoCorrelationFoundError, ParseError
from pairtrace.events import EventTable

DEFAULT_BIN_WIDTH_NS = 1.0
DEFAULT_MAX_DELAY_NS = 500.0
DEFAULT_SIGNIFICANCE_K = 5.0
DEFAULT_GATE_NS = 20.0
MIN_BINS = 20
PEAK_EXCLUSION_BINS = 3

PAIR_CSV_HEADER = "x1,y1,t1_ns,x2,y2,t2_ns,dt_ns"
HISTOGRAM_CSV_HEADER = "bin_center_ns,count"


@dataclass
class DelayHistogram:
    """Counts of ``dt`` in bins centered on ``k * bin_width_ns``, ``|k| <= kmax``."""

    bin_width_ns: float
    range_ns: tuple[float, float]
    counts: np.ndarray

    def __post_init__(self):
        if not self.bin_width_ns > 0:
            raise InvalidArgumentError("bin width must be positive")
        self.counts = np.asarray(self.counts, dtype=np.int64)
        if len(self.counts) % 2 != 1:
            raise InvalidArgumentError("histogram must have an odd number of bins centered on zero")

    @property
    def kmax(self) -> int:
        return len(self.counts) // 2

    @property
    def centers(self) -> np.ndarray:
        return np.arange(-self.kmax, self.kmax + 1) * self.bin_width_ns

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def write_csv(self, sink) -> None:
        buf = io.StringIO()
        buf.write(HISTOGRAM_CSV_HEADER + "\n")
        for c, n in zip(self.centers.tolist(), self.counts.tolist()):
            buf.write(f"{c!r},{n}\n")
        _write_bytes(sink, buf.getvalue().encode("ascii"))

    @classmethod
    def read_csv(cls, source, max_delay_ns: float | None = None) -> "DelayHistogram":
        data = _read_bytes(source)
        arr = np.loadtxt(io.BytesIO(data), delimiter=",", skiprows=1, ndmin=2)
        centers, counts = arr[:, 0], arr[:, 1].astype(np.int64)
        bw = float(centers[1] - centers[0]) if len(centers) > 1 else 1.0
        half = max_delay_ns if max_delay_ns is not None else float(centers[-1])
        return cls(bw, (-half, half), counts)


@dataclass(frozen=True)
class Peak:
    center_ns: float
    height: int
    background_mean: float
    significance: float
    fwhm_ns: float


@dataclass(frozen=True)
class GateConfig:
    """Full-width coincidence gate around ``peak_center_ns``."""

    gate_ns: float = DEFAULT_GATE_NS
    peak_center_ns: float = 0.0

    def __post_init__(self):
        if not (self.gate_ns > 0 and math.isfinite(self.gate_ns)):
            raise InvalidArgumentError(f"gate must be positive, got {self.gate_ns}")
        if not math.isfinite(self.peak_center_ns):
            raise InvalidArgumentError("peak center must be finite")


@dataclass
class PairTable:
    """Columnar gated pairs; ``index_a``/``index_b`` point into the input streams."""

    x1: np.ndarray
    y1: np.ndarray
    t1_ns: np.ndarray
    x2: np.ndarray
    y2: np.ndarray
    t2_ns: np.ndarray
    dt_ns: np.ndarray
    index_a: np.ndarray | None = None
    index_b: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.dt_ns)

    @classmethod
    def empty(cls) -> "PairTable":
        e = np.empty(0)
        i = np.empty(0, dtype=np.int64)
        return cls(e, e, e, e, e, e, e, i, i)

    @property
    def events_image(self) -> EventTable:
        return EventTable(self.x1, self.y1, self.t1_ns, np.ones(len(self), dtype=np.int64))

    @property
    def events_fourier(self) -> EventTable:
        return EventTable(self.x2, self.y2, self.t2_ns, np.ones(len(self), dtype=np.int64))

    def __getitem__(self, idx) -> "PairTable":
        sel = lambda a: None if a is None else a[idx]  # noqa: E731
        return PairTable(*(sel(getattr(self, k)) for k in _PAIR_FIELDS))

    def write_csv(self, sink) -> None:
        buf = io.StringIO()
        buf.write(PAIR_CSV_HEADER + "\n")
        cols = [getattr(self, k).tolist() for k in _PAIR_FIELDS[:7]]
        for row in zip(*cols):
            buf.write(",".join(repr(v) for v in row) + "\n")
        _write_bytes(sink, buf.getvalue().encode("ascii"))

    @classmethod
    def read_csv(cls, source) -> "PairTable":
        data = _read_bytes(source)
        first = data.split(b"\n", 1)[0].strip(b"\r")
        if first != PAIR_CSV_HEADER.encode():
            raise ParseError(f"expected header {PAIR_CSV_HEADER!r}", 0)
        try:
            arr = np.loadtxt(io.BytesIO(data), delimiter=",", skiprows=1, ndmin=2).reshape(-1, 7)
        except ValueError:
            raise ParseError("malformed pair row", _bad_row_offset(data, 7)) from None
        return cls(*(arr[:, i].copy() for i in range(7)))


_PAIR_FIELDS = ("x1", "y1", "t1_ns", "x2", "y2", "t2_ns", "dt_ns", "index_a", "index_b")


@dataclass(frozen=True)
class PairingResult:
    pairs: PairTable
    unmatched_image: int
    unmatched_fourier: int


@dataclass(frozen=True)
class AccidentalEstimate:
    accidental_rate_hz: float
    true_rate_hz: float
    snr: float


def _bad_row_offset(data: bytes, ncols: int) -> int:
    """Byte offset of the first data row that is not ``ncols`` numbers."""
    offset = data.find(b"\n") + 1
    for line in data[offset:].split(b"\n"):
        row = line.strip(b"\r")
        if row:
            try:
                ok = len([float(v) for v in row.split(b",")]) == ncols
            except ValueError:
                ok = False
            if not ok:
                return offset
        offset += len(line) + 1
    return offset


def _read_bytes(source) -> bytes:
    if isinstance(source, (str, os.PathLike)):
        with open(source, "rb") as fh:
            return fh.read()
    data = source.read()
    return data.encode() if isinstance(data, str) else data


def _write_bytes(sink, payload: bytes) -> None:
    if isinstance(sink, (str, os.PathLike)):
        with open(sink, "wb") as fh:
            fh.write(payload)
    else:
        sink.write(payload)


def _times(stream) -> np.ndarray:
    t = stream.t_ns if isinstance(stream, EventTable) else stream
    return np.ascontiguousarray(t, dtype=np.float64)


def _require_sorted(t: np.ndarray, name: str) -> None:
    if len(t) > 1 and not np.all(t[1:] >= t[:-1]):
        raise ContractError(f"{name} must be sorted by time")


def delay_histogram(
    stream_a,
    stream_b,
    max_delay_ns: float = DEFAULT_MAX_DELAY_NS,
    bin_width_ns: float = DEFAULT_BIN_WIDTH_NS,
    threads: int = 1,
) -> DelayHistogram:
    """Histogram every cross pair with ``|t_a - t_b| <= max_delay_ns`` exactly once.

    Parameters
    ----------
    stream_a, stream_b : EventTable or array of times (ns)
        Time-sorted image-arm and Fourier-arm events.
    threads : int
        Stream A is split into this many chunks; the partial histograms are
        summed, so the result does not depend on the thread count.
    """
    if not bin_width_ns > 0 or not max_delay_ns >= 0:
        raise InvalidArgumentError("bin width must be positive and max delay nonnegative")
    ta, tb = _times(stream_a), _times(stream_b)
    _require_sorted(ta, "stream A")
    _require_sorted(tb, "stream B")
    kmax = int(math.floor(max_delay_ns / bin_width_ns + 0.5))
    n = len(ta)
    parts = max(1, min(int(threads), n))
    bounds = [(n * i) // parts for i in range(parts + 1)]
    spans = list(zip(bounds[:-1], bounds[1:]))
    run = lambda s: kernels.delay_histogram(ta, tb, float(max_delay_ns), float(bin_width_ns), kmax, s[0], s[1])  # noqa: E731
    if parts == 1:
        counts = run(spans[0])
    else:
        with ThreadPoolExecutor(max_workers=parts) as pool:
            counts = np.sum(list(pool.map(run, spans)), axis=0)
    return DelayHistogram(float(bin_width_ns), (-float(max_delay_ns), float(max_delay_ns)), counts)


def _half_max_run(excess: np.ndarray, k0: int, level: float) -> tuple[int, int]:
    lo = k0
    while lo > 0 and excess[lo - 1] >= level:
        lo -= 1
    hi = k0
    while hi < len(excess) - 1 and excess[hi + 1] >= level:
        hi += 1
    return lo, hi


def find_peak(hist: DelayHistogram, significance_k: float = DEFAULT_SIGNIFICANCE_K) -> Peak:
    """Locate the coincidence peak above the accidental floor.

    The background is the median of all bins farther than three bins from
    the tallest bin.  The center is the excess-weighted mean over the
    contiguous run of bins whose excess over background is at least half
    the peak excess.

    Raises
    ------
    NoCorrelationFoundError
        When the tallest bin is not ``significance_k`` sigmas above the
        background, or its Poisson upper tail probability exceeds the
        one-sided Gaussian tail at ``significance_k``.
    """
    counts = hist.counts
    if len(counts) < MIN_BINS:
        raise InvalidArgumentError(f"peak search needs at least {MIN_BINS} bins, got {len(counts)}")
    k0 = int(np.argmax(counts))
    height = int(counts[k0])
    mask = np.ones(len(counts), dtype=bool)
    mask[max(0, k0 - PEAK_EXCLUSION_BINS) : k0 + PEAK_EXCLUSION_BINS + 1] = False
    bg = float(np.median(counts[mask]))
    # the Gaussian rule alone lets single-digit bins through at low counts;
    # also require the exact Poisson tail to be as rare as k Gaussian sigmas
    tail = pdtrc(height - 1, max(bg, float(counts[mask].mean()))) if height > 0 else 1.0
    if height == 0 or height < bg + significance_k * math.sqrt(max(bg, 1.0)) or tail > ndtr(-significance_k):
        raise NoCorrelationFoundError(
            f"no coincidence peak: max bin {height} vs background {bg:.3g} (k={significance_k})", hist
        )
    significance = math.inf if bg == 0 else (height - bg) / math.sqrt(bg)
    excess = counts - bg
    level = 0.5 * (height - bg)
    lo, hi = _half_max_run(excess, k0, level)
    centers = hist.centers
    w = excess[lo : hi + 1]
    center = float(np.sum(w * centers[lo : hi + 1]) / np.sum(w))
    # linear interpolation of the half-level crossings on each side
    left = centers[lo] - hist.bin_width_ns * 0.5 if lo == 0 else np.interp(level, [excess[lo - 1], excess[lo]], [centers[lo - 1], centers[lo]])
    right = centers[hi] + hist.bin_width_ns * 0.5 if hi == len(counts) - 1 else np.interp(level, [excess[hi + 1], excess[hi]], [centers[hi + 1], centers[hi]])
    return Peak(center, height, bg, significance, float(right - left))


def extract_pairs(stream_a: EventTable, stream_b: EventTable, gate: GateConfig) -> PairingResult:
    """Injective greedy pairing inside the gate.

    Candidates are accepted in order of ``|dt - center|`` (ties by stream A
    index, then stream B index) whenever neither event is already used.
    Pairs come out ordered by stream A index.
    """
    ta, tb = _times(stream_a), _times(stream_b)
    _require_sorted(ta, "stream A")
    _require_sorted(tb, "stream B")
    c, half = gate.peak_center_ns, gate.gate_ns / 2.0
    pad = 1e-9 * max(1.0, abs(c) + half)
    ia, ib = kernels.candidate_pairs(ta, tb, c - half - pad, c + half + pad)
    dt = ta[ia] - tb[ib]
    keep = np.abs(dt - c) <= half
    ia, ib, dt = ia[keep], ib[keep], dt[keep]
    order = np.lexsort((ib, ia, np.abs(dt - c)))
    ia, ib, dt = ia[order], ib[order], dt[order]
    accept = kernels.greedy_match(np.ascontiguousarray(ia), np.ascontiguousarray(ib), len(ta), len(tb))
    ia, ib, dt = ia[accept], ib[accept], dt[accept]
    by_a = np.argsort(ia, kind="stable")
    ia, ib, dt = ia[by_a], ib[by_a], dt[by_a]
    a, b = stream_a, stream_b
    pairs = PairTable(a.x[ia], a.y[ia], ta[ia], b.x[ib], b.y[ib], tb[ib], dt, ia, ib)
    return PairingResult(pairs, len(ta) - len(ia), len(tb) - len(ib))


def accidental_estimate(hist: DelayHistogram, peak: Peak, gate: GateConfig, duration_s: float) -> AccidentalEstimate:
    """Accidental coincidence rate inside the gate and the true-pair SNR.

    The true rate is the background-subtracted histogram content of the bins
    whose centers fall inside the gate.
    """
    if not duration_s > 0:
        raise InvalidArgumentError("duration must be positive")
    acc = peak.background_mean * (gate.gate_ns / hist.bin_width_ns) / duration_s
    inside = np.abs(hist.centers - gate.peak_center_ns) <= gate.gate_ns / 2.0
    excess = float(hist.counts[inside].sum()) - peak.background_mean * int(inside.sum())
    true_rate = max(excess, 0.0) / duration_s
    snr = math.inf if acc == 0 else true_rate / acc
    return AccidentalEstimate(acc, true_rate, snr)
