"""Group intensifier flashes into single photon events.

Hits are linked when they lie within a Chebyshev pixel radius and a time
window of each other; clusters are the connected components of that
relation.  Each cluster collapses to a ToT-weighted centroid whose time is
the earliest ToT-corrected member time.
"""

from __future__ import annotations

import io
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from pairtrace import kernels
from pairtrace.errors import ContractError, InvalidArgumentError, ParseError
from pairtrace.events import EventTable, HitTable, PhotonEvent

DEFAULT_SPATIAL_RADIUS_PX = 2.0
DEFAULT_TEMPORAL_WINDOW_NS = 100.0


@dataclass(frozen=True)
class TimingCalibration:
    """Piecewise-linear ToT -> time-walk correction (ns), clamped at the end knots.

    An empty table is the identity (zero correction).
    """

    tot: tuple = ()
    correction_ns: tuple = ()

    def __post_init__(self):
        tot = np.asarray(self.tot, dtype=float)
        corr = np.asarray(self.correction_ns, dtype=float)
        if tot.shape != corr.shape or tot.ndim != 1:
            raise InvalidArgumentError("calibration columns must be 1-D and equally long")
        if tot.size > 1 and not np.all(np.diff(tot) > 0):
            raise InvalidArgumentError("calibration knots must be strictly increasing in tot")
        if not np.all(np.isfinite(corr)) or not np.all(np.isfinite(tot)):
            raise InvalidArgumentError("calibration values must be finite")
        object.__setattr__(self, "tot", tuple(tot.tolist()))
        object.__setattr__(self, "correction_ns", tuple(corr.tolist()))

    @property
    def is_identity(self) -> bool:
        return len(self.tot) == 0

    def correction(self, tot) -> np.ndarray:
        tot = np.asarray(tot, dtype=float)
        if self.is_identity:
            return np.zeros_like(tot)
        return np.interp(tot, self.tot, self.correction_ns)

    @classmethod
    def read_csv(cls, source) -> "TimingCalibration":
        if isinstance(source, (str, os.PathLike)):
            with open(source, "rb") as fh:
                data = fh.read()
        else:
            data = source.read()
            data = data.encode() if isinstance(data, str) else data
        lines = data.split(b"\n")
        if lines[0].strip(b"\r") != b"tot,correction_ns":
            raise ParseError("expected header 'tot,correction_ns'", 0)
        tot, corr = [], []
        offset = len(lines[0]) + 1
        for line in lines[1:]:
            stripped = line.strip(b"\r")
            if stripped:
                try:
                    a, b = stripped.split(b",")
                    tot.append(float(a))
                    corr.append(float(b))
                except ValueError:
                    raise ParseError("malformed calibration record", offset) from None
            offset += len(line) + 1
        return cls(tuple(tot), tuple(corr))

    def write_csv(self, sink) -> None:
        buf = io.StringIO()
        buf.write("tot,correction_ns\n")
        for t, c in zip(self.tot, self.correction_ns):
            buf.write(f"{t!r},{c!r}\n")
        payload = buf.getvalue().encode("ascii")
        if isinstance(sink, (str, os.PathLike)):
            with open(sink, "wb") as fh:
                fh.write(payload)
        else:
            sink.write(payload)


@dataclass(frozen=True)
class Cluster:
    hits: HitTable

    def __post_init__(self):
        if len(self.hits) == 0:
            raise InvalidArgumentError("a cluster needs at least one hit")

    def __len__(self) -> int:
        return len(self.hits)

    @property
    def t_raw(self) -> int:
        return int(self.hits.toa_ps.min())

    @property
    def bbox(self) -> tuple[int, int, int, int]:
        """(x_min, y_min, x_max, y_max) in pixels, inclusive."""
        h = self.hits
        return int(h.x.min()), int(h.y.min()), int(h.x.max()), int(h.y.max())

    @property
    def extent(self) -> int:
        x0, y0, x1, y1 = self.bbox
        return max(x1 - x0, y1 - y0) + 1


@dataclass
class Clustering:
    """Result of :func:`cluster_hits`: a lazily materialized sequence of clusters.

    ``labels[i]`` is the cluster index of ``hits[i]``; clusters are numbered
    in order of their earliest hit.
    """

    hits: HitTable
    labels: np.ndarray
    n_clusters: int
    _order: np.ndarray | None = field(default=None, repr=False)
    _starts: np.ndarray | None = field(default=None, repr=False)

    def __len__(self) -> int:
        return self.n_clusters

    def sizes(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.n_clusters)

    def _index(self):
        if self._order is None:
            self._order = np.argsort(self.labels, kind="stable")
            self._starts = np.concatenate([[0], np.cumsum(self.sizes())])
        return self._order, self._starts

    def __getitem__(self, k: int) -> Cluster:
        if not -self.n_clusters <= k < self.n_clusters:
            raise IndexError(k)
        k %= self.n_clusters
        order, starts = self._index()
        return Cluster(self.hits[order[starts[k] : starts[k + 1]]])

    def __iter__(self):
        for k in range(self.n_clusters):
            yield self[k]


def _split_points(toa_ps: np.ndarray, window_ps: int, parts: int) -> list[int]:
    """Chunk boundaries at time gaps wider than the window, roughly equal sizes."""
    n = len(toa_ps)
    gaps = np.flatnonzero(np.diff(toa_ps) > window_ps) + 1
    if parts <= 1 or gaps.size == 0:
        return [0, n]
    targets = (np.arange(1, parts) * n) // parts
    cuts = np.unique(gaps[np.minimum(np.searchsorted(gaps, targets), gaps.size - 1)])
    return [0, *cuts.tolist(), n]


def cluster_hits(
    hits: HitTable,
    spatial_radius_px: float = DEFAULT_SPATIAL_RADIUS_PX,
    temporal_window_ns: float = DEFAULT_TEMPORAL_WINDOW_NS,
    threads: int = 1,
) -> Clustering:
    """Partition time-sorted hits into clusters.

    Two hits share a cluster iff a chain of hits links them with every step
    within ``spatial_radius_px`` (Chebyshev) and ``temporal_window_ns``.

    Raises
    ------
    ContractError
        If ``hits`` is not sorted by ``toa_ps``.
    """
    if spatial_radius_px < 0 or temporal_window_ns < 0:
        raise InvalidArgumentError("radius and window must be nonnegative")
    if not hits.is_time_sorted:
        raise ContractError("hits must be sorted by toa_ps before clustering")
    window_ps = int(np.floor(temporal_window_ns * 1000.0))
    bounds = _split_points(hits.toa_ps, window_ps, threads)
    if len(bounds) == 2:
        labels, n = kernels.cluster_labels(hits.x, hits.y, hits.toa_ps, float(spatial_radius_px), window_ps)
        return Clustering(hits, labels, n)

    def run(span):
        s, e = span
        return kernels.cluster_labels(hits.x[s:e], hits.y[s:e], hits.toa_ps[s:e], float(spatial_radius_px), window_ps)

    spans = list(zip(bounds[:-1], bounds[1:]))
    with ThreadPoolExecutor(max_workers=threads) as pool:
        parts = list(pool.map(run, spans))
    labels = np.empty(len(hits), dtype=np.int64)
    offset = 0
    for (s, e), (lab, n) in zip(spans, parts):
        labels[s:e] = lab + offset
        offset += n
    return Clustering(hits, labels, offset)


def centroid(cluster: Cluster, cal: TimingCalibration = TimingCalibration()) -> PhotonEvent:
    """ToT-weighted centroid of one cluster."""
    h = cluster.hits
    w = h.tot.astype(float)
    t = h.toa_ps / 1000.0 - cal.correction(h.tot)
    return PhotonEvent(
        float(np.sum(w * h.x) / w.sum()),
        float(np.sum(w * h.y) / w.sum()),
        float(t.min()),
        int(h.tot.astype(np.int64).sum()),
    )


def centroid_all(clustering: Clustering, cal: TimingCalibration = TimingCalibration()) -> EventTable:
    """Vectorized :func:`centroid` over every cluster, in cluster order.

    Events come out sorted by corrected time only when the calibration is
    the identity; use :func:`events_time_sorted` before correlation.
    """
    h = clustering.hits
    corr = np.ascontiguousarray(cal.correction(h.tot), dtype=np.float64)
    cx, cy, t, amp, _, _ = kernels.centroid_reduce(
        clustering.labels, clustering.n_clusters, h.x, h.y, h.toa_ps, h.tot, corr
    )
    return EventTable(cx, cy, t, amp)


def events_time_sorted(events: EventTable) -> EventTable:
    if events.is_time_sorted:
        return events
    return events[np.argsort(events.t_ns, kind="stable")]


def hits_to_events(
    hits: HitTable,
    spatial_radius_px: float = DEFAULT_SPATIAL_RADIUS_PX,
    temporal_window_ns: float = DEFAULT_TEMPORAL_WINDOW_NS,
    cal: TimingCalibration = TimingCalibration(),
    threads: int = 1,
) -> tuple[EventTable, Clustering]:
    """Cluster and centroid; returns time-sorted events and the clustering."""
    clustering = cluster_hits(hits, spatial_radius_px, temporal_window_ns, threads)
    return events_time_sorted(centroid_all(clustering, cal)), clustering
