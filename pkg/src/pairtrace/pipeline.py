"""Stage wiring shared by the CLI and the end-to-end tests.

Hits of each camera region -> clusters -> region-filtered, time-sorted
events -> delay histogram -> peak -> gated pairs.  Optional per-hit source
labels (simulator truth) are carried through to events and pairs.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from pairtrace.centroid import TimingCalibration, centroid_all, cluster_hits
from pairtrace.coincidence import (
    AccidentalEstimate,
    DelayHistogram,
    GateConfig,
    PairingResult,
    Peak,
    accidental_estimate,
    delay_histogram,
    extract_pairs,
    find_peak,
)
from pairtrace.errors import NoCorrelationFoundError
from pairtrace.events import BeamRegion, EventTable, HitTable, in_region


@dataclass(frozen=True)
class CorrelationParams:
    spatial_radius_px: float = 2.0
    temporal_window_ns: float = 100.0
    bin_width_ns: float = 1.0
    max_delay_ns: float = 500.0
    significance_k: float = 5.0
    gate_ns: float = 20.0
    peak_center_ns: float | None = None  # None: use the detected peak
    calibration: TimingCalibration = TimingCalibration()


@dataclass
class RegionEvents:
    events: EventTable
    source: np.ndarray | None
    hits: int
    clusters: int
    outside_region: int


def region_events(
    hits: HitTable,
    region: BeamRegion,
    params: CorrelationParams = CorrelationParams(),
    source: np.ndarray | None = None,
    threads: int = 1,
) -> RegionEvents:
    """Cluster, centroid and keep events inside ``region``, sorted by time.

    ``source`` (one label per hit, in ``hits`` order) is mapped to events
    through each cluster's earliest hit.
    """
    if source is not None and len(source) != len(hits):
        raise ValueError("source labels must match the hits")
    order = None
    if not hits.is_time_sorted:
        order = np.lexsort((hits.x, hits.y, hits.toa_ps))
        hits = hits[order]
    clustering = cluster_hits(hits, params.spatial_radius_px, params.temporal_window_ns, threads)
    events = centroid_all(clustering, params.calibration)
    ev_source = None
    if source is not None:
        src = source if order is None else source[order]
        _, first = np.unique(clustering.labels, return_index=True)
        ev_source = src[first]
    keep = in_region(events, region)
    events = events[keep]
    if ev_source is not None:
        ev_source = ev_source[keep]
    t_order = np.argsort(events.t_ns, kind="stable")
    if not np.array_equal(t_order, np.arange(len(t_order))):
        events = events[t_order]
        if ev_source is not None:
            ev_source = ev_source[t_order]
    return RegionEvents(events, ev_source, len(hits), clustering.n_clusters, int((~keep).sum()))


@dataclass
class CorrelationResult:
    image: RegionEvents
    fourier: RegionEvents
    histogram: DelayHistogram
    peak: Peak | None
    gate: GateConfig | None
    pairing: PairingResult | None
    accidentals: AccidentalEstimate | None
    duration_s: float
    counters: dict = field(default_factory=dict)


def correlate(
    hits_image: HitTable,
    hits_fourier: HitTable,
    image_region: BeamRegion,
    fourier_region: BeamRegion,
    params: CorrelationParams = CorrelationParams(),
    source_image=None,
    source_fourier=None,
    threads: int = 1,
) -> CorrelationResult:
    """Full correlation stage.

    Raises
    ------
    NoCorrelationFoundError
        From :func:`find_peak` when no fixed peak center is configured and
        the histogram shows no significant peak.  The histogram travels on
        the exception.
    """
    a = region_events(hits_image, image_region, params, source_image, threads)
    b = region_events(hits_fourier, fourier_region, params, source_fourier, threads)
    hist = delay_histogram(a.events, b.events, params.max_delay_ns, params.bin_width_ns, threads)
    t_all = [e.events.t_ns for e in (a, b) if len(e.events)]
    duration_s = float((max(t.max() for t in t_all) - min(t.min() for t in t_all)) * 1e-9) if t_all else 0.0
    if params.peak_center_ns is None:
        peak = find_peak(hist, params.significance_k)
        center = peak.center_ns
    else:
        try:
            peak = find_peak(hist, params.significance_k)
        except NoCorrelationFoundError:
            peak = None
        center = params.peak_center_ns
    gate = GateConfig(params.gate_ns, center)
    pairing = extract_pairs(a.events, b.events, gate)
    acc = accidental_estimate(hist, peak, gate, duration_s) if duration_s > 0 and peak is not None else None
    counters = {
        "hits_image": a.hits,
        "hits_fourier": b.hits,
        "clusters_image": a.clusters,
        "clusters_fourier": b.clusters,
        "events_image": len(a.events),
        "events_fourier": len(b.events),
        "events_outside_region_image": a.outside_region,
        "events_outside_region_fourier": b.outside_region,
        "histogram_total": hist.total,
        "pairs": len(pairing.pairs),
        "unmatched_image": pairing.unmatched_image,
        "unmatched_fourier": pairing.unmatched_fourier,
    }
    return CorrelationResult(a, b, hist, peak, gate, pairing, acc, duration_s, counters)


@dataclass(frozen=True)
class PairingScore:
    true_pairs: int
    extracted: int
    correct: int

    @property
    def recall(self) -> float:
        return self.correct / self.true_pairs if self.true_pairs else 1.0

    @property
    def precision(self) -> float:
        return self.correct / self.extracted if self.extracted else 1.0


def score_pairs(result: CorrelationResult) -> PairingScore:
    """Compare gated pairs against source labels carried on the events.

    A true pair is a source id present among both arms' in-region events.
    """
    sa, sb = result.image.source, result.fourier.source
    if sa is None or sb is None:
        raise ValueError("scoring needs source labels")
    true_ids = np.intersect1d(sa[sa >= 0], sb[sb >= 0])
    p = result.pairing.pairs
    ia, ib = p.index_a, p.index_b
    correct = int(np.sum((sa[ia] >= 0) & (sa[ia] == sb[ib])))
    return PairingScore(len(true_ids), len(p), correct)
