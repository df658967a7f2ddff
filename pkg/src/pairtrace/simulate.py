"""Correlated photon-pair simulator with an occluding scene and a camera model.

Each pair is born at the crystal with a shared position ``r`` and angle
``theta``.  The sample-arm photon A leaves with ``(r + drA, -theta + dthA)``
and the partner photon B with ``(r + drB, theta + dthB)``.  Photon A is
relayed to the sample plane, may be absorbed by the scene, and is imaged
onto its camera region; photon B propagates through the partner arm.  Both
cameras are the same sensor, so the two arms are two regions of one
pixel array.

Randomness: the run is split into fixed time chunks; chunk ``i`` draws from
``SeedSequence(seed).spawn(n_chunks)[i]`` in this order: pair count,
emission times, r, theta, drA, dthA, drB, dthB, QE draws A then B, timing
jitter A then B, cluster expansion A then B, then dark counts for the image
region and the Fourier region.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from pairtrace.errors import InvalidArgumentError
from pairtrace.events import CameraGeometry, HitTable
from pairtrace.optics import AbcdMatrix
from pairtrace.reconstruction import OpticsLayout

FATES = ("detected", "absorbed", "lost_qe", "lost_sensor")
DETECTED, ABSORBED, LOST_QE, LOST_SENSOR = range(4)
TRUTH_CSV_HEADER = "pair_id,r_x,r_y,theta_x,theta_y,t_ns,fate_image,fate_fourier"

#: Intensifier dark-count density used to size the default dark rate (Hz per cm^2).
DARK_DENSITY_HZ_PER_CM2 = 1e5
#: Fixed camera latency added to every detection so jittered times stay >= 0.
DEFAULT_LATENCY_NS = 1000.0
#: FWHM -> sigma for a Gaussian.
FWHM_PER_SIGMA = 2.0 * math.sqrt(2.0 * math.log(2.0))


# ---------------------------------------------------------------------------
# specs


@dataclass(frozen=True)
class SourceSpec:
    pair_rate: float = 1e5
    beam_waist_sigma: float = 0.6e-3
    theta_sigma: float = 0.03
    position_blur_sigma: float = 5e-6
    theta_blur_sigma: float = 5e-4

    def __post_init__(self):
        if not self.pair_rate > 0:
            raise InvalidArgumentError("pair rate must be positive")
        for k in ("beam_waist_sigma", "theta_sigma", "position_blur_sigma", "theta_blur_sigma"):
            if not getattr(self, k) >= 0:
                raise InvalidArgumentError(f"{k} must be nonnegative")


def dark_rate_for_region(radius_px: float, pixel_pitch: float, density_hz_per_cm2: float = DARK_DENSITY_HZ_PER_CM2) -> float:
    """Dark counts per second inside a circular region of the given pixel radius."""
    area_cm2 = math.pi * (radius_px * pixel_pitch * 100.0) ** 2
    return density_hz_per_cm2 * area_cm2


@dataclass(frozen=True)
class DetectorSpec:
    """Camera + intensifier model.

    ``mean_cluster_hits = 0`` selects single-pixel mode: one hit per photon
    at the rounded true pixel.  Otherwise each photon lights
    ``Poisson(mean_cluster_hits) + 1`` Gaussian-scattered pixels whose ToT
    follows the flash profile times lognormal noise; repeats of a pixel
    within one flash merge by summing ToT.
    """

    quantum_efficiency: float = 0.2
    dark_rate_hz: float = dark_rate_for_region(65.0, 55e-6)
    jitter_sigma_ns: float = 6.0 / FWHM_PER_SIGMA
    cluster_sigma_px: float = 7.0 / 4.0
    mean_cluster_hits: float = 24.0
    tot_gain: float = 200.0
    tot_noise_sigma: float = 0.3
    tick_ps: float = 0.0
    latency_ns: float = DEFAULT_LATENCY_NS

    def __post_init__(self):
        if not 0.0 <= self.quantum_efficiency <= 1.0:
            raise InvalidArgumentError("quantum efficiency must lie in [0, 1]")
        for k in ("dark_rate_hz", "jitter_sigma_ns", "cluster_sigma_px", "mean_cluster_hits", "tot_noise_sigma", "latency_ns"):
            if not getattr(self, k) >= 0:
                raise InvalidArgumentError(f"{k} must be nonnegative")
        if not self.tot_gain >= 1:
            raise InvalidArgumentError("tot_gain must be at least 1")
        if not self.tick_ps >= 0:
            raise InvalidArgumentError("tick_ps must be nonnegative")

    @property
    def single_pixel(self) -> bool:
        return self.mean_cluster_hits == 0


# -- scene primitives (all opaque inside; coordinates in meters at the plane)


@dataclass(frozen=True)
class Bars:
    """Group of ``n_bars`` opaque bars of width half a period."""

    line_pairs_per_mm: float
    n_bars: int = 3
    length: float = 0.5e-3
    center: tuple[float, float] = (0.0, 0.0)
    orientation: str = "vertical"

    def __post_init__(self):
        if not (self.line_pairs_per_mm > 0 and self.n_bars > 0 and self.length > 0):
            raise InvalidArgumentError("bar dimensions must be positive")
        if self.orientation not in ("vertical", "horizontal"):
            raise InvalidArgumentError("orientation must be vertical or horizontal")

    @property
    def period(self) -> float:
        return 1e-3 / self.line_pairs_per_mm

    def bar_centers(self) -> np.ndarray:
        k = np.arange(self.n_bars) - (self.n_bars - 1) / 2.0
        return k * self.period

    def opaque(self, x, y):
        u, v = (x - self.center[0], y - self.center[1])
        if self.orientation == "horizontal":
            u, v = v, u
        out = np.zeros(np.shape(u), dtype=bool)
        for c in self.bar_centers():
            out |= np.abs(u - c) <= self.period / 4.0
        return out & (np.abs(v) <= self.length / 2.0)


@dataclass(frozen=True)
class Wire:
    """Infinite straight rod of the given width through ``offset`` along the normal."""

    width: float
    offset: float = 0.0
    orientation: str = "vertical"

    def __post_init__(self):
        if not self.width > 0:
            raise InvalidArgumentError("wire width must be positive")
        if self.orientation not in ("vertical", "horizontal"):
            raise InvalidArgumentError("orientation must be vertical or horizontal")

    def opaque(self, x, y):
        u = x if self.orientation == "vertical" else y
        return np.abs(u - self.offset) <= self.width / 2.0


@dataclass(frozen=True)
class Disk:
    center: tuple[float, float]
    radius: float

    def __post_init__(self):
        if not self.radius > 0:
            raise InvalidArgumentError("disk radius must be positive")

    def opaque(self, x, y):
        return (x - self.center[0]) ** 2 + (y - self.center[1]) ** 2 <= self.radius**2


@dataclass(frozen=True)
class HalfPlane:
    """Opaque where ``x >= x0`` (or ``y >= x0`` for axis 'y')."""

    x0: float = 0.0
    axis: str = "x"

    def opaque(self, x, y):
        return (x if self.axis == "x" else y) >= self.x0


@dataclass(frozen=True)
class Needle:
    """Vertical rod tapering linearly from ``base_width`` at ``y_base`` to a point at ``y_tip``."""

    x: float
    base_width: float
    y_base: float
    y_tip: float

    def __post_init__(self):
        if not (self.base_width > 0 and self.y_base != self.y_tip):
            raise InvalidArgumentError("needle dimensions must be positive")

    def opaque(self, x, y):
        frac = (y - self.y_tip) / (self.y_base - self.y_tip)
        half = 0.5 * self.base_width * frac
        return (frac >= 0) & (frac <= 1) & (np.abs(x - self.x) <= half)


@dataclass(frozen=True)
class RasterMask:
    """Boolean raster (True = opaque) over ``extent = (x0, x1, y0, y1)``; transparent outside."""

    opaque_pixels: np.ndarray
    extent: tuple[float, float, float, float]

    def opaque(self, x, y):
        m = np.asarray(self.opaque_pixels, dtype=bool)
        ny, nx = m.shape
        x0, x1, y0, y1 = self.extent
        ix = np.floor((x - x0) / (x1 - x0) * nx).astype(np.int64)
        iy = np.floor((y - y0) / (y1 - y0) * ny).astype(np.int64)
        inside = (ix >= 0) & (ix < nx) & (iy >= 0) & (iy < ny)
        out = np.zeros(np.shape(x), dtype=bool)
        out[inside] = m[iy[inside], ix[inside]]
        return out


@dataclass(frozen=True)
class OccluderPlane:
    z: float
    shapes: tuple

    def opaque(self, x, y):
        out = np.zeros(np.shape(x), dtype=bool)
        for s in self.shapes:
            out |= s.opaque(x, y)
        return out


@dataclass(frozen=True)
class SceneSpec:
    planes: tuple = ()

    def __post_init__(self):
        zs = [p.z for p in self.planes]
        if zs != sorted(zs):
            raise InvalidArgumentError("occluder planes must be sorted by z")

    def absorbed(self, r: np.ndarray, theta: np.ndarray) -> np.ndarray:
        """Whether each ray hits an opaque point on any plane (checked in z order)."""
        hit = np.zeros(len(r), dtype=bool)
        for p in self.planes:
            live = ~hit
            x = r[live, 0] + p.z * theta[live, 0]
            y = r[live, 1] + p.z * theta[live, 1]
            hit[np.flatnonzero(live)[p.opaque(x, y)]] = True
        return hit


def make_scene(kind: str, **params) -> SceneSpec:
    """Analytic test scenes.

    usaf-bars : ``line_pairs_per_mm`` (5), ``z_mm`` (4), ``n_bars`` (3),
        ``length_mm`` (0.5), ``orientation`` ('vertical'), ``center_mm``.
    wires : ``depths_mm`` (-9, -5, 3.5, 6), ``offsets_mm``, ``width_mm`` (0.15),
        ``orientations``; one plane per wire.
    needles : ``z_mm`` (100): two tapered rods at -z and +z, ``base_width_mm``
        (0.5), ``length_mm`` (2), ``separation_mm`` (1).
    parallax : vertical wire at x = -0.25 mm, ``vertical_z_mm`` (6); horizontal
        wire at y = +0.25 mm, ``horizontal_z_mm`` (-5); disk of radius 0.1 mm at
        (0.2, -0.2) mm, ``disk_z_mm`` (0); wires are ``width_mm`` (0.15) wide.
    none : empty scene.
    """
    def positive(*names):
        for n in names:
            v = params.get(n)
            if v is not None and not np.all(np.asarray(v, dtype=float) > 0):
                raise InvalidArgumentError(f"{n} must be positive")

    if kind == "usaf-bars":
        positive("line_pairs_per_mm", "n_bars", "length_mm")
        bars = Bars(
            float(params.get("line_pairs_per_mm", 5.0)),
            int(params.get("n_bars", 3)),
            float(params.get("length_mm", 0.5)) * 1e-3,
            tuple(float(c) * 1e-3 for c in params.get("center_mm", (0.0, 0.0))),
            params.get("orientation", "vertical"),
        )
        return SceneSpec((OccluderPlane(float(params.get("z_mm", 4.0)) * 1e-3, (bars,)),))
    if kind == "wires":
        depths = [float(d) for d in params.get("depths_mm", (-9.0, -5.0, 3.5, 6.0))]
        if not depths:
            return SceneSpec(())
        width = float(params.get("width_mm", 0.15))
        positive("width_mm")
        n = len(depths)
        default_offsets = ((np.arange(n) - (n - 1) / 2.0) * 0.24).tolist()
        offsets = [float(o) for o in params.get("offsets_mm", default_offsets)]
        orients = list(params.get("orientations", ["vertical"] * n))
        if not (len(offsets) == len(orients) == n):
            raise InvalidArgumentError("wires need one offset and orientation per depth")
        planes = [
            OccluderPlane(d * 1e-3, (Wire(width * 1e-3, o * 1e-3, ori),)) for d, o, ori in zip(depths, offsets, orients)
        ]
        return SceneSpec(tuple(sorted(planes, key=lambda p: p.z)))
    if kind == "needles":
        positive("z_mm", "base_width_mm", "length_mm", "separation_mm")
        z = float(params.get("z_mm", 100.0)) * 1e-3
        w = float(params.get("base_width_mm", 0.5)) * 1e-3
        length = float(params.get("length_mm", 2.0)) * 1e-3
        sep = float(params.get("separation_mm", 1.0)) * 1e-3
        return SceneSpec(
            (
                OccluderPlane(-z, (Needle(-sep / 2, w, length / 2, -length / 2),)),
                OccluderPlane(z, (Needle(sep / 2, w, -length / 2, length / 2),)),
            )
        )
    if kind == "parallax":
        positive("width_mm")
        w = float(params.get("width_mm", 0.15)) * 1e-3
        planes = [
            OccluderPlane(float(params.get("vertical_z_mm", 6.0)) * 1e-3, (Wire(w, -0.25e-3, "vertical"),)),
            OccluderPlane(float(params.get("horizontal_z_mm", -5.0)) * 1e-3, (Wire(w, 0.25e-3, "horizontal"),)),
            OccluderPlane(float(params.get("disk_z_mm", 0.0)) * 1e-3, (Disk((0.2e-3, -0.2e-3), 0.1e-3),)),
        ]
        return SceneSpec(tuple(sorted(planes, key=lambda p: p.z)))
    if kind == "none":
        return SceneSpec(())
    raise InvalidArgumentError(f"unknown scene kind {kind!r}")


# ---------------------------------------------------------------------------
# truth


@dataclass
class TruthRecords:
    """Per-pair ground truth; ``r``/``theta`` are the sample photon's ray at the sample plane."""

    pair_id: np.ndarray
    r: np.ndarray
    theta: np.ndarray
    t_ns: np.ndarray
    fate_image: np.ndarray
    fate_fourier: np.ndarray

    def __len__(self) -> int:
        return len(self.pair_id)

    @classmethod
    def concatenate(cls, parts) -> "TruthRecords":
        parts = list(parts)
        return cls(*(np.concatenate([getattr(p, k) for p in parts]) for k in ("pair_id", "r", "theta", "t_ns", "fate_image", "fate_fourier")))

    def fate_counts(self, arm: str) -> dict:
        f = self.fate_image if arm == "image" else self.fate_fourier
        c = np.bincount(f, minlength=len(FATES))
        return {name: int(c[i]) for i, name in enumerate(FATES)}

    def write_csv(self, sink, chunk: int = 200_000) -> None:
        names = np.array(FATES)
        own = isinstance(sink, (str, os.PathLike))
        fh = open(sink, "wb") if own else sink
        try:
            fh.write((TRUTH_CSV_HEADER + "\n").encode("ascii"))
            row = "%d,%.9g,%.9g,%.9g,%.9g,%.3f,%s,%s\n"
            for s in range(0, len(self), chunk):
                e = min(s + chunk, len(self))
                cols = zip(
                    self.pair_id[s:e].tolist(),
                    self.r[s:e, 0].tolist(),
                    self.r[s:e, 1].tolist(),
                    self.theta[s:e, 0].tolist(),
                    self.theta[s:e, 1].tolist(),
                    self.t_ns[s:e].tolist(),
                    names[self.fate_image[s:e]].tolist(),
                    names[self.fate_fourier[s:e]].tolist(),
                )
                fh.write("".join([row % c for c in cols]).encode("ascii"))
        finally:
            if own:
                fh.close()


# ---------------------------------------------------------------------------
# stages


@dataclass
class PairBatch:
    """Ideal photons at the crystal plus emission times (seconds)."""

    pair_id: np.ndarray
    t_s: np.ndarray
    r: np.ndarray
    theta: np.ndarray
    a_r: np.ndarray
    a_theta: np.ndarray
    b_r: np.ndarray
    b_theta: np.ndarray

    def __len__(self) -> int:
        return len(self.pair_id)


def generate_pairs(source: SourceSpec, duration_s: float, rng, t0_s: float = 0.0, first_id: int = 0) -> PairBatch:
    """Poisson number of pairs with uniform emission times on ``[t0, t0 + duration)``."""
    if not duration_s > 0:
        raise InvalidArgumentError("duration must be positive")
    rng = np.random.default_rng(rng)
    n = int(rng.poisson(source.pair_rate * duration_s))
    t = t0_s + np.sort(rng.uniform(0.0, duration_s, n))
    r = rng.normal(0.0, source.beam_waist_sigma, (n, 2))
    th = rng.normal(0.0, source.theta_sigma, (n, 2))
    dra = rng.normal(0.0, source.position_blur_sigma, (n, 2))
    dta = rng.normal(0.0, source.theta_blur_sigma, (n, 2))
    drb = rng.normal(0.0, source.position_blur_sigma, (n, 2))
    dtb = rng.normal(0.0, source.theta_blur_sigma, (n, 2))
    ids = first_id + np.arange(n, dtype=np.int64)
    return PairBatch(ids, t, r, th, r + dra, -th + dta, r + drb, th + dtb)


def _propagate(m: AbcdMatrix, r: np.ndarray, theta: np.ndarray):
    return m.a * r + m.b * theta, m.c * r + m.d * theta


def sample_plane_rays(batch: PairBatch, layout: OpticsLayout):
    """Sample photon ray at the sample reference plane."""
    return _propagate(layout.relay, batch.a_r, batch.a_theta)


def apply_scene(r_sample: np.ndarray, theta_sample: np.ndarray, scene: SceneSpec) -> np.ndarray:
    """Boolean survival of sample-arm photons; partner photons are never blocked."""
    return ~scene.absorbed(r_sample, theta_sample)


@dataclass
class _ArmHits:
    x: np.ndarray
    y: np.ndarray
    toa_ps: np.ndarray
    tot: np.ndarray
    source: np.ndarray

    @classmethod
    def empty(cls):
        e = np.empty(0, dtype=np.int64)
        return cls(e, e, e, e, e)

    @classmethod
    def concatenate(cls, parts):
        parts = list(parts)
        if not parts:
            return cls.empty()
        return cls(*(np.concatenate([getattr(p, k) for p in parts]) for k in ("x", "y", "toa_ps", "tot", "source")))


def _quantize_ps(t_ns: np.ndarray, tick_ps: float) -> np.ndarray:
    t_ps = t_ns * 1000.0
    if tick_ps > 0:
        t_ps = np.floor(t_ps / tick_ps) * tick_ps
    return np.maximum(np.rint(t_ps), 0).astype(np.int64)


def expand_flashes(px, py, toa_ps, source, det: DetectorSpec, geometry: CameraGeometry, rng) -> _ArmHits:
    """Turn photon positions (fractional pixels) into pixel hits."""
    n = len(px)
    if n == 0:
        return _ArmHits.empty()
    if det.single_pixel:
        ix = np.floor(px + 0.5).astype(np.int64)
        iy = np.floor(py + 0.5).astype(np.int64)
        tot = np.full(n, min(int(round(det.tot_gain)), 65535), dtype=np.int64)
        return _ArmHits(ix, iy, toa_ps, tot, source)
    k = rng.poisson(det.mean_cluster_hits, n) + 1
    owner = np.repeat(np.arange(n), k)
    off = rng.normal(0.0, det.cluster_sigma_px, (len(owner), 2))
    noise = rng.lognormal(0.0, det.tot_noise_sigma, len(owner)) if det.tot_noise_sigma > 0 else np.ones(len(owner))
    fx = px[owner] + off[:, 0]
    fy = py[owner] + off[:, 1]
    ix = np.floor(fx + 0.5).astype(np.int64)
    iy = np.floor(fy + 0.5).astype(np.int64)
    d2 = (ix - px[owner]) ** 2 + (iy - py[owner]) ** 2
    tot = det.tot_gain * np.exp(-d2 / (2.0 * det.cluster_sigma_px**2)) * noise
    on = geometry.on_sensor(ix, iy)
    owner, ix, iy, tot = owner[on], ix[on], iy[on], tot[on]
    # merge repeated pixels within one flash
    key = (owner * geometry.height + iy) * geometry.width + ix
    uniq, inv = np.unique(key, return_inverse=True)
    tot_sum = np.bincount(inv, weights=tot)
    u_owner = uniq // (geometry.width * geometry.height)
    rem = uniq % (geometry.width * geometry.height)
    tot_i = np.clip(np.rint(tot_sum), 1, 65535).astype(np.int64)
    return _ArmHits(rem % geometry.width, rem // geometry.width, toa_ps[u_owner], tot_i, source[u_owner])


def _region_pixels(r_cam: np.ndarray, pitch: float, center) -> tuple[np.ndarray, np.ndarray]:
    return center[0] + r_cam[:, 0] / pitch, center[1] + r_cam[:, 1] / pitch


def detect(
    batch: PairBatch,
    survives: np.ndarray,
    r_sample: np.ndarray,
    theta_sample: np.ndarray,
    detector: DetectorSpec,
    geometry: CameraGeometry,
    layout: OpticsLayout,
    rng,
    t0_s: float,
    duration_s: float,
):
    """Camera response for one time chunk.

    Returns ``(hits_by_region, fate_sample, fate_partner)`` where
    ``hits_by_region`` maps 'image'/'fourier' to that region's hits
    (including dark counts, source id -1).
    """
    n = len(batch)
    regions = {"image": geometry.image_region, "fourier": geometry.fourier_region}
    pitch = geometry.pixel_pitch
    qa = rng.uniform(size=n) < detector.quantum_efficiency
    qb = rng.uniform(size=n) < detector.quantum_efficiency
    ja = rng.normal(0.0, detector.jitter_sigma_ns, n) if detector.jitter_sigma_ns > 0 else np.zeros(n)
    jb = rng.normal(0.0, detector.jitter_sigma_ns, n) if detector.jitter_sigma_ns > 0 else np.zeros(n)
    t_ns = batch.t_s * 1e9 + detector.latency_ns

    cam_a, _ = _propagate(layout.sample_camera, r_sample, theta_sample)
    ax, ay = _region_pixels(cam_a, pitch, regions[layout.sample_region].center)
    cam_b, _ = _propagate(layout.partner_arm, batch.b_r, batch.b_theta)
    bx, by = _region_pixels(cam_b, pitch, regions[layout.partner_region].center)

    def fates(alive, q, fx, fy):
        f = np.full(n, DETECTED, dtype=np.uint8)
        f[~alive] = ABSORBED
        f[alive & ~q] = LOST_QE
        on = geometry.on_sensor(np.floor(fx + 0.5), np.floor(fy + 0.5))
        f[alive & q & ~on] = LOST_SENSOR
        return f

    fa = fates(survives, qa, ax, ay)
    fb = fates(np.ones(n, dtype=bool), qb, bx, by)
    out = {}
    sa, sb = fa == DETECTED, fb == DETECTED
    hits_a = expand_flashes(ax[sa], ay[sa], _quantize_ps(t_ns[sa] + ja[sa], detector.tick_ps), batch.pair_id[sa], detector, geometry, rng)
    hits_b = expand_flashes(bx[sb], by[sb], _quantize_ps(t_ns[sb] + jb[sb], detector.tick_ps), batch.pair_id[sb], detector, geometry, rng)
    out[layout.sample_region] = [hits_a]
    out[layout.partner_region] = [hits_b]
    for name in ("image", "fourier"):
        reg = regions[name]
        m = int(rng.poisson(detector.dark_rate_hz * duration_s)) if detector.dark_rate_hz > 0 else 0
        rad = reg.radius * np.sqrt(rng.uniform(size=m))
        phi = rng.uniform(0.0, 2.0 * np.pi, m)
        tt = (t0_s + rng.uniform(0.0, duration_s, m)) * 1e9
        dx = reg.center[0] + rad * np.cos(phi)
        dy = reg.center[1] + rad * np.sin(phi)
        out[name].append(expand_flashes(dx, dy, _quantize_ps(tt, detector.tick_ps), np.full(m, -1, dtype=np.int64), detector, geometry, rng))
    return {k: _ArmHits.concatenate(v) for k, v in out.items()}, fa, fb


# ---------------------------------------------------------------------------
# driver


@dataclass(frozen=True)
class SimSpec:
    source: SourceSpec = SourceSpec()
    detector: DetectorSpec = DetectorSpec()
    scene: SceneSpec = SceneSpec()
    geometry: CameraGeometry = CameraGeometry(512, 256)
    layout: OpticsLayout = field(default_factory=OpticsLayout.default)
    duration_s: float = 60.0
    chunk_s: float = 1.0

    def __post_init__(self):
        if not (self.duration_s > 0 and self.chunk_s > 0):
            raise InvalidArgumentError("duration and chunk length must be positive")


@dataclass
class SimResult:
    hits_image: HitTable
    hits_fourier: HitTable
    source_image: np.ndarray
    source_fourier: np.ndarray
    truth: TruthRecords
    spec: SimSpec

    @property
    def n_pairs(self) -> int:
        return len(self.truth)

    def counters(self) -> dict:
        return {
            "pairs_generated": self.n_pairs,
            "hits_image": len(self.hits_image),
            "hits_fourier": len(self.hits_fourier),
            "dark_hits_image": int(np.sum(self.source_image < 0)),
            "dark_hits_fourier": int(np.sum(self.source_fourier < 0)),
            "fates_image": self.truth.fate_counts("image"),
            "fates_fourier": self.truth.fate_counts("fourier"),
        }


def _chunk(spec: SimSpec, seed_seq, t0: float, dur: float, first_id: int):
    rng = np.random.default_rng(seed_seq)
    batch = generate_pairs(spec.source, dur, rng, t0, first_id)
    r_s, th_s = sample_plane_rays(batch, spec.layout)
    alive = apply_scene(r_s, th_s, spec.scene)
    hits, fa, fb = detect(batch, alive, r_s, th_s, spec.detector, spec.geometry, spec.layout, rng, t0, dur)
    sample_is_image = spec.layout.sample_region == "image"
    truth = TruthRecords(
        batch.pair_id,
        r_s,
        th_s,
        batch.t_s * 1e9,
        fa if sample_is_image else fb,
        fb if sample_is_image else fa,
    )
    return hits, truth


def _to_table(h: _ArmHits, geometry: CameraGeometry):
    order = np.lexsort((h.x, h.y, h.toa_ps))
    table = HitTable(h.x[order], h.y[order], h.toa_ps[order], h.tot[order], (geometry.width, geometry.height))
    return table, h.source[order]


def simulate(spec: SimSpec, seed: int, threads: int = 1) -> SimResult:
    """Run the full source -> scene -> camera model.

    Chunks are independent given their spawned seeds, so the result is the
    same for any ``threads``.  Pair ids are consecutive across chunks
    because each chunk's pair count is drawn first from its own stream.
    """
    n_chunks = max(1, int(math.ceil(spec.duration_s / spec.chunk_s - 1e-9)))
    seqs = np.random.SeedSequence(seed).spawn(n_chunks)
    bounds = [min(i * spec.chunk_s, spec.duration_s) for i in range(n_chunks)] + [spec.duration_s]

    # pair counts are the first draw of each chunk; peek them to assign ids
    counts = [int(np.random.default_rng(s).poisson(spec.source.pair_rate * (bounds[i + 1] - bounds[i]))) for i, s in enumerate(seqs)]
    first = np.concatenate([[0], np.cumsum(counts)]).astype(np.int64)

    def run(i):
        return _chunk(spec, seqs[i], bounds[i], bounds[i + 1] - bounds[i], int(first[i]))

    if threads > 1 and n_chunks > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(run, range(n_chunks)))
    else:
        results = [run(i) for i in range(n_chunks)]
    truth = TruthRecords.concatenate(r for _, r in results)
    img, src_i = _to_table(_ArmHits.concatenate(h["image"] for h, _ in results), spec.geometry)
    fou, src_f = _to_table(_ArmHits.concatenate(h["fourier"] for h, _ in results), spec.geometry)
    return SimResult(img, fou, src_i, src_f, truth, spec)
