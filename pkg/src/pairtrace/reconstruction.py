"""Pairs -> sample-plane rays -> refocused images, parallax views, focal stacks.

The sample arm camera images the sample plane, so the sample photon's pixel
gives the ray position.  The partner camera, traced back through its own arm
and mirrored at the crystal, gives the ray angle at the sample.  Which
camera region plays which role depends on where the sample sits:

* ``image-plane``: the sample is at a plane conjugate to the crystal; the
  image-arm region supplies ``r`` and the Fourier-arm region supplies ``theta``.
* ``fourier-plane``: the sample is at the crystal's Fourier plane; the roles
  of the two regions are swapped.

Internally every angle-arm pixel is also kept (``angle_px``) because
momentum filters are defined in that arm's pixel coordinates.
"""

from __future__ import annotations

import io
import math
import os
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from pairtrace import kernels
from pairtrace.coincidence import PairTable
from pairtrace.errors import DegenerateImagingPlaneError, InvalidArgumentError
from pairtrace.events import BeamRegion, CameraGeometry, CoordinateMap
from pairtrace.optics import (
    B_MIN,
    MAX_PARAXIAL_ANGLE,
    AbcdMatrix,
    compose,
    free_space,
    klyshko_solve,
    klyshko_unfold,
    thin_lens,
)

MODES = ("image-plane", "fourier-plane")
PGM_MAX = 65535
#: Matrix entries below this are treated as exact zeros (lens-train roundoff).
IMAGING_B_TOL = 1e-9


# ---------------------------------------------------------------------------
# optics layout -> coordinate maps


def four_f(f1: float, f2: float) -> list:
    return [free_space(f1), thin_lens(f1), free_space(f1 + f2), thin_lens(f2), free_space(f2)]


def two_f(f: float) -> list:
    return [free_space(f), thin_lens(f), free_space(f)]


@dataclass(frozen=True)
class OpticsLayout:
    """System matrices of the two-arm setup.

    relay : crystal plane -> sample reference plane (sample arm)
    sample_camera : sample reference plane -> sample-arm camera
    partner_arm : crystal plane -> partner camera
    """

    mode: str
    relay: AbcdMatrix
    sample_camera: AbcdMatrix
    partner_arm: AbcdMatrix

    def __post_init__(self):
        if self.mode not in MODES:
            raise InvalidArgumentError(f"mode must be one of {MODES}, got {self.mode!r}")

    @classmethod
    def default(cls, mode: str = "image-plane") -> "OpticsLayout":
        """Desk-scale layout: 5x sample magnification, demagnified Fourier arm."""
        if mode == "image-plane":
            return cls(mode, compose(four_f(0.1, 0.1)), compose(four_f(0.1, 0.5)), compose(two_f(0.1) + four_f(0.15, 0.09)))
        if mode == "fourier-plane":
            return cls(mode, compose(two_f(0.1)), compose(four_f(0.15, 0.09)), compose(four_f(0.1, 0.5)))
        raise InvalidArgumentError(f"mode must be one of {MODES}, got {mode!r}")

    @property
    def unfolded(self) -> AbcdMatrix:
        """Partner camera -> sample plane in the mirrored-crystal picture."""
        return klyshko_unfold(self.partner_arm, self.relay)

    @property
    def sample_region(self) -> str:
        return "image" if self.mode == "image-plane" else "fourier"

    @property
    def partner_region(self) -> str:
        return "fourier" if self.mode == "image-plane" else "image"

    def reconstruction_config(self, geometry: CameraGeometry, b_min: float = B_MIN) -> "ReconstructionConfig":
        """Coordinate maps implied by the optics.

        Raises
        ------
        InvalidArgumentError
            If the sample camera does not image the sample plane.
        DegenerateImagingPlaneError
            If the partner camera is conjugate to the sample plane.
        """
        cam = self.sample_camera
        if abs(cam.b) > IMAGING_B_TOL:
            raise InvalidArgumentError(f"sample camera does not image the sample plane: {cam}")
        k = self.unfolded
        if not abs(k.b) > b_min:
            raise DegenerateImagingPlaneError(k, b_min)
        pitch = geometry.pixel_pitch
        regions = {"image": geometry.image_region, "fourier": geometry.fourier_region}
        s_sign = 1 if cam.a > 0 else -1
        pos = CoordinateMap(self.sample_region, regions[self.sample_region].center, pitch / abs(cam.a), (s_sign, s_sign))
        # theta = (-r_cam + d r) / b; the map holds the d = 0 part
        a_sign = -1 if k.b > 0 else 1
        ang = CoordinateMap(self.partner_region, regions[self.partner_region].center, pitch / abs(k.b), (a_sign, a_sign))
        maps = {pos.arm: pos, ang.arm: ang}
        return ReconstructionConfig(
            self.mode,
            maps["image"],
            maps["fourier"],
            unfolded=None if abs(k.d) <= IMAGING_B_TOL else k,
            partner_pitch=pitch,
        )


# ---------------------------------------------------------------------------
# configuration and data types


@dataclass(frozen=True)
class ReconstructionConfig:
    """How pair pixels become sample-plane rays.

    When ``unfolded`` (partner camera -> sample plane matrix) is given the
    angle is recovered by the full two-plane solve, which also uses the
    measured sample position; otherwise the angle-arm map alone is used.
    ``base`` maps the sample reference plane to the plane refocusing starts
    from (identity by default).
    """

    mode: str
    image_map: CoordinateMap
    fourier_map: CoordinateMap
    base: AbcdMatrix = AbcdMatrix.identity()
    unfolded: AbcdMatrix | None = None
    partner_pitch: float | None = None
    paraxial_bound: float = MAX_PARAXIAL_ANGLE
    b_min: float = B_MIN

    def __post_init__(self):
        if self.mode not in MODES:
            raise InvalidArgumentError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.image_map.arm != "image" or self.fourier_map.arm != "fourier":
            raise InvalidArgumentError("coordinate maps are attached to the wrong arms")
        if self.unfolded is not None and not (self.partner_pitch and self.partner_pitch > 0):
            raise InvalidArgumentError("the two-plane angle solve needs the partner pixel pitch")

    @property
    def position_map(self) -> CoordinateMap:
        return self.image_map if self.mode == "image-plane" else self.fourier_map

    @property
    def angle_map(self) -> CoordinateMap:
        return self.fourier_map if self.mode == "image-plane" else self.image_map


@dataclass
class SampleRays:
    """Columnar rays at the sample plane; ``r``/``theta``/``angle_px`` are (n, 2)."""

    r: np.ndarray
    theta: np.ndarray
    weight: np.ndarray
    angle_px: np.ndarray

    def __post_init__(self):
        self.r = np.ascontiguousarray(np.reshape(self.r, (-1, 2)), dtype=np.float64)
        self.theta = np.ascontiguousarray(np.reshape(self.theta, (-1, 2)), dtype=np.float64)
        self.weight = np.ascontiguousarray(self.weight, dtype=np.float64)
        self.angle_px = np.ascontiguousarray(np.reshape(self.angle_px, (-1, 2)), dtype=np.float64)
        n = len(self.r)
        if not (len(self.theta) == len(self.weight) == len(self.angle_px) == n):
            raise InvalidArgumentError("ray columns must have equal length")

    @classmethod
    def from_arrays(cls, r, theta, weight=None, angle_px=None) -> "SampleRays":
        r = np.reshape(np.asarray(r, dtype=float), (-1, 2))
        n = len(r)
        return cls(
            r,
            theta,
            np.ones(n) if weight is None else weight,
            np.full((n, 2), np.nan) if angle_px is None else angle_px,
        )

    def __len__(self) -> int:
        return len(self.weight)

    def __getitem__(self, idx) -> "SampleRays":
        return SampleRays(self.r[idx], self.theta[idx], self.weight[idx], self.angle_px[idx])

    def propagated(self, m: AbcdMatrix) -> "SampleRays":
        if m == AbcdMatrix.identity():
            return self
        return SampleRays(m.a * self.r + m.b * self.theta, m.c * self.r + m.d * self.theta, self.weight, self.angle_px)


@dataclass(frozen=True)
class RayReport:
    pairs_in: int
    rays_out: int
    dropped_nonparaxial: int


@dataclass(frozen=True)
class GridSpec:
    """Regular binning grid at the refocus plane; ``x0``/``y0`` are lower bin edges (m)."""

    nx: int
    ny: int
    x0: float
    y0: float
    dx: float
    dy: float

    def __post_init__(self):
        if self.nx < 1 or self.ny < 1:
            raise InvalidArgumentError("grid needs at least one bin per axis")
        if not (self.dx > 0 and self.dy > 0):
            raise InvalidArgumentError("grid extent must be positive")

    @classmethod
    def centered(cls, n: int, bin_size: float, ny: int | None = None) -> "GridSpec":
        """``n`` square bins per axis with the middle bin (odd n) or edge (even n) at 0."""
        ny = n if ny is None else ny
        return cls(n, ny, -0.5 * n * bin_size, -0.5 * ny * bin_size, bin_size, bin_size)

    @classmethod
    def for_aperture(cls, position_map: CoordinateMap, radius_px: float, n: int = 256) -> "GridSpec":
        """``n`` x ``n`` bins covering the position-arm aperture back-projected to the sample."""
        return cls.centered(n, 2.0 * radius_px * position_map.scale / n)

    @property
    def extent(self) -> tuple[float, float, float, float]:
        return (self.x0, self.x0 + self.nx * self.dx, self.y0, self.y0 + self.ny * self.dy)

    def centers(self) -> tuple[np.ndarray, np.ndarray]:
        return self.x0 + (np.arange(self.nx) + 0.5) * self.dx, self.y0 + (np.arange(self.ny) + 0.5) * self.dy


@dataclass
class ImageGrid:
    """Binned ray weights; ``counts[iy, ix]``."""

    spec: GridSpec
    counts: np.ndarray
    z: float = 0.0
    overflow_rays: int = 0
    overflow_weight: float = 0.0

    @property
    def width(self) -> int:
        return self.spec.nx

    @property
    def height(self) -> int:
        return self.spec.ny

    @property
    def total(self) -> float:
        return float(self.counts.sum())


@dataclass(frozen=True)
class MomentumFilter:
    """Disk in angle-arm pixel coordinates (boundary inclusive)."""

    center: tuple[float, float]
    radius: float

    def __post_init__(self):
        if not self.radius > 0:
            raise InvalidArgumentError("filter radius must be positive")

    @property
    def region(self) -> BeamRegion:
        return BeamRegion(self.center, self.radius)


@dataclass(frozen=True)
class ParallaxLayout:
    """3 x 3 sub-apertures, ``pitch_px`` apart, each ``diameter_px`` across."""

    pitch_px: float = 25.0
    diameter_px: float = 20.0

    def __post_init__(self):
        if not (self.pitch_px > 0 and self.diameter_px > 0):
            raise InvalidArgumentError("parallax pitch and diameter must be positive")

    def filters(self, center: tuple[float, float]) -> list[MomentumFilter]:
        """Labels 0..8 row-major: label = 3 * row + col, row along +y, col along +x."""
        cx, cy = center
        return [
            MomentumFilter((cx + (col - 1) * self.pitch_px, cy + (row - 1) * self.pitch_px), self.diameter_px / 2.0)
            for row in range(3)
            for col in range(3)
        ]


@dataclass
class FocalStack:
    spec: GridSpec
    z: np.ndarray
    images: np.ndarray  # (nz, ny, nx)
    overflow_rays: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=np.int64))

    def __len__(self) -> int:
        return len(self.z)

    def __getitem__(self, k: int) -> ImageGrid:
        return ImageGrid(self.spec, self.images[k], float(self.z[k]), int(self.overflow_rays[k]) if len(self.overflow_rays) else 0)

    @property
    def z_step(self) -> float:
        return float(self.z[1] - self.z[0]) if len(self.z) > 1 else 0.0


# ---------------------------------------------------------------------------
# operations


def pairs_to_rays(
    pairs: PairTable, cfg: ReconstructionConfig, dither_px: float = 0.0, seed: int | None = None
) -> tuple[SampleRays, RayReport]:
    """One sample-plane ray per pair, in pair order; non-paraxial rays are dropped and counted.

    ``dither_px > 0`` spreads each pixel coordinate uniformly over a window
    of that width (seeded by ``seed``).  With whole-pixel hits this stands in
    for the unknown position inside the pixel; without it every ray sits on
    a lattice and refocused images alias at depths where the angle step
    maps onto a rational fraction of a bin.
    """
    img = np.column_stack([pairs.x1, pairs.y1])
    four = np.column_stack([pairs.x2, pairs.y2])
    if dither_px > 0:
        rng = np.random.default_rng(seed)
        img = img + rng.uniform(-0.5 * dither_px, 0.5 * dither_px, img.shape)
        four = four + rng.uniform(-0.5 * dither_px, 0.5 * dither_px, four.shape)
    pos_px, ang_px = (img, four) if cfg.mode == "image-plane" else (four, img)
    r = cfg.position_map.to_coordinate(pos_px)
    if cfg.unfolded is None:
        theta = cfg.angle_map.to_coordinate(ang_px)
    else:
        r_cam = (ang_px - np.asarray(cfg.angle_map.center)) * cfg.partner_pitch
        _, theta = klyshko_solve(cfg.unfolded, r_cam, r, b_min=cfg.b_min)
    ok = np.hypot(theta[:, 0], theta[:, 1]) <= cfg.paraxial_bound
    rays = SampleRays(r[ok], theta[ok], np.ones(int(ok.sum())), ang_px[ok])
    return rays, RayReport(len(pairs), len(rays), int((~ok).sum()))


def _bilinear(r: np.ndarray, w: np.ndarray, spec: GridSpec):
    fx = (r[:, 0] - spec.x0) / spec.dx - 0.5
    fy = (r[:, 1] - spec.y0) / spec.dy - 0.5
    ix = np.floor(fx).astype(np.int64)
    iy = np.floor(fy).astype(np.int64)
    ux, uy = fx - ix, fy - iy
    counts = np.zeros(spec.nx * spec.ny)
    landed = np.zeros(len(w))
    for ox, oy, ww in ((0, 0, (1 - ux) * (1 - uy)), (1, 0, ux * (1 - uy)), (0, 1, (1 - ux) * uy), (1, 1, ux * uy)):
        jx, jy = ix + ox, iy + oy
        ok = (jx >= 0) & (jx < spec.nx) & (jy >= 0) & (jy < spec.ny)
        counts += np.bincount(jy[ok] * spec.nx + jx[ok], weights=(w * ww)[ok], minlength=spec.nx * spec.ny)
        landed += np.where(ok, ww, 0.0)
    outside = landed < 1.0
    return counts.reshape(spec.ny, spec.nx), int(outside.sum()), float(np.sum(w * (1.0 - landed)))


def form_image(
    rays: SampleRays,
    spec: GridSpec,
    z: float = 0.0,
    base: AbcdMatrix = AbcdMatrix.identity(),
    bilinear: bool = False,
    threads: int = 1,
) -> ImageGrid:
    """Bin every ray at ``r + z * theta`` after the ``base`` system.

    Nearest-bin binning conserves weight exactly: in-grid total plus
    ``overflow_weight`` equals the summed ray weight.  ``bilinear`` splats
    each ray over its four nearest bin centers instead.
    """
    rays = rays.propagated(base)
    if bilinear:
        counts, n_over, w_over = _bilinear(rays.r + z * rays.theta, rays.weight, spec)
        return ImageGrid(spec, counts, float(z), n_over, w_over)

    def run(sl):
        return kernels.bin_rays(
            np.ascontiguousarray(rays.r[sl, 0]),
            np.ascontiguousarray(rays.r[sl, 1]),
            np.ascontiguousarray(rays.theta[sl, 0]),
            np.ascontiguousarray(rays.theta[sl, 1]),
            rays.weight[sl],
            float(z),
            spec.x0,
            spec.y0,
            spec.dx,
            spec.dy,
            spec.nx,
            spec.ny,
        )

    n = len(rays)
    parts = max(1, min(int(threads), n))
    if parts == 1:
        counts, n_over, w_over = run(slice(0, n))
    else:
        bounds = [(n * i) // parts for i in range(parts + 1)]
        with ThreadPoolExecutor(max_workers=parts) as pool:
            results = list(pool.map(run, [slice(s, e) for s, e in zip(bounds[:-1], bounds[1:])]))
        counts = np.sum([c for c, _, _ in results], axis=0)
        n_over = sum(o for _, o, _ in results)
        w_over = float(sum(w for _, _, w in results))
    return ImageGrid(spec, counts, float(z), n_over, w_over)


def momentum_filter(rays: SampleRays, filt: MomentumFilter) -> SampleRays:
    """Rays whose angle-arm pixel lies inside the filter disk."""
    keep = filt.region.contains(rays.angle_px[:, 0], rays.angle_px[:, 1])
    return rays[keep]


def parallax_grid(
    rays: SampleRays,
    layout: ParallaxLayout,
    center: tuple[float, float],
    spec: GridSpec,
    aperture_radius_px: float | None = None,
    z: float = 0.0,
) -> list[ImageGrid]:
    """Nine momentum-filtered views labeled 0..8 row-major (label 4 is on axis)."""
    filters = layout.filters(center)
    if aperture_radius_px is not None:
        reach = math.hypot(layout.pitch_px, layout.pitch_px) + layout.diameter_px / 2.0
        if reach > aperture_radius_px:
            raise InvalidArgumentError(
                f"parallax sub-regions reach {reach:g} px, beyond the {aperture_radius_px:g} px aperture"
            )
    return [form_image(momentum_filter(rays, f), spec, z) for f in filters]


def stack_depths(z_min: float, z_max: float, z_step: float) -> np.ndarray:
    if not z_step > 0:
        raise InvalidArgumentError("z_step must be positive")
    if z_min > z_max:
        raise InvalidArgumentError("z_min must not exceed z_max")
    n = int(math.floor((z_max - z_min) / z_step + 1e-9)) + 1
    return z_min + np.arange(n) * z_step


def focal_stack(
    rays: SampleRays,
    spec: GridSpec,
    z_min: float,
    z_max: float,
    z_step: float,
    base: AbcdMatrix = AbcdMatrix.identity(),
    threads: int = 1,
) -> FocalStack:
    """Slices at ``z_min + k * z_step`` for ``k = 0 .. floor((z_max - z_min) / z_step)``."""
    zs = stack_depths(z_min, z_max, z_step)
    images = np.empty((len(zs), spec.ny, spec.nx))
    over = np.empty(len(zs), dtype=np.int64)
    for k, z in enumerate(zs):
        g = form_image(rays, spec, float(z), base, threads=threads)
        images[k] = g.counts
        over[k] = g.overflow_rays
    return FocalStack(spec, zs, images, over)


# ---------------------------------------------------------------------------
# writers


def _sink_write(sink, payload: bytes) -> None:
    if isinstance(sink, (str, os.PathLike)):
        with open(sink, "wb") as fh:
            fh.write(payload)
    else:
        sink.write(payload)


def pgm_bytes(values: np.ndarray) -> bytes:
    """16-bit binary PGM (P5, maxval 65535, big-endian); values are rounded and clipped."""
    v = np.rint(np.asarray(values, dtype=float))
    if np.any(v > PGM_MAX):
        warnings.warn(f"{int(np.sum(v > PGM_MAX))} bins saturate at {PGM_MAX} in PGM output", RuntimeWarning, stacklevel=3)
    v = np.clip(v, 0, PGM_MAX).astype(">u2")
    h, w = v.shape
    return f"P5\n{w} {h}\n{PGM_MAX}\n".encode("ascii") + v.tobytes()


def write_pgm(values, sink) -> None:
    if isinstance(values, ImageGrid):
        values = values.counts
    _sink_write(sink, pgm_bytes(values))


def read_pgm(source) -> np.ndarray:
    if isinstance(source, (str, os.PathLike)):
        with open(source, "rb") as fh:
            data = fh.read()
    else:
        data = source.read()
    magic, w, h, maxval, rest = data.split(maxsplit=4)
    if magic != b"P5" or int(maxval) != PGM_MAX:
        raise InvalidArgumentError("not a 16-bit P5 PGM")
    return np.frombuffer(rest[: int(w) * int(h) * 2], dtype=">u2").reshape(int(h), int(w)).astype(np.int64)


def matrix_csv_bytes(values: np.ndarray) -> bytes:
    buf = io.StringIO()
    np.savetxt(buf, np.asarray(values, dtype=float), fmt="%.10g", delimiter=",")
    return buf.getvalue().encode("ascii")


def write_csv_matrix(values, sink) -> None:
    if isinstance(values, ImageGrid):
        values = values.counts
    _sink_write(sink, matrix_csv_bytes(values))


def write_stack(stack: FocalStack, directory, prefix: str = "slice") -> list[str]:
    """One PGM per slice plus ``index.csv`` (``slice,z_mm,filename``)."""
    os.makedirs(directory, exist_ok=True)
    names = []
    lines = ["slice,z_mm,filename"]
    for k, z in enumerate(stack.z):
        name = f"{prefix}_{k:03d}.pgm"
        write_pgm(stack.images[k], os.path.join(directory, name))
        names.append(name)
        lines.append(f"{k},{z * 1e3:.6g},{name}")
    _sink_write(os.path.join(directory, "index.csv"), ("\n".join(lines) + "\n").encode("ascii"))
    return names
