"""Shape from focus over a focal stack.

Sharpness is the modified Laplacian ``(d2I/dx2)^2 + (d2I/dy2)^2`` with unit
pixel steps and replicated borders, optionally summed over a square window.
Each pixel's depth is the slice of maximum sharpness, refined by fitting a
parabola to ``ln ML`` (the closed-form Gaussian fit).
"""

from __future__ import annotations

import io
import os
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import uniform_filter

from pairtrace.errors import InvalidArgumentError
from pairtrace.reconstruction import FocalStack, GridSpec, ImageGrid, SampleRays, form_image, pgm_bytes

DEFAULT_THRESHOLD_WINDOW = 31
DEFAULT_OFFSET_STD = 0.5


def _values(image) -> np.ndarray:
    return np.asarray(image.counts if isinstance(image, ImageGrid) else image, dtype=np.float64)


def modified_laplacian(image, sum_window: int = 1, poisson_debias: bool = False) -> np.ndarray:
    """Per-pixel ``Dxx^2 + Dyy^2``; ``sum_window > 1`` sums it over a square window.

    For Poisson counts ``E[Dxx^2] = Dxx_true^2 + (l[x-1] + 4 l[x] + l[x+1])``.
    ``poisson_debias`` subtracts the observed-count estimate of that shot-noise
    term (per axis) before the window sum and clips the result at zero, so
    brighter slices no longer look sharper just for having more counts.

    Raises
    ------
    InvalidArgumentError
        For images smaller than 3 x 3 or an even window.
    """
    img = _values(image)
    if img.ndim != 2 or img.shape[0] < 3 or img.shape[1] < 3:
        raise InvalidArgumentError(f"modified Laplacian needs at least a 3x3 image, got {img.shape}")
    if sum_window < 1 or sum_window % 2 == 0:
        raise InvalidArgumentError("sum window must be a positive odd integer")
    p = np.pad(img, 1, mode="edge")
    dxx = p[1:-1, 2:] - 2.0 * p[1:-1, 1:-1] + p[1:-1, :-2]
    dyy = p[2:, 1:-1] - 2.0 * p[1:-1, 1:-1] + p[:-2, 1:-1]
    ml = dxx * dxx + dyy * dyy
    if poisson_debias:
        c = p[1:-1, 1:-1]
        ml = ml - (p[1:-1, 2:] + p[1:-1, :-2] + p[2:, 1:-1] + p[:-2, 1:-1] + 8.0 * c)
    if sum_window > 1:
        ml = uniform_filter(ml, size=sum_window, mode="nearest") * (sum_window * sum_window)
    return np.maximum(ml, 0.0)


def sharpness_volume(stack, sum_window: int = 1, poisson_debias: bool = False) -> np.ndarray:
    """``(nz, ny, nx)`` modified-Laplacian volume of a stack (or array of slices)."""
    images = stack.images if isinstance(stack, FocalStack) else np.asarray(stack, dtype=np.float64)
    return np.stack([modified_laplacian(s, sum_window, poisson_debias) for s in images])


@dataclass
class DepthMap:
    """Per-pixel depth (mm), peak sharpness and foreground mask.

    ``depth_mm`` is the raw estimate; :attr:`depth` applies the background
    convention ``D = 0`` outside the mask.
    """

    depth_mm: np.ndarray
    confidence: np.ndarray
    defined: np.ndarray
    z_mm: np.ndarray
    mask: np.ndarray | None = None

    @property
    def depth(self) -> np.ndarray:
        d = np.where(self.defined, self.depth_mm, 0.0)
        if self.mask is not None:
            d = np.where(self.mask, d, 0.0)
        return d

    @property
    def z_step_mm(self) -> float:
        return float(self.z_mm[1] - self.z_mm[0]) if len(self.z_mm) > 1 else 1.0

    def with_mask(self, mask: np.ndarray) -> "DepthMap":
        return DepthMap(self.depth_mm, self.confidence, self.defined, self.z_mm, np.asarray(mask, dtype=bool))


def _uniform_step(z: np.ndarray) -> float:
    steps = np.diff(z)
    if len(steps) == 0 or not np.all(steps > 0):
        raise InvalidArgumentError("slice depths must be strictly increasing")
    if not np.allclose(steps, steps[0], rtol=1e-9, atol=0):
        raise InvalidArgumentError("slice depths must be evenly spaced")
    return float(steps[0])


def depth_from_focus(volume: np.ndarray, z_mm, stencil: int = 3) -> DepthMap:
    """Per-pixel depth of maximum sharpness with log-parabola refinement.

    Parameters
    ----------
    volume : (nz, ny, nx) array
        Nonnegative sharpness values.
    z_mm : (nz,) array
        Evenly spaced, increasing slice depths.
    stencil : {3, 5}
        Points used for the parabola fit around the argmax.  The 5-point
        fit falls back to 3 points where it does not fit in the stack or
        meets a non-positive value.

    Notes
    -----
    Ties go to the smallest z.  Refinement is skipped (depth = slice depth)
    at the stack ends and wherever a needed neighbor is not positive.
    All-zero columns get ``defined = False``, confidence 0 and depth 0.
    """
    vol = np.asarray(volume, dtype=np.float64)
    z = np.asarray(z_mm, dtype=np.float64)
    if vol.ndim != 3 or vol.shape[0] != len(z):
        raise InvalidArgumentError("volume must be (nz, ny, nx) with one z per slice")
    if len(z) < 3:
        raise InvalidArgumentError("depth from focus needs at least 3 slices")
    if stencil not in (3, 5):
        raise InvalidArgumentError("stencil must be 3 or 5")
    step = _uniform_step(z)
    nz = len(z)
    k = np.argmax(vol, axis=0)
    conf = np.take_along_axis(vol, k[None], axis=0)[0]
    defined = conf > 0
    with np.errstate(divide="ignore", invalid="ignore"):
        logv = np.log(vol)

    def at(offset):
        idx = np.clip(k + offset, 0, nz - 1)
        return np.take_along_axis(logv, idx[None], axis=0)[0]

    delta = np.zeros(k.shape)
    interior = defined & (k >= 1) & (k <= nz - 2)
    ym, y0, yp = at(-1), at(0), at(1)
    ok3 = interior & np.isfinite(ym) & np.isfinite(yp)
    with np.errstate(divide="ignore", invalid="ignore"):
        den = ym - 2.0 * y0 + yp
        d3 = 0.5 * (ym - yp) / den
    ok3 &= den < 0
    delta = np.where(ok3, d3, delta)
    if stencil == 5:
        ymm, ypp = at(-2), at(2)
        ok5 = ok3 & (k >= 2) & (k <= nz - 3) & np.isfinite(ymm) & np.isfinite(ypp)
        # least-squares parabola on offsets -2..2: vertex = -b1 / (2 b2)
        with np.errstate(divide="ignore", invalid="ignore"):
            b1 = (-2.0 * ymm - ym + yp + 2.0 * ypp) / 10.0
            b2 = (2.0 * ymm - ym - 2.0 * y0 - yp + 2.0 * ypp) / 14.0
            d5 = -b1 / (2.0 * b2)
        ok5 &= (b2 < 0) & (np.abs(d5) <= 1.0)
        delta = np.where(ok5, d5, delta)
    depth = np.where(defined, z[k] + delta * step, 0.0)
    return DepthMap(depth, np.where(defined, conf, 0.0), defined, z)


def adaptive_threshold(image, window_px: int = DEFAULT_THRESHOLD_WINDOW, offset: float | None = None) -> np.ndarray:
    """Foreground iff value > local window mean + offset (replicated border).

    ``offset`` defaults to half the global standard deviation.
    """
    if window_px < 3 or window_px % 2 == 0:
        raise InvalidArgumentError(f"threshold window must be an odd integer >= 3, got {window_px}")
    img = _values(image)
    if offset is None:
        offset = DEFAULT_OFFSET_STD * float(img.std())
    local = uniform_filter(img, size=window_px, mode="nearest")
    return img > local + offset


def all_in_focus(source, depthmap: DepthMap, spec: GridSpec | None = None) -> ImageGrid:
    """Composite where each pixel is taken from the refocus at its own depth.

    ``source`` is either a :class:`FocalStack` (each pixel picks the slice
    nearest its depth) or :class:`SampleRays` (rays are re-binned once per
    distinct depth value).  Undefined pixels use the smallest stack depth.
    """
    d = np.where(depthmap.defined, depthmap.depth_mm, depthmap.z_mm[0])
    if isinstance(source, FocalStack):
        zs = source.z * 1e3
        idx = np.clip(np.rint((d - zs[0]) / depthmap.z_step_mm).astype(np.int64), 0, len(zs) - 1)
        counts = np.take_along_axis(source.images, idx[None], axis=0)[0]
        return ImageGrid(source.spec, counts, float("nan"))
    if not isinstance(source, SampleRays) or spec is None:
        raise InvalidArgumentError("all_in_focus needs a FocalStack, or SampleRays with a grid spec")
    counts = np.zeros((spec.ny, spec.nx))
    for zv in np.unique(d):
        sel = d == zv
        counts[sel] = form_image(source, spec, float(zv) * 1e-3).counts[sel]
    return ImageGrid(spec, counts, float("nan"))


def segment(aif: ImageGrid, window_px: int = DEFAULT_THRESHOLD_WINDOW, offset_std: float = DEFAULT_OFFSET_STD, dark_objects: bool = True) -> np.ndarray:
    """Foreground mask of the all-in-focus image.

    Occluders block photons, so objects are darker than the lit background;
    with ``dark_objects`` the threshold runs on the negated image.
    """
    img = _values(aif)
    img = -img if dark_objects else img
    return adaptive_threshold(img, window_px, offset_std * float(img.std()))


@dataclass
class DepthHistogram:
    z_mm: np.ndarray
    counts: np.ndarray

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def write_csv(self, sink) -> None:
        lines = ["z_mm,count"] + [f"{z:.6g},{c}" for z, c in zip(self.z_mm.tolist(), self.counts.tolist())]
        _write(sink, ("\n".join(lines) + "\n").encode("ascii"))


def depth_histogram(depthmap: DepthMap, bin_width_mm: float | None = None) -> DepthHistogram:
    """Histogram of foreground depths; bins are centered on the stack depths by default."""
    bw = depthmap.z_step_mm if bin_width_mm is None else float(bin_width_mm)
    if not bw > 0:
        raise InvalidArgumentError("bin width must be positive")
    z0 = float(depthmap.z_mm[0])
    nb = int(np.floor((float(depthmap.z_mm[-1]) - z0) / bw + 0.5)) + 1
    centers = z0 + np.arange(nb) * bw
    sel = depthmap.defined if depthmap.mask is None else depthmap.defined & depthmap.mask
    vals = depthmap.depth_mm[sel]
    idx = np.clip(np.floor((vals - z0) / bw + 0.5).astype(np.int64), 0, nb - 1)
    return DepthHistogram(centers, np.bincount(idx, minlength=nb).astype(np.int64))


def histogram_modes(hist: DepthHistogram, n: int, min_separation_bins: int = 2) -> np.ndarray:
    """Depths of the ``n`` tallest local maxima at least ``min_separation_bins`` apart."""
    counts = hist.counts.astype(float)
    order = np.argsort(-counts, kind="stable")
    picked: list[int] = []
    for i in order:
        if counts[i] <= 0 or len(picked) == n:
            break
        if all(abs(int(i) - j) > min_separation_bins for j in picked):
            picked.append(int(i))
    return np.sort(hist.z_mm[picked])


def _write(sink, payload: bytes) -> None:
    if isinstance(sink, (str, os.PathLike)):
        with open(sink, "wb") as fh:
            fh.write(payload)
    else:
        sink.write(payload)


def write_depthmap(depthmap: DepthMap, directory, prefix: str = "depth") -> dict:
    """Depth (mm) and confidence CSV matrices plus the mask as a PGM."""
    os.makedirs(directory, exist_ok=True)
    names = {
        "depth": f"{prefix}_mm.csv",
        "confidence": f"{prefix}_confidence.csv",
        "mask": f"{prefix}_mask.pgm",
    }
    for key, arr in (("depth", depthmap.depth), ("confidence", depthmap.confidence)):
        buf = io.StringIO()
        np.savetxt(buf, arr, fmt="%.10g", delimiter=",")
        _write(os.path.join(directory, names[key]), buf.getvalue().encode("ascii"))
    mask = depthmap.mask if depthmap.mask is not None else depthmap.defined
    _write(os.path.join(directory, names["mask"]), pgm_bytes(mask.astype(np.float64) * 65535))
    return names
