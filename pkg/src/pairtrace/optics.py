"""Paraxial ray-transfer (ABCD) optics.

Sign convention: positive z points away from the source, a ray is
``(r, theta)`` with ``r`` in meters and ``theta`` in radians, and a thin
lens of focal length ``f`` has ``c = -1/f``.  One 2x2 matrix acts on each
transverse axis independently; both axes share it unless a
``(matrix_x, matrix_y)`` pair is passed where a matrix is expected.

In the two-arm geometry a photon detected by the *partner* camera can be
traced back through its own arm, reflected at the crystal with its angle
flipped (momentum anti-correlation) and forward through the sample arm.
:func:`klyshko_unfold` builds that single equivalent system, and
:func:`klyshko_solve` recovers both ray angles from the two measured
positions.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence, Union

import numpy as np

from pairtrace.errors import DegenerateImagingPlaneError, InvalidArgumentError

#: Rays with ``|theta|`` above this are outside the paraxial model.
MAX_PARAXIAL_ANGLE = 0.1
#: Default conjugate-plane threshold on ``|b|`` for angle recovery.
B_MIN = 1e-6


@dataclass(frozen=True)
class AbcdMatrix:
    a: float
    b: float
    c: float
    d: float

    @classmethod
    def identity(cls) -> "AbcdMatrix":
        return cls(1.0, 0.0, 0.0, 1.0)

    @classmethod
    def from_array(cls, m) -> "AbcdMatrix":
        m = np.asarray(m, dtype=float)
        if m.shape != (2, 2):
            raise InvalidArgumentError(f"expected a 2x2 matrix, got shape {m.shape}")
        return cls(float(m[0, 0]), float(m[0, 1]), float(m[1, 0]), float(m[1, 1]))

    def as_array(self) -> np.ndarray:
        return np.array([[self.a, self.b], [self.c, self.d]])

    @property
    def det(self) -> float:
        return self.a * self.d - self.b * self.c

    def __matmul__(self, other: "AbcdMatrix") -> "AbcdMatrix":
        # self @ other == "apply other, then self"
        return AbcdMatrix(
            self.a * other.a + self.b * other.c,
            self.a * other.b + self.b * other.d,
            self.c * other.a + self.d * other.c,
            self.c * other.b + self.d * other.d,
        )

    def inverse(self) -> "AbcdMatrix":
        det = self.det
        if det == 0:
            raise InvalidArgumentError("singular ray-transfer matrix")
        return AbcdMatrix(self.d / det, -self.b / det, -self.c / det, self.a / det)

    def __str__(self) -> str:
        return f"[[{self.a:.6g}, {self.b:.6g}], [{self.c:.6g}, {self.d:.6g}]]"


MatrixLike = Union[AbcdMatrix, Sequence[AbcdMatrix]]


@dataclass(frozen=True)
class Ray:
    """Paraxial ray(s); ``r`` and ``theta`` have shape ``(..., 2)`` for (x, y)."""

    r: np.ndarray
    theta: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "r", np.asarray(self.r, dtype=float))
        object.__setattr__(self, "theta", np.asarray(self.theta, dtype=float))

    def is_paraxial(self, bound: float = MAX_PARAXIAL_ANGLE) -> np.ndarray:
        return np.linalg.norm(self.theta, axis=-1) <= bound


@dataclass(frozen=True)
class FreeSpace:
    length: float

    def matrix(self) -> AbcdMatrix:
        return free_space(self.length)


@dataclass(frozen=True)
class ThinLens:
    focal_length: float

    def matrix(self) -> AbcdMatrix:
        return thin_lens(self.focal_length)


Element = Union[FreeSpace, ThinLens, AbcdMatrix]


@dataclass(frozen=True)
class OpticalPrescription:
    """Ordered optical elements in propagation order."""

    elements: tuple

    def __post_init__(self):
        object.__setattr__(self, "elements", tuple(self.elements))
        for el in self.elements:
            if isinstance(el, FreeSpace) and not math.isfinite(el.length):
                raise InvalidArgumentError(f"free-space length must be finite, got {el.length}")
            if isinstance(el, ThinLens) and (el.focal_length == 0 or not math.isfinite(el.focal_length)):
                raise InvalidArgumentError(f"thin-lens focal length must be finite and nonzero, got {el.focal_length}")

    @classmethod
    def from_records(cls, records: Iterable[dict]) -> "OpticalPrescription":
        """Build from config entries ``{type = "free_space", length_m = ...}`` or
        ``{type = "thin_lens", focal_length_m = ...}``."""
        elements = []
        for i, rec in enumerate(records):
            kind = rec.get("type")
            extra = set(rec) - {"type", "length_m", "focal_length_m"}
            if extra:
                raise InvalidArgumentError(f"element {i}: unknown keys {sorted(extra)}")
            if kind == "free_space":
                elements.append(FreeSpace(float(rec["length_m"])))
            elif kind == "thin_lens":
                elements.append(ThinLens(float(rec["focal_length_m"])))
            else:
                raise InvalidArgumentError(f"element {i}: unknown type {kind!r}")
        return cls(tuple(elements))

    def to_records(self) -> list[dict]:
        out = []
        for el in self.elements:
            if isinstance(el, FreeSpace):
                out.append({"type": "free_space", "length_m": el.length})
            elif isinstance(el, ThinLens):
                out.append({"type": "thin_lens", "focal_length_m": el.focal_length})
            else:
                raise InvalidArgumentError("raw matrices cannot be serialized as elements")
        return out

    def matrix(self) -> AbcdMatrix:
        return compose(self)


def free_space(d: float) -> AbcdMatrix:
    """Propagation over distance ``d`` (negative = virtual back-propagation)."""
    if not math.isfinite(d):
        raise InvalidArgumentError(f"propagation distance must be finite, got {d}")
    return AbcdMatrix(1.0, float(d), 0.0, 1.0)


def thin_lens(f: float) -> AbcdMatrix:
    """Thin lens of focal length ``f``; use ``free_space(0)`` for no lens."""
    if f == 0 or not math.isfinite(f):
        raise InvalidArgumentError(f"focal length must be finite and nonzero, got {f}")
    return AbcdMatrix(1.0, 0.0, -1.0 / f, 1.0)


def _as_matrix(el) -> AbcdMatrix:
    if isinstance(el, AbcdMatrix):
        return el
    if isinstance(el, (FreeSpace, ThinLens)):
        return el.matrix()
    raise InvalidArgumentError(f"not an optical element: {el!r}")


def compose(prescription) -> AbcdMatrix:
    """System matrix of elements listed in propagation order.

    ``apply(compose([e1, e2]), ray) == apply(e2, apply(e1, ray))``.
    """
    elements = prescription.elements if isinstance(prescription, OpticalPrescription) else tuple(prescription)
    if not elements:
        raise InvalidArgumentError("cannot compose an empty element list")
    total = _as_matrix(elements[0])
    for el in elements[1:]:
        total = _as_matrix(el) @ total
    return total


def _axis_coefficients(m: MatrixLike):
    if isinstance(m, AbcdMatrix):
        return m.a, m.b, m.c, m.d
    mx, my = m
    return (
        np.array([mx.a, my.a]),
        np.array([mx.b, my.b]),
        np.array([mx.c, my.c]),
        np.array([mx.d, my.d]),
    )


def apply(m: MatrixLike, ray: Ray) -> Ray:
    a, b, c, d = _axis_coefficients(m)
    r, theta = ray.r, ray.theta
    return Ray(a * r + b * theta, c * r + d * theta)


def klyshko_solve(m: MatrixLike, r1, r2, b_min: float = B_MIN):
    """Recover the angles at both planes from positions measured at each.

    ``m`` maps plane 1 to plane 2.  Returns ``(theta1, theta2)`` with
    ``theta1 = (r2 - a r1) / b`` and ``theta2 = c r1 + d theta1``.

    Raises
    ------
    DegenerateImagingPlaneError
        If ``|b| <= b_min`` on any axis (the planes are conjugate, so the
        position at plane 2 carries no angle information).
    """
    for axis_m in ((m,) if isinstance(m, AbcdMatrix) else tuple(m)):
        if not abs(axis_m.b) > b_min:
            raise DegenerateImagingPlaneError(axis_m, b_min)
    a, b, c, d = _axis_coefficients(m)
    r1 = np.asarray(r1, dtype=float)
    r2 = np.asarray(r2, dtype=float)
    theta1 = (r2 - a * r1) / b
    theta2 = c * r1 + d * theta1
    return theta1, theta2


def refocus_matrix(base: AbcdMatrix, z: float) -> AbcdMatrix:
    """``base`` followed by propagation over ``z`` (output plane moved by ``z``)."""
    return compose([base, free_space(z)])


def reverse(m: AbcdMatrix) -> AbcdMatrix:
    """Matrix of the same system traversed backwards.

    Angles are measured along the reversed propagation direction, which
    gives ``[[d, b], [c, a]]``.
    """
    return AbcdMatrix(m.d, m.b, m.c, m.a)


def klyshko_unfold(partner_arm: AbcdMatrix, sample_relay: AbcdMatrix) -> AbcdMatrix:
    """Equivalent system from the partner camera plane to the sample plane.

    ``partner_arm`` maps the crystal plane to the partner camera and
    ``sample_relay`` maps the crystal plane to the sample reference plane.
    The crystal acts as a plane mirror in the unfolded picture.
    """
    return sample_relay @ reverse(partner_arm)
