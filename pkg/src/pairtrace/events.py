"""Camera hits, centroided photon events, file formats and pixel geometry.

Pixel coordinates put pixel ``(i, j)`` at the center ``x = i, y = j``; a
sensor of width ``W`` spans ``[-0.5, W - 0.5]`` in x.

Binary hit file layout (little endian)::

    header  16 bytes  b"QCRT", version u16, width u16, height u16, 6 zero bytes
    record  16 bytes  x u16, y u16, toa_ps u64, tot u16, 2 zero bytes
"""

from __future__ import annotations

import io
import os
from dataclasses import dataclass, field
from typing import BinaryIO, Iterator, Union

import numpy as np

from pairtrace.errors import HitValidationError, InvalidArgumentError, ParseError

MAGIC = b"QCRT"
FORMAT_VERSION = 1
HEADER_SIZE = 16
RECORD_SIZE = 16
DEFAULT_PIXEL_PITCH = 55e-6

HIT_CSV_HEADER = "x,y,toa_ps,tot"
EVENT_CSV_HEADER = "x,y,t_ns,amplitude"

_HEADER_DTYPE = np.dtype(
    {
        "names": ["magic", "version", "width", "height", "reserved"],
        "formats": ["S4", "<u2", "<u2", "<u2", "V6"],
        "offsets": [0, 4, 6, 8, 10],
        "itemsize": HEADER_SIZE,
    }
)
_RECORD_DTYPE = np.dtype(
    {
        "names": ["x", "y", "toa_ps", "tot", "reserved"],
        "formats": ["<u2", "<u2", "<u8", "<u2", "<u2"],
        "offsets": [0, 2, 4, 12, 14],
        "itemsize": RECORD_SIZE,
    }
)

PathOrStream = Union[str, os.PathLike, BinaryIO]


@dataclass(frozen=True)
class PixelHit:
    x: int
    y: int
    toa_ps: int
    tot: int


@dataclass(frozen=True)
class PhotonEvent:
    x: float
    y: float
    t_ns: float
    amplitude: int = 1


@dataclass
class HitTable:
    """Columnar sequence of :class:`PixelHit`.

    ``sensor`` carries ``(width, height)`` when known (binary files store it).
    """

    x: np.ndarray
    y: np.ndarray
    toa_ps: np.ndarray
    tot: np.ndarray
    sensor: tuple[int, int] | None = field(default=None, compare=False)

    def __post_init__(self):
        self.x = np.ascontiguousarray(self.x, dtype=np.uint16)
        self.y = np.ascontiguousarray(self.y, dtype=np.uint16)
        self.toa_ps = np.ascontiguousarray(self.toa_ps, dtype=np.int64)
        self.tot = np.ascontiguousarray(self.tot, dtype=np.uint16)
        n = len(self.x)
        if not (len(self.y) == len(self.toa_ps) == len(self.tot) == n):
            raise InvalidArgumentError("hit columns must have equal length")

    @classmethod
    def empty(cls, sensor=None) -> "HitTable":
        return cls(np.empty(0), np.empty(0), np.empty(0), np.empty(0), sensor)

    @classmethod
    def from_hits(cls, hits, sensor=None) -> "HitTable":
        hits = list(hits)
        return cls(
            np.array([h.x for h in hits], dtype=np.uint16),
            np.array([h.y for h in hits], dtype=np.uint16),
            np.array([h.toa_ps for h in hits], dtype=np.int64),
            np.array([h.tot for h in hits], dtype=np.uint16),
            sensor,
        )

    @classmethod
    def concatenate(cls, tables) -> "HitTable":
        tables = list(tables)
        if not tables:
            return cls.empty()
        return cls(
            np.concatenate([t.x for t in tables]),
            np.concatenate([t.y for t in tables]),
            np.concatenate([t.toa_ps for t in tables]),
            np.concatenate([t.tot for t in tables]),
            tables[0].sensor,
        )

    def __len__(self) -> int:
        return len(self.x)

    def __iter__(self) -> Iterator[PixelHit]:
        for i in range(len(self)):
            yield self[i]

    def __getitem__(self, idx):
        if isinstance(idx, (int, np.integer)):
            return PixelHit(int(self.x[idx]), int(self.y[idx]), int(self.toa_ps[idx]), int(self.tot[idx]))
        return HitTable(self.x[idx], self.y[idx], self.toa_ps[idx], self.tot[idx], self.sensor)

    def __eq__(self, other) -> bool:
        if not isinstance(other, HitTable):
            return NotImplemented
        return (
            np.array_equal(self.x, other.x)
            and np.array_equal(self.y, other.y)
            and np.array_equal(self.toa_ps, other.toa_ps)
            and np.array_equal(self.tot, other.tot)
        )

    @property
    def is_time_sorted(self) -> bool:
        return bool(np.all(np.diff(self.toa_ps) >= 0))


@dataclass
class EventTable:
    """Columnar sequence of :class:`PhotonEvent`."""

    x: np.ndarray
    y: np.ndarray
    t_ns: np.ndarray
    amplitude: np.ndarray

    def __post_init__(self):
        self.x = np.ascontiguousarray(self.x, dtype=np.float64)
        self.y = np.ascontiguousarray(self.y, dtype=np.float64)
        self.t_ns = np.ascontiguousarray(self.t_ns, dtype=np.float64)
        self.amplitude = np.ascontiguousarray(self.amplitude, dtype=np.int64)
        if not (len(self.y) == len(self.t_ns) == len(self.amplitude) == len(self.x)):
            raise InvalidArgumentError("event columns must have equal length")

    @classmethod
    def empty(cls) -> "EventTable":
        return cls(np.empty(0), np.empty(0), np.empty(0), np.empty(0))

    @classmethod
    def from_events(cls, events) -> "EventTable":
        events = list(events)
        return cls(
            np.array([e.x for e in events], dtype=float),
            np.array([e.y for e in events], dtype=float),
            np.array([e.t_ns for e in events], dtype=float),
            np.array([e.amplitude for e in events], dtype=np.int64),
        )

    def __len__(self) -> int:
        return len(self.x)

    def __iter__(self) -> Iterator[PhotonEvent]:
        for i in range(len(self)):
            yield self[i]

    def __getitem__(self, idx):
        if isinstance(idx, (int, np.integer)):
            return PhotonEvent(float(self.x[idx]), float(self.y[idx]), float(self.t_ns[idx]), int(self.amplitude[idx]))
        return EventTable(self.x[idx], self.y[idx], self.t_ns[idx], self.amplitude[idx])

    def __eq__(self, other) -> bool:
        if not isinstance(other, EventTable):
            return NotImplemented
        return all(
            np.array_equal(getattr(self, k), getattr(other, k)) for k in ("x", "y", "t_ns", "amplitude")
        )

    @property
    def xy(self) -> np.ndarray:
        return np.column_stack([self.x, self.y])

    @property
    def is_time_sorted(self) -> bool:
        return bool(np.all(np.diff(self.t_ns) >= 0))


# ---------------------------------------------------------------------------
# geometry


@dataclass(frozen=True)
class BeamRegion:
    """Virtual circular aperture around one beam spot (pixel units)."""

    center: tuple[float, float]
    radius: float

    def __post_init__(self):
        object.__setattr__(self, "center", (float(self.center[0]), float(self.center[1])))
        if not self.radius > 0:
            raise InvalidArgumentError(f"region radius must be positive, got {self.radius}")

    def contains(self, x, y) -> np.ndarray:
        dx = np.asarray(x, dtype=float) - self.center[0]
        dy = np.asarray(y, dtype=float) - self.center[1]
        return dx * dx + dy * dy <= self.radius * self.radius

    @property
    def area_px(self) -> float:
        return float(np.pi * self.radius**2)


@dataclass(frozen=True)
class CameraGeometry:
    width: int
    height: int
    pixel_pitch: float = DEFAULT_PIXEL_PITCH
    image_region: BeamRegion = BeamRegion((128.0, 128.0), 65.0)
    fourier_region: BeamRegion = BeamRegion((384.0, 128.0), 65.0)

    def __post_init__(self):
        if self.width <= 0 or self.height <= 0 or self.width > 65535 or self.height > 65535:
            raise InvalidArgumentError(f"bad sensor size {self.width}x{self.height}")
        if not self.pixel_pitch > 0:
            raise InvalidArgumentError("pixel pitch must be positive")
        for name, reg in (("image", self.image_region), ("fourier", self.fourier_region)):
            cx, cy = reg.center
            if (
                cx - reg.radius < -0.5
                or cy - reg.radius < -0.5
                or cx + reg.radius > self.width - 0.5
                or cy + reg.radius > self.height - 0.5
            ):
                raise InvalidArgumentError(f"{name} beam region does not lie on the sensor")
        a, b = self.image_region, self.fourier_region
        if np.hypot(a.center[0] - b.center[0], a.center[1] - b.center[1]) <= a.radius + b.radius:
            raise InvalidArgumentError("beam regions overlap")

    def on_sensor(self, ix, iy) -> np.ndarray:
        ix = np.asarray(ix)
        iy = np.asarray(iy)
        return (ix >= 0) & (ix < self.width) & (iy >= 0) & (iy < self.height)


@dataclass(frozen=True)
class CoordinateMap:
    """Affine pixel -> physical map for one arm.

    ``scale`` is meters per pixel when the arm supplies sample positions and
    radians per pixel when it supplies sample angles.  A ``sign`` of -1 on
    an axis mirrors it (this is where the momentum anti-correlation lives).
    """

    arm: str
    center: tuple[float, float]
    scale: float
    sign: tuple[int, int] = (1, 1)

    def __post_init__(self):
        if self.arm not in ("image", "fourier"):
            raise InvalidArgumentError(f"arm must be 'image' or 'fourier', got {self.arm!r}")
        if not self.scale > 0:
            raise InvalidArgumentError(f"scale must be positive, got {self.scale}")
        if any(s not in (-1, 1) for s in self.sign):
            raise InvalidArgumentError(f"sign entries must be +1 or -1, got {self.sign}")
        object.__setattr__(self, "center", (float(self.center[0]), float(self.center[1])))
        object.__setattr__(self, "sign", (int(self.sign[0]), int(self.sign[1])))

    def to_coordinate(self, px) -> np.ndarray:
        px = np.asarray(px, dtype=float)
        return np.asarray(self.sign, float) * (px - np.asarray(self.center)) * self.scale

    def to_pixel(self, coord) -> np.ndarray:
        coord = np.asarray(coord, dtype=float)
        return coord / self.scale * np.asarray(self.sign, float) + np.asarray(self.center)


def in_region(event, region: BeamRegion):
    """Whether an event lies inside ``region`` (boundary inclusive).

    Accepts a :class:`PhotonEvent` (returns bool) or an :class:`EventTable`
    (returns a boolean array).
    """
    if isinstance(event, PhotonEvent):
        return bool(region.contains(event.x, event.y))
    return region.contains(event.x, event.y)


def pixel_to_coordinate(cmap: CoordinateMap, event) -> np.ndarray:
    """``sign * (pixel - center) * scale`` per axis, for one event or a table."""
    if isinstance(event, PhotonEvent):
        return cmap.to_coordinate([event.x, event.y])
    if isinstance(event, EventTable):
        return cmap.to_coordinate(event.xy)
    return cmap.to_coordinate(event)


def coordinate_to_pixel(cmap: CoordinateMap, coord) -> np.ndarray:
    return cmap.to_pixel(coord)


def sort_hits(hits: HitTable) -> HitTable:
    """Stable sort by time of arrival, ties broken by (y, x)."""
    if len(hits) < 2:
        return hits
    dt = np.diff(hits.toa_ps)
    if np.all(dt > 0):
        return hits
    if np.all(dt >= 0):
        tie = dt == 0
        pix = hits.y.astype(np.int64) * 65536 + hits.x
        if np.all(pix[1:][tie] >= pix[:-1][tie]):
            return hits
    order = np.lexsort((hits.x, hits.y, hits.toa_ps))
    return hits[order]


# ---------------------------------------------------------------------------
# file I/O


def _read_all(source: PathOrStream) -> bytes:
    if isinstance(source, (str, os.PathLike)):
        with open(source, "rb") as fh:
            return fh.read()
    data = source.read()
    if isinstance(data, str):
        data = data.encode("ascii")
    return data


def _check_bounds(hits: HitTable, width: int | None, height: int | None):
    if width is None or height is None:
        return
    bad = np.flatnonzero((hits.x >= width) | (hits.y >= height))
    if bad.size:
        raise HitValidationError(f"pixel outside {width}x{height} sensor", bad)


def _parse_binary(data: bytes, width, height) -> HitTable:
    if len(data) == 0:
        return HitTable.empty(sensor=(width, height) if width is not None else None)
    if len(data) < HEADER_SIZE:
        raise ParseError("truncated header", 0)
    header = np.frombuffer(data, dtype=_HEADER_DTYPE, count=1)[0]
    if bytes(header["magic"]) != MAGIC:
        raise ParseError(f"bad magic {bytes(header['magic'])!r}", 0)
    if int(header["version"]) != FORMAT_VERSION:
        raise ParseError(f"unsupported format version {int(header['version'])}", 4)
    if bytes(header["reserved"]) != b"\x00" * 6:
        raise ParseError("nonzero reserved header bytes", 10)
    body = len(data) - HEADER_SIZE
    n, rem = divmod(body, RECORD_SIZE)
    if rem:
        raise ParseError("truncated record", HEADER_SIZE + n * RECORD_SIZE)
    rec = np.frombuffer(data, dtype=_RECORD_DTYPE, count=n, offset=HEADER_SIZE)
    bad = np.flatnonzero(rec["reserved"] != 0)
    if bad.size:
        raise ParseError("nonzero reserved record field", HEADER_SIZE + int(bad[0]) * RECORD_SIZE + 14)
    toa = rec["toa_ps"]
    big = np.flatnonzero(toa > np.iinfo(np.int64).max)
    if big.size:
        raise ParseError("toa_ps exceeds supported range", HEADER_SIZE + int(big[0]) * RECORD_SIZE + 4)
    file_w, file_h = int(header["width"]), int(header["height"])
    hits = HitTable(rec["x"], rec["y"], toa.astype(np.int64), rec["tot"], sensor=(file_w, file_h))
    _check_bounds(hits, file_w, file_h)
    if width is not None and height is not None:
        _check_bounds(hits, width, height)
    return hits


def _line_offsets(text: bytes) -> list[int]:
    offsets = [0]
    pos = text.find(b"\n")
    while pos != -1:
        offsets.append(pos + 1)
        pos = text.find(b"\n", pos + 1)
    return offsets


def _parse_int_rows(data: bytes, header: str, ncols: int) -> np.ndarray:
    """Parse a headered CSV of decimal integers, reporting the byte offset of the first bad row."""
    lines = data.split(b"\n")
    offsets = _line_offsets(data)
    if lines[0].strip(b"\r") != header.encode():
        raise ParseError(f"expected header {header!r}", 0)
    rows = []
    for i in range(1, len(lines)):
        line = lines[i].strip(b"\r")
        if not line:
            if i != len(lines) - 1:
                raise ParseError("empty record", offsets[i])
            continue
        parts = line.split(b",")
        if len(parts) != ncols:
            raise ParseError(f"expected {ncols} fields, got {len(parts)}", offsets[i])
        try:
            vals = [int(p) for p in parts]
        except ValueError:
            raise ParseError("non-integer field", offsets[i]) from None
        if any(p.strip() != p or p.startswith(b"+") for p in parts):
            raise ParseError("fields must be plain decimal integers", offsets[i])
        rows.append(vals)
    return np.array(rows, dtype=np.int64).reshape(-1, ncols)


def _parse_csv(data: bytes, width, height) -> HitTable:
    if len(data.strip()) == 0:
        return HitTable.empty()
    body_start = data.find(b"\n") + 1 if b"\n" in data else len(data)
    rows = None
    if not data[body_start:].strip():
        rows = _parse_int_rows(data, HIT_CSV_HEADER, 4)
    elif data[:body_start].strip(b"\r\n") == HIT_CSV_HEADER.encode():
        try:
            # fast path for well-formed files; any doubt falls through to the checked parser
            arr = np.loadtxt(io.BytesIO(data[body_start:]), dtype=np.int64, delimiter=",", ndmin=2)
            if arr.size == 0 or arr.shape[1] == 4:
                rows = arr.reshape(-1, 4)
        except ValueError:
            rows = None
    if rows is None:
        rows = _parse_int_rows(data, HIT_CSV_HEADER, 4)
    offsets = None
    limits = ((0, 65535), (0, 65535), (0, np.iinfo(np.int64).max), (1, 65535))
    for col, (lo, hi) in enumerate(limits):
        bad = np.flatnonzero((rows[:, col] < lo) | (rows[:, col] > hi))
        if bad.size:
            offsets = offsets or _line_offsets(data)
            raise ParseError(f"field {HIT_CSV_HEADER.split(',')[col]} out of range", offsets[int(bad[0]) + 1])
    hits = HitTable(rows[:, 0], rows[:, 1], rows[:, 2], rows[:, 3])
    _check_bounds(hits, width, height)
    return hits


def read_hits(source: PathOrStream, format: str = "binary", width: int | None = None, height: int | None = None) -> HitTable:
    """Read hits in file order.

    Use ``HitTable.is_time_sorted`` for the ordering flag.  ``width`` and
    ``height`` enable bounds validation for CSV input (binary files carry
    their own sensor size).

    Raises
    ------
    ParseError
        Malformed record, with its byte offset.
    HitValidationError
        Pixel outside the sensor, listing record indices.
    """
    data = _read_all(source)
    if format == "binary":
        return _parse_binary(data, width, height)
    if format == "csv":
        return _parse_csv(data, width, height)
    raise InvalidArgumentError(f"unknown hit format {format!r}")


def _open_sink(sink):
    if isinstance(sink, (str, os.PathLike)):
        return open(sink, "wb"), True
    return sink, False


def write_hits(hits: HitTable, sink: PathOrStream, format: str = "binary", width: int | None = None, height: int | None = None) -> int:
    """Write ``hits``; returns the number of records written."""
    if format not in ("binary", "csv"):
        raise InvalidArgumentError(f"unknown hit format {format!r}")
    n = len(hits)
    if format == "binary":
        if width is None or height is None:
            if hits.sensor is not None:
                width, height = hits.sensor
            else:
                width = int(hits.x.max()) + 1 if n else 0
                height = int(hits.y.max()) + 1 if n else 0
        header = np.zeros(1, dtype=_HEADER_DTYPE)
        header["magic"] = MAGIC
        header["version"] = FORMAT_VERSION
        header["width"] = width
        header["height"] = height
        rec = np.zeros(n, dtype=_RECORD_DTYPE)
        rec["x"] = hits.x
        rec["y"] = hits.y
        rec["toa_ps"] = hits.toa_ps
        rec["tot"] = hits.tot
        payload = header.tobytes() + rec.tobytes()
    else:
        buf = io.StringIO()
        buf.write(HIT_CSV_HEADER + "\n")
        if n:
            np.savetxt(
                buf,
                np.column_stack([hits.x, hits.y, hits.toa_ps, hits.tot]).astype(np.int64),
                fmt="%d",
                delimiter=",",
            )
        payload = buf.getvalue().encode("ascii")
    fh, owned = _open_sink(sink)
    try:
        fh.write(payload)
    finally:
        if owned:
            fh.close()
    return n


def write_events(events: EventTable, sink: PathOrStream) -> int:
    """Centroided-event CSV ``x,y,t_ns,amplitude`` (reals printed round-trip exact)."""
    buf = io.StringIO()
    buf.write(EVENT_CSV_HEADER + "\n")
    for x, y, t, a in zip(events.x.tolist(), events.y.tolist(), events.t_ns.tolist(), events.amplitude.tolist()):
        buf.write(f"{x!r},{y!r},{t!r},{a}\n")
    fh, owned = _open_sink(sink)
    try:
        fh.write(buf.getvalue().encode("ascii"))
    finally:
        if owned:
            fh.close()
    return len(events)


def read_events(source: PathOrStream) -> EventTable:
    data = _read_all(source)
    if not data.strip():
        return EventTable.empty()
    first = data.split(b"\n", 1)[0].strip(b"\r")
    if first != EVENT_CSV_HEADER.encode():
        raise ParseError(f"expected header {EVENT_CSV_HEADER!r}", 0)
    try:
        arr = np.loadtxt(io.BytesIO(data), dtype=np.float64, delimiter=",", skiprows=1, ndmin=2)
    except ValueError as exc:
        offsets = _line_offsets(data)
        for i, line in enumerate(data.split(b"\n")[1:], start=1):
            line = line.strip(b"\r")
            if not line:
                continue
            try:
                parts = [float(p) for p in line.split(b",")]
                if len(parts) != 4:
                    raise ValueError
            except ValueError:
                raise ParseError("malformed event record", offsets[i]) from exc
        raise ParseError("malformed event file", 0) from exc
    arr = arr.reshape(-1, 4)
    return EventTable(arr[:, 0], arr[:, 1], arr[:, 2], arr[:, 3].astype(np.int64))
