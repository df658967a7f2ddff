import io
import os
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pairtrace.errors import HitValidationError, InvalidArgumentError, ParseError
from pairtrace.events import (
    BeamRegion,
    CameraGeometry,
    CoordinateMap,
    EventTable,
    HitTable,
    PhotonEvent,
    PixelHit,
    coordinate_to_pixel,
    in_region,
    pixel_to_coordinate,
    read_events,
    read_hits,
    sort_hits,
    write_events,
    write_hits,
)


def sample_hits(n=50, seed=0, width=512, height=256):
    rng = np.random.default_rng(seed)
    return HitTable(
        rng.integers(0, width, n),
        rng.integers(0, height, n),
        np.sort(rng.integers(0, 10**12, n)),
        rng.integers(1, 1000, n),
        (width, height),
    )


# -- file formats


def test_empty_files_read_empty_and_sorted():  # [TRIVIAL]
    for fmt, data in (("csv", b""), ("csv", b"x,y,toa_ps,tot\n")):
        hits = read_hits(io.BytesIO(data), fmt)
        assert len(hits) == 0 and hits.is_time_sorted
    buf = io.BytesIO()
    write_hits(HitTable.empty(), buf, "binary", 4, 4)
    hits = read_hits(io.BytesIO(buf.getvalue()))
    assert len(hits) == 0 and hits.is_time_sorted


@pytest.mark.parametrize("fmt", ["binary", "csv"])
def test_round_trip(fmt):  # [TRIVIAL]
    hits = sample_hits()
    buf = io.BytesIO()
    assert write_hits(hits, buf, fmt, 512, 256) == len(hits)
    back = read_hits(io.BytesIO(buf.getvalue()), fmt, 512, 256)
    assert back == hits


def test_csv_row_definition():  # [TRIVIAL]
    hits = read_hits(io.BytesIO(b"x,y,toa_ps,tot\n12,40,1500000,87\n"), "csv")
    assert list(hits) == [PixelHit(12, 40, 1500000, 87)]


def test_binary_layout_bit_exact():  # [TRIVIAL: format arithmetic]
    hits = HitTable([1, 2, 3], [4, 5, 6], [7, 8, 2**40], [9, 10, 11])
    buf = io.BytesIO()
    write_hits(hits, buf, "binary", 512, 256)
    data = buf.getvalue()
    assert len(data) == 16 + 3 * 16
    assert data[:4] == b"QCRT"
    assert struct.unpack("<HHH", data[4:10]) == (1, 512, 256)
    assert data[10:16] == bytes(6)
    x, y, toa, tot, res = struct.unpack("<HHQHH", data[16 + 32 : 16 + 48])
    assert (x, y, toa, tot, res) == (3, 6, 2**40, 11, 0)


def test_unwritable_sink(tmp_path):  # [TRIVIAL]
    with pytest.raises(OSError):
        write_hits(sample_hits(3), os.path.join(tmp_path, "missing", "f.bin"))


def test_malformed_records_report_offsets():
    data = b"x,y,toa_ps,tot\n1,2,3,4\n1,2,oops,4\n"
    with pytest.raises(ParseError) as info:
        read_hits(io.BytesIO(data), "csv")
    assert info.value.offset == len(b"x,y,toa_ps,tot\n1,2,3,4\n")
    buf = io.BytesIO()
    write_hits(sample_hits(2), buf, "binary", 512, 256)
    with pytest.raises(ParseError) as info:
        read_hits(io.BytesIO(buf.getvalue()[:-3]))
    assert info.value.offset == 32
    with pytest.raises(ParseError):
        read_hits(io.BytesIO(b"NOPE" + bytes(12)))


def test_out_of_bounds_pixels_listed():
    data = b"x,y,toa_ps,tot\n1,2,3,4\n600,2,5,4\n3,300,6,4\n"
    with pytest.raises(HitValidationError) as info:
        read_hits(io.BytesIO(data), "csv", 512, 256)
    assert info.value.indices == [1, 2]


def test_sorted_flag_and_sort_hits():
    hits = HitTable([5, 3, 1, 2], [0, 0, 0, 0], [10, 5, 5, 1], [1, 1, 1, 1])
    assert not hits.is_time_sorted
    s = sort_hits(hits)
    assert s.is_time_sorted
    # ties broken by (y, x)
    assert s.toa_ps.tolist() == [1, 5, 5, 10]
    assert s.x.tolist() == [2, 1, 3, 5]


def test_event_csv_round_trip():
    ev = EventTable([1.25, 3.0 / 7.0], [2.5, 1e-3], [10.0, 123456789.123], [3, 4])
    buf = io.BytesIO()
    write_events(ev, buf)
    assert buf.getvalue().startswith(b"x,y,t_ns,amplitude\n")
    assert read_events(io.BytesIO(buf.getvalue())) == ev


# -- geometry and regions


def test_in_region_boundary():  # [TRIVIAL]
    reg = BeamRegion((100.0, 50.0), 10.0)
    assert in_region(PhotonEvent(100.0, 50.0, 0.0), reg)
    assert in_region(PhotonEvent(110.0, 50.0, 0.0), reg)
    assert not in_region(PhotonEvent(110.001, 50.0, 0.0), reg)


@settings(max_examples=100, deadline=None)
@given(st.floats(0, 2 * np.pi), st.floats(0, 20))
def test_in_region_rotation_invariant(phi, rho):
    reg = BeamRegion((0.0, 0.0), 10.0)
    a = in_region(PhotonEvent(rho, 0.0, 0.0), reg)
    b = in_region(PhotonEvent(rho * np.cos(phi), rho * np.sin(phi), 0.0), reg)
    if abs(rho - 10.0) > 1e-9:
        assert a == b


def test_geometry_validation():
    CameraGeometry(512, 256)
    with pytest.raises(InvalidArgumentError):
        CameraGeometry(512, 256, image_region=BeamRegion((100.0, 128.0), 65.0), fourier_region=BeamRegion((200.0, 128.0), 65.0))
    with pytest.raises(InvalidArgumentError):
        CameraGeometry(256, 256)
    with pytest.raises(InvalidArgumentError):
        BeamRegion((0.0, 0.0), 0.0)


def test_pixel_to_coordinate_examples():
    image = CoordinateMap("image", (128.0, 128.0), 55e-6 / 5)
    assert np.allclose(pixel_to_coordinate(image, PhotonEvent(128.0, 128.0, 0.0)), 0.0)  # [TRIVIAL]
    r = pixel_to_coordinate(image, PhotonEvent(138.0, 128.0, 0.0))
    assert r[0] == pytest.approx(110e-6, rel=1e-12)  # [DERIVED: 10 px * 55 um / 5]
    fourier = CoordinateMap("fourier", (384.0, 128.0), 1e-4, (-1, -1))
    th = pixel_to_coordinate(fourier, PhotonEvent(389.0, 128.0, 0.0))
    assert th[0] < 0  # [TRIVIAL: sign contract]


@settings(max_examples=100, deadline=None)
@given(st.floats(-300, 300), st.floats(-300, 300), st.floats(1e-6, 1e-2), st.sampled_from([-1, 1]))
def test_coordinate_map_invertible(px, py, scale, sign):
    m = CoordinateMap("image", (128.3, 127.9), scale, (sign, -sign))
    back = coordinate_to_pixel(m, pixel_to_coordinate(m, np.array([px, py])))
    np.testing.assert_allclose(back, [px, py], atol=1e-9)
