import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pairtrace.errors import DegenerateImagingPlaneError, InvalidArgumentError
from pairtrace.optics import (
    AbcdMatrix,
    FreeSpace,
    OpticalPrescription,
    Ray,
    ThinLens,
    apply,
    compose,
    free_space,
    klyshko_solve,
    klyshko_unfold,
    refocus_matrix,
    reverse,
    thin_lens,
)
from pairtrace.reconstruction import four_f


def close(m: AbcdMatrix, expected, tol=1e-12):
    np.testing.assert_allclose(m.as_array(), np.asarray(expected, float), rtol=0, atol=tol)


# -- elements


def test_free_space_definition():  # [TRIVIAL]
    close(free_space(0.0), [[1, 0], [0, 1]])
    m = free_space(0.1)
    assert (m.a, m.b, m.c, m.d) == (1.0, 0.1, 0.0, 1.0)


def test_free_space_additivity():  # [TRIVIAL]
    close(compose([free_space(0.03), free_space(0.07)]), free_space(0.10).as_array())


def test_free_space_negative_allowed_nonfinite_rejected():
    assert free_space(-0.2).b == -0.2
    for bad in (math.inf, -math.inf, math.nan):
        with pytest.raises(InvalidArgumentError):
            free_space(bad)


def test_thin_lens_definition():  # [TRIVIAL]
    m = thin_lens(0.1)
    assert (m.a, m.b, m.d) == (1.0, 0.0, 1.0)
    assert m.c == pytest.approx(-10.0, abs=1e-12)
    assert thin_lens(0.05).det == 1.0


def test_thin_lens_degenerate_rejected():  # [TRIVIAL]
    for bad in (0.0, math.inf, math.nan):
        with pytest.raises(InvalidArgumentError):
            thin_lens(bad)


# -- composition


def test_four_f_magnification():  # [TRIVIAL]
    close(compose(four_f(0.1, 0.5)), [[-5, 0], [0, -0.2]])
    close(compose(four_f(0.1, 0.1)), [[-1, 0], [0, -1]])


def test_compose_single_and_empty():
    close(compose([thin_lens(0.2)]), thin_lens(0.2).as_array())
    with pytest.raises(InvalidArgumentError):
        compose([])


def test_compose_order_matches_sequential_apply(rng):
    e1, e2 = free_space(0.3), thin_lens(0.07)
    ray = Ray(rng.normal(size=2), rng.normal(size=2) * 0.01)
    one = apply(compose([e1, e2]), ray)
    two = apply(e2, apply(e1, ray))
    np.testing.assert_allclose(one.r, two.r, rtol=1e-14)
    np.testing.assert_allclose(one.theta, two.theta, rtol=1e-14)


def test_prescription_records_round_trip():
    p = OpticalPrescription((FreeSpace(0.1), ThinLens(0.05), FreeSpace(0.2)))
    q = OpticalPrescription.from_records(p.to_records())
    assert q == p
    with pytest.raises(InvalidArgumentError):
        OpticalPrescription.from_records([{"type": "mirror"}])
    with pytest.raises(InvalidArgumentError):
        OpticalPrescription((ThinLens(0.0),))


@settings(max_examples=200, deadline=None)
@given(
    st.lists(
        st.one_of(
            st.floats(-1.0, 1.0).map(FreeSpace),
            st.floats(0.01, 1.0).flatmap(lambda f: st.sampled_from([f, -f])).map(ThinLens),
        ),
        min_size=1,
        max_size=8,
    )
)
def test_composed_determinant_is_one(elements):  # [DERIVED: det of a product]
    m = compose(elements)
    # ad - bc cancels: float64 entries near 1e3 already carry ~1e-9 of det rounding
    scale = abs(m.a * m.d) + abs(m.b * m.c)
    assert abs(m.det - 1.0) <= max(1e-9, 1e3 * np.finfo(float).eps * scale)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-1, 1), min_size=3, max_size=3), st.lists(st.floats(0.05, 1), min_size=3, max_size=3))
def test_composition_associative(ds, fs):
    a, b, c = (compose([free_space(d), thin_lens(f)]) for d, f in zip(ds, fs))
    left = ((a @ b) @ c).as_array()
    right = (a @ (b @ c)).as_array()
    scale = max(1.0, np.abs(left).max())
    assert np.abs(left - right).max() <= 1e-12 * scale


# -- apply


def test_apply_examples():  # [TRIVIAL]
    ray = Ray([0.001, -0.002], [0.003, 0.004])
    same = apply(AbcdMatrix.identity(), ray)
    np.testing.assert_array_equal(same.r, ray.r)
    out = apply(free_space(0.2), Ray([0.0, 0.0], [0.005, 0.0]))
    np.testing.assert_allclose(out.r, [1e-3, 0.0], atol=1e-15)
    np.testing.assert_allclose(out.theta, [0.005, 0.0])
    out = apply(compose(four_f(0.1, 0.5)), Ray([1e-3, 0.0], [0.0, 0.0]))
    np.testing.assert_allclose(out.r, [-5e-3, 0.0], atol=1e-15)
    np.testing.assert_allclose(out.theta, [0.0, 0.0], atol=1e-15)


def test_apply_per_axis_pair():
    out = apply((free_space(0.1), free_space(0.2)), Ray([0.0, 0.0], [0.01, 0.01]))
    np.testing.assert_allclose(out.r, [1e-3, 2e-3])


def test_paraxial_flag():
    assert Ray([0, 0], [0.06, 0.08]).is_paraxial()
    assert not Ray([0, 0], [0.08, 0.08]).is_paraxial()


# -- klyshko


def test_klyshko_free_space_example():  # [TRIVIAL]
    th1, th2 = klyshko_solve(free_space(0.1), 0.0, 1e-3)
    assert th1 == pytest.approx(0.01, rel=1e-12)
    assert th2 == pytest.approx(0.01, rel=1e-12)


def test_klyshko_degenerate():  # [TRIVIAL]
    with pytest.raises(DegenerateImagingPlaneError) as info:
        klyshko_solve(compose(four_f(0.1, 0.5)), 0.0, 1e-3)
    assert "matrix" in str(info.value)
    with pytest.raises(DegenerateImagingPlaneError):
        klyshko_solve(free_space(5e-7), 0.0, 0.0)
    klyshko_solve(free_space(5e-7), 0.0, 0.0, b_min=1e-7)


def test_klyshko_round_trip_random(rng):  # [DERIVED: forward apply is the oracle]
    for _ in range(500):
        a, b, c = rng.uniform(-3, 3, 3)
        if abs(a) < 0.05:
            continue
        d = (1.0 + b * c) / a
        if abs(b) <= 1e-6:
            continue
        m = AbcdMatrix(a, b, c, d)
        r1 = rng.normal(0, 1e-3, 2)
        th = rng.normal(0, 0.02, 2)
        fwd = apply(m, Ray(r1, th))
        th1, th2 = klyshko_solve(m, r1, fwd.r)
        np.testing.assert_allclose(th1, th, rtol=1e-9, atol=1e-9 * np.abs(th).max())
        np.testing.assert_allclose(th2, fwd.theta, rtol=1e-9, atol=1e-9 * np.abs(fwd.theta).max())


def test_reverse_and_unfold():
    m = compose([free_space(0.1), thin_lens(0.05), free_space(0.02)])
    r = reverse(m)
    assert (r.a, r.b, r.c, r.d) == (m.d, m.b, m.c, m.a)
    # a ray traced through the reversed system with flipped angle retraces the forward path
    ray = Ray([1e-3, 0.0], [0.01, 0.0])
    fwd = apply(m, ray)
    back = apply(r, Ray(fwd.r, -fwd.theta))
    np.testing.assert_allclose(back.r, ray.r, atol=1e-15)
    np.testing.assert_allclose(back.theta, -ray.theta, atol=1e-15)
    # unfolding with identity relay is just the reversed partner arm
    assert klyshko_unfold(m, AbcdMatrix.identity()) == r


# -- refocus


def test_refocus_matrix():  # [TRIVIAL]
    base = compose([free_space(0.1), thin_lens(0.2)])
    close(refocus_matrix(base, 0.0), base.as_array())
    close(refocus_matrix(AbcdMatrix.identity(), 0.004), free_space(0.004).as_array())
    close(refocus_matrix(refocus_matrix(base, 0.003), 0.005), refocus_matrix(base, 0.008).as_array(), 1e-15)
