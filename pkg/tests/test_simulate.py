import io

import numpy as np
import pytest

from pairtrace.centroid import centroid_all, cluster_hits
from pairtrace.errors import InvalidArgumentError
from pairtrace.pipeline import CorrelationParams, correlate
from pairtrace.reconstruction import OpticsLayout
from pairtrace.simulate import (
    FWHM_PER_SIGMA,
    Bars,
    DetectorSpec,
    HalfPlane,
    OccluderPlane,
    SceneSpec,
    SimSpec,
    SourceSpec,
    apply_scene,
    generate_pairs,
    make_scene,
    simulate,
)

IDEAL = DetectorSpec(quantum_efficiency=1.0, dark_rate_hz=0.0, jitter_sigma_ns=0.0, mean_cluster_hits=0)
SMALL_BEAM = SourceSpec(pair_rate=1e5, beam_waist_sigma=0.2e-3, theta_sigma=0.01)


def true_pixels(sim, arm):
    """Unrounded pixel of each pair's photon in ``arm`` under the default image-plane layout."""
    layout, geo = sim.spec.layout, sim.spec.geometry
    if arm == "image":
        m, r, th = layout.sample_camera, sim.truth.r, sim.truth.theta
        c = geo.image_region.center
    else:
        raise NotImplementedError
    cam = m.a * r + m.b * th
    return c[0] + cam[:, 0] / geo.pixel_pitch, c[1] + cam[:, 1] / geo.pixel_pitch


# -- source


def test_blur_free_pairs_anticorrelated():  # [TRIVIAL: anti-correlation by construction]
    src = SourceSpec(position_blur_sigma=0.0, theta_blur_sigma=0.0)
    b = generate_pairs(src, 0.01, np.random.default_rng(0))
    for k in (0, 1):
        assert np.corrcoef(b.a_theta[:, k], b.b_theta[:, k])[0, 1] == pytest.approx(-1.0, abs=1e-12)
    np.testing.assert_array_equal(b.a_r, b.b_r)


def test_pair_count_poisson():  # [DERIVED: Poisson mean over 100 seeds]
    src = SourceSpec(pair_rate=1e5, beam_waist_sigma=0.0, theta_sigma=0.0, position_blur_sigma=0.0, theta_blur_sigma=0.0)
    counts = [len(generate_pairs(src, 1.0, np.random.default_rng(s))) for s in range(100)]
    assert abs(np.mean(counts) - 1e5) <= 3 * np.sqrt(1e5 / 100)


def test_bright_source_rate_accepted():  # [PUBLISHED: 1.3e7 pairs per second]
    b = generate_pairs(SourceSpec(pair_rate=1.3e7), 1e-3, np.random.default_rng(1))
    assert abs(len(b) - 1.3e4) <= 5 * np.sqrt(1.3e4)
    assert np.all(np.diff(b.t_s) >= 0) and b.t_s.min() >= 0 and b.t_s.max() < 1e-3


def test_invalid_specs():
    with pytest.raises(InvalidArgumentError):
        SourceSpec(pair_rate=0)
    with pytest.raises(InvalidArgumentError):
        DetectorSpec(quantum_efficiency=1.5)
    with pytest.raises(InvalidArgumentError):
        generate_pairs(SourceSpec(), 0.0, np.random.default_rng(0))


# -- scene


def test_scene_transparent_and_opaque():  # [TRIVIAL]
    rng = np.random.default_rng(2)
    r, th = rng.normal(0, 1e-3, (1000, 2)), rng.normal(0, 0.02, (1000, 2))
    assert apply_scene(r, th, SceneSpec()).all()
    wall = SceneSpec((OccluderPlane(0.003, (HalfPlane(-1.0),)),))
    assert not apply_scene(r, th, wall).any()


def test_opaque_scene_keeps_partner_arm():  # [TRIVIAL]
    wall = SceneSpec((OccluderPlane(0.0, (HalfPlane(-1.0),)),))
    sim = simulate(SimSpec(source=SMALL_BEAM, detector=IDEAL, scene=wall, duration_s=0.01), 0)
    assert len(sim.hits_image) == 0
    assert len(sim.hits_fourier) == sim.n_pairs
    assert sim.truth.fate_counts("image")["absorbed"] == sim.n_pairs


def test_half_plane_survival():  # [DERIVED: binomial 3 sigma]
    b = generate_pairs(SourceSpec(), 0.1, np.random.default_rng(3))
    alive = apply_scene(b.a_r, b.a_theta, SceneSpec((OccluderPlane(0.0, (HalfPlane(0.0),)),)))
    n = len(alive)
    assert abs(alive.mean() - 0.5) <= 3 * np.sqrt(0.25 / n)


def test_make_scene_examples():
    wires = make_scene("wires", depths_mm=(-9, -5, 3.5, 6), width_mm=0.15)  # [DERIVED: desk-scale depths]
    assert [p.z for p in wires.planes] == pytest.approx([-9e-3, -5e-3, 3.5e-3, 6e-3])
    bars = make_scene("usaf-bars", line_pairs_per_mm=5).planes[0].shapes[0]
    assert isinstance(bars, Bars) and bars.period == pytest.approx(0.2e-3)  # [PUBLISHED: 5 line pairs per mm]
    assert make_scene("wires", depths_mm=()).planes == ()  # [TRIVIAL]
    assert len(make_scene("needles").planes) == 2
    assert len(make_scene("parallax").planes) == 3
    with pytest.raises(InvalidArgumentError):
        make_scene("wires", width_mm=-0.1)
    with pytest.raises(InvalidArgumentError):
        make_scene("usaf-bars", line_pairs_per_mm=0)
    with pytest.raises(InvalidArgumentError):
        make_scene("teapot")


def test_bar_stripes_period():  # [PUBLISHED: 5 line pairs per mm]
    bars = Bars(5.0)
    x = np.linspace(-0.35e-3, 0.35e-3, 7001)
    op = bars.opaque(x, np.zeros_like(x)).astype(int)
    rises = x[1:][np.diff(op) == 1]
    np.testing.assert_allclose(np.diff(rises), 0.2e-3, atol=2e-7)
    assert len(rises) == 3


# -- detector


def test_degenerate_detector_hits_at_rounded_pixels():  # [TRIVIAL: degenerate detector]
    sim = simulate(SimSpec(source=SMALL_BEAM, detector=IDEAL, duration_s=0.02), 5)
    detected = sim.truth.fate_image == 0
    assert len(sim.hits_image) == int(detected.sum())
    assert np.all(sim.source_image >= 0)
    px, py = true_pixels(sim, "image")
    ids = sim.source_image
    np.testing.assert_array_equal(sim.hits_image.x, np.floor(px[ids] + 0.5))
    np.testing.assert_array_equal(sim.hits_image.y, np.floor(py[ids] + 0.5))
    # jitter 0: hit time is emission plus the fixed latency
    np.testing.assert_array_equal(sim.hits_image.toa_ps, np.rint((sim.truth.t_ns[ids] + IDEAL.latency_ns) * 1000).astype(np.int64))


def test_qe_pair_fraction():  # [DERIVED: binomial QE^2; QE PUBLISHED: 4 percent]
    det = DetectorSpec(quantum_efficiency=0.04, dark_rate_hz=0.0, mean_cluster_hits=0)
    sim = simulate(SimSpec(source=SMALL_BEAM, detector=det, duration_s=10.0), 6)
    fi, ff = sim.truth.fate_image, sim.truth.fate_fourier
    assert sim.truth.fate_counts("image")["lost_sensor"] == sim.truth.fate_counts("fourier")["lost_sensor"] == 0
    n = sim.n_pairs
    both = np.mean((fi == 0) & (ff == 0))
    p = 0.04**2
    assert abs(both - p) <= 3 * np.sqrt(p * (1 - p) / n)


def test_fate_conservation():  # [TRIVIAL: conservation]
    det = DetectorSpec(quantum_efficiency=0.5, mean_cluster_hits=0)
    sim = simulate(SimSpec(detector=det, scene=make_scene("usaf-bars"), duration_s=0.05), 7)
    for arm, src in (("image", sim.source_image), ("fourier", sim.source_fourier)):
        fates = sim.truth.fate_counts(arm)
        assert sum(fates.values()) == sim.n_pairs
        assert int(np.sum(src >= 0)) == fates["detected"]
    assert sim.truth.fate_counts("fourier")["absorbed"] == 0


def test_determinism_and_threads():  # [TRIVIAL: determinism]
    spec = SimSpec(source=SourceSpec(pair_rate=2e4), detector=DetectorSpec(), duration_s=0.3, chunk_s=0.1)
    a, b, c = simulate(spec, 9), simulate(spec, 9), simulate(spec, 9, threads=3)
    for other in (b, c):
        assert a.hits_image == other.hits_image and a.hits_fourier == other.hits_fourier
        np.testing.assert_array_equal(a.truth.r, other.truth.r)
    assert simulate(spec, 10).hits_image != a.hits_image


def test_output_time_sorted():
    sim = simulate(SimSpec(source=SourceSpec(pair_rate=2e4), duration_s=0.1), 11)
    assert sim.hits_image.is_time_sorted and sim.hits_fourier.is_time_sorted


def test_default_detector_centroid_precision():  # [DERIVED: truth-label comparison]
    sim = simulate(SimSpec(source=SourceSpec(pair_rate=2e4), duration_s=0.2), 12)
    c = cluster_hits(sim.hits_image)
    ev = centroid_all(c)
    _, first = np.unique(c.labels, return_index=True)
    owner = sim.source_image[first]
    sizes = c.sizes()
    # stray hits can split off small fragments; score each photon's largest cluster
    order = np.lexsort((-sizes, owner))
    order = order[owner[order] >= 0]
    main = order[np.r_[True, owner[order][1:] != owner[order][:-1]]]
    px, py = true_pixels(sim, "image")
    err = np.hypot(ev.x[main] - px[owner[main]], ev.y[main] - py[owner[main]])
    assert len(main) == sim.truth.fate_counts("image")["detected"]
    assert np.sqrt(np.mean(err**2)) <= 0.5


def test_delay_peak_width():  # [DERIVED: sqrt(2) jitter Gaussian; jitter PUBLISHED: about 6 ns]
    det = DetectorSpec(quantum_efficiency=1.0, dark_rate_hz=0.0, mean_cluster_hits=0)
    sim = simulate(SimSpec(source=SMALL_BEAM, detector=det, duration_s=1.0), 13)
    geo = sim.spec.geometry
    res = correlate(sim.hits_image, sim.hits_fourier, geo.image_region, geo.fourier_region, CorrelationParams(max_delay_ns=200))
    expected = np.sqrt(2) * det.jitter_sigma_ns * FWHM_PER_SIGMA
    assert abs(res.peak.center_ns) <= 1.0
    assert res.peak.fwhm_ns == pytest.approx(expected, rel=0.15)


def test_accidentals_scale_quadratically():  # [DERIVED: simulator sweep]
    out = []
    for rate in (5e4, 1e5):
        det = DetectorSpec(quantum_efficiency=0.7, dark_rate_hz=0.0, mean_cluster_hits=0)
        sim = simulate(SimSpec(source=SourceSpec(pair_rate=rate), detector=det, duration_s=10.0), 14)
        geo = sim.spec.geometry
        res = correlate(sim.hits_image, sim.hits_fourier, geo.image_region, geo.fourier_region)
        out.append(res.accidentals)
    assert out[1].accidental_rate_hz / out[0].accidental_rate_hz == pytest.approx(4.0, rel=0.1)
    assert out[1].true_rate_hz / out[0].true_rate_hz == pytest.approx(2.0, rel=0.1)


def test_truth_csv():
    sim = simulate(SimSpec(source=SourceSpec(pair_rate=1e3), duration_s=0.01), 15)
    buf = io.BytesIO()
    sim.truth.write_csv(buf)
    lines = buf.getvalue().decode().splitlines()
    assert lines[0] == "pair_id,r_x,r_y,theta_x,theta_y,t_ns,fate_image,fate_fourier"
    assert len(lines) == sim.n_pairs + 1
    assert lines[1].split(",")[0] == "0" and lines[1].split(",")[-1] in ("detected", "lost_qe", "lost_sensor")


def test_fourier_plane_layout_runs():
    spec = SimSpec(source=SourceSpec(pair_rate=1e4), layout=OpticsLayout.default("fourier-plane"), duration_s=0.05)
    sim = simulate(spec, 16)
    assert len(sim.hits_image) > 0 and len(sim.hits_fourier) > 0
