import math

import pytest

from pairtrace.config import PipelineConfig, parse_value
from pairtrace.errors import ConfigError, DegenerateImagingPlaneError
from pairtrace.simulate import Bars, Wire

DEFAULT = PipelineConfig.load()


def test_default_has_every_section():
    for s in ("camera", "optics", "maps", "centroiding", "coincidence", "reconstruction", "depthmap", "simulator"):
        DEFAULT.require(s)
    assert DEFAULT.config_hash == PipelineConfig.load().config_hash


def test_unknown_key_reports_key_and_line():
    text = "[camera]\nwidth_px = 512\n\n[coincidence]\ngate_ns = 20.0\ngate_width = 3\n"
    with pytest.raises(ConfigError) as info:
        PipelineConfig.from_text(text)
    assert info.value.key == "coincidence.gate_width" and info.value.line == 6


def test_unknown_section_and_bad_types():
    with pytest.raises(ConfigError) as info:
        PipelineConfig.from_text("[camera]\n[lenses]\nf = 1\n")
    assert info.value.key == "lenses" and info.value.line == 2
    with pytest.raises(ConfigError) as info:
        PipelineConfig.from_text('[coincidence]\ngate_ns = "wide"\n')
    assert info.value.key == "coincidence.gate_ns" and info.value.line == 2
    with pytest.raises(ConfigError):
        PipelineConfig.from_text("[camera]\nwidth_px = 51.2\n")
    with pytest.raises(ConfigError) as info:
        PipelineConfig.from_text("[camera]\nwidth_px = = 3\n")
    assert info.value.line == 2


def test_missing_section_named():
    cfg = PipelineConfig.from_text("[camera]\n")
    with pytest.raises(ConfigError) as info:
        cfg.require("camera", "simulator")
    assert "[simulator]" in str(info.value)


def test_defaults_filled_in_present_sections_only():
    cfg = PipelineConfig.from_text("[coincidence]\ngate_ns = 12.0\n")
    assert cfg.section("coincidence")["bin_width_ns"] == 1.0
    assert "camera" not in cfg.data


def test_overrides():
    cfg = DEFAULT.with_overrides(["coincidence.gate_ns=12", "simulator.scene.kind=wires"])
    assert cfg.section("coincidence")["gate_ns"] == 12.0
    assert cfg.section("simulator")["scene"] == {"kind": "wires"}
    assert cfg.config_hash != DEFAULT.config_hash
    scene = cfg.sim_spec().scene
    assert len(scene.planes) == 4 and isinstance(scene.planes[0].shapes[0], Wire)
    assert isinstance(DEFAULT.sim_spec().scene.planes[0].shapes[0], Bars)
    with pytest.raises(ConfigError):
        DEFAULT.with_overrides(["coincidence.nope=1"])
    with pytest.raises(ConfigError):
        DEFAULT.with_overrides(["gate_ns"])
    with pytest.raises(ConfigError):
        DEFAULT.with_overrides(["simulator.scene.kind=teapot"])


def test_parse_value():
    assert parse_value("3") == 3 and parse_value("2.5") == 2.5 and parse_value("true") is True
    assert parse_value("[1, 2]") == [1, 2] and parse_value("wires") == "wires"


def test_sim_spec_units():
    spec = DEFAULT.sim_spec()
    assert spec.detector.jitter_sigma_ns * 2 * math.sqrt(2 * math.log(2)) == pytest.approx(6.0)
    # 1e5 Hz/cm^2 over a 65 px radius disk of 55 um pixels
    area_cm2 = math.pi * (65 * 55e-4) ** 2
    assert spec.detector.dark_rate_hz == pytest.approx(1e5 * area_cm2)
    assert spec.source.beam_waist_sigma == pytest.approx(0.6e-3)
    assert spec.duration_s == 60.0


def test_explicit_maps():
    cfg = DEFAULT.with_overrides(["maps.derive_from_optics=false", "maps.position_um_per_px=20"])
    rc = cfg.reconstruction_config()
    assert rc.position_map.scale == pytest.approx(20e-6)
    assert rc.angle_map.scale == pytest.approx(0.9166666666666666e-3)


def test_derived_maps_match_explicit_defaults():
    derived = DEFAULT.reconstruction_config()
    explicit = DEFAULT.with_overrides(["maps.derive_from_optics=false"]).reconstruction_config()
    assert derived.position_map == explicit.position_map
    assert derived.angle_map.scale == pytest.approx(explicit.angle_map.scale, rel=1e-12)
    assert derived.angle_map.sign == explicit.angle_map.sign


OPTICS = """
[camera]
[maps]
[reconstruction]
[optics]
mode = "image-plane"
relay = [{type = "free_space", length_m = 0.1}, {type = "thin_lens", focal_length_m = 0.1},
         {type = "free_space", length_m = 0.2}, {type = "thin_lens", focal_length_m = 0.1},
         {type = "free_space", length_m = 0.1}]
sample_camera = [{type = "free_space", length_m = 0.1}, {type = "thin_lens", focal_length_m = 0.1},
                 {type = "free_space", length_m = 0.6}, {type = "thin_lens", focal_length_m = 0.5},
                 {type = "free_space", length_m = 0.5}]
partner_arm = PARTNER
"""


def test_degenerate_optics_from_config():
    imaging = OPTICS.replace("PARTNER", OPTICS.split("relay = ")[1].split("\nsample_camera")[0])
    cfg = PipelineConfig.from_text(imaging)
    with pytest.raises(DegenerateImagingPlaneError):
        cfg.reconstruction_config()
    fourier = OPTICS.replace(
        "PARTNER", '[{type = "free_space", length_m = 0.1}, {type = "thin_lens", focal_length_m = 0.1}, {type = "free_space", length_m = 0.1}]'
    )
    rc = PipelineConfig.from_text(fourier).reconstruction_config()
    assert rc.position_map.scale == pytest.approx(11e-6)


def test_partial_optics_rejected():
    with pytest.raises(ConfigError) as info:
        PipelineConfig.from_text('[optics]\nrelay = [{type = "free_space", length_m = 0.1}]\n')
    assert info.value.key == "optics.relay"
    with pytest.raises(ConfigError):
        PipelineConfig.from_text('[optics]\nrelay = [{type = "mirror"}]\nsample_camera = []\npartner_arm = []\n')


def test_calibration_path_relative_to_config(tmp_path):
    (tmp_path / "cal.csv").write_text("tot,correction_ns\n1,2.0\n100,0.0\n")
    (tmp_path / "p.toml").write_text('[camera]\n[centroiding]\ncalibration_csv = "cal.csv"\n[coincidence]\n')
    params = PipelineConfig.load(tmp_path / "p.toml").correlation_params()
    assert params.calibration.correction([1])[0] == 2.0
    assert params.peak_center_ns is None
