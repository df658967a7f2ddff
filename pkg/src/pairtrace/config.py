"""Pipeline configuration: TOML file, schema with unit-suffixed keys, overrides.

Sections present in the file are filled with schema defaults for missing
keys; sections absent from the file stay absent so that commands can insist
on the ones they need.  Unknown sections and keys are rejected with the key
path and the line it appears on.
"""

from __future__ import annotations

import copy
import hashlib
import json
import math
import os
import re
import sys
from dataclasses import dataclass
from importlib import resources

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from pairtrace.centroid import TimingCalibration
from pairtrace.errors import ConfigError, InvalidArgumentError
from pairtrace.events import BeamRegion, CameraGeometry, CoordinateMap
from pairtrace.optics import OpticalPrescription
from pairtrace.pipeline import CorrelationParams
from pairtrace.reconstruction import MODES, GridSpec, OpticsLayout, ParallaxLayout, ReconstructionConfig
from pairtrace.simulate import DetectorSpec, SimSpec, SourceSpec, dark_rate_for_region, make_scene

# kind tags: f float, i int, b bool, s str, pair (2 numbers), signs (2 of +-1),
# floats / strs (lists), elements (optical element tables)
SCHEMA = {
    "camera": {
        "width_px": ("i", 512),
        "height_px": ("i", 256),
        "pixel_pitch_um": ("f", 55.0),
        "image_center_px": ("pair", [128.0, 128.0]),
        "image_radius_px": ("f", 65.0),
        "fourier_center_px": ("pair", [384.0, 128.0]),
        "fourier_radius_px": ("f", 65.0),
    },
    "optics": {
        "mode": ("s", "image-plane"),
        "b_min_um": ("f", 1.0),
        "relay": ("elements", None),
        "sample_camera": ("elements", None),
        "partner_arm": ("elements", None),
    },
    "maps": {
        "derive_from_optics": ("b", True),
        "position_um_per_px": ("f", 11.0),
        "position_sign": ("signs", [-1, -1]),
        "angle_mrad_per_px": ("f", 0.055 / 0.06),
        "angle_sign": ("signs", [-1, -1]),
    },
    "centroiding": {
        "spatial_radius_px": ("f", 2.0),
        "temporal_window_ns": ("f", 100.0),
        "calibration_csv": ("s", ""),
    },
    "coincidence": {
        "bin_width_ns": ("f", 1.0),
        "max_delay_ns": ("f", 500.0),
        "significance_k": ("f", 5.0),
        "gate_ns": ("f", 20.0),
        "fixed_peak_center": ("b", False),
        "peak_center_ns": ("f", 0.0),
    },
    "reconstruction": {
        "grid_bins": ("i", 131),
        "bin_um": ("f", 0.0),
        "z_mm": ("f", 0.0),
        "z_min_mm": ("f", -20.0),
        "z_max_mm": ("f", 20.0),
        "z_step_mm": ("f", 1.0),
        "dither_px": ("f", 1.0),
        "bilinear": ("b", False),
        "max_angle_mrad": ("f", 100.0),
        "parallax_pitch_px": ("f", 25.0),
        "parallax_diameter_px": ("f", 20.0),
    },
    "depthmap": {
        "sum_window_px": ("i", 21),
        "poisson_debias": ("b", True),
        "stencil": ("i", 3),
        "threshold_window_px": ("i", 31),
        "threshold_offset_std": ("f", 0.5),
        "histogram_bin_mm": ("f", 0.0),
        "histogram_modes": ("i", 4),
    },
    "simulator": {
        "duration_s": ("f", 60.0),
        "chunk_s": ("f", 1.0),
        "pair_rate_hz": ("f", 1e5),
        "beam_waist_sigma_mm": ("f", 0.6),
        "theta_sigma_mrad": ("f", 30.0),
        "position_blur_sigma_um": ("f", 5.0),
        "theta_blur_sigma_mrad": ("f", 0.5),
        "quantum_efficiency": ("f", 0.2),
        "dark_density_hz_per_cm2": ("f", 1e5),
        "jitter_sigma_ns": ("f", 6.0 / (2.0 * math.sqrt(2.0 * math.log(2.0)))),
        "cluster_sigma_px": ("f", 1.75),
        "mean_cluster_hits": ("f", 0.0),
        "tot_gain": ("f", 200.0),
        "tot_noise_sigma": ("f", 0.3),
        "tick_ps": ("f", 0.0),
        "latency_ns": ("f", 1000.0),
        "scene": ("table", None),
    },
}

SCENE_SCHEMA = {
    "usaf-bars": {
        "line_pairs_per_mm": "f",
        "z_mm": "f",
        "n_bars": "i",
        "length_mm": "f",
        "orientation": "s",
        "center_mm": "pair",
    },
    "wires": {"depths_mm": "floats", "offsets_mm": "floats", "width_mm": "f", "orientations": "strs"},
    "needles": {"z_mm": "f", "base_width_mm": "f", "length_mm": "f", "separation_mm": "f"},
    "parallax": {"vertical_z_mm": "f", "horizontal_z_mm": "f", "disk_z_mm": "f", "width_mm": "f"},
    "none": {},
}

COMMAND_SECTIONS = {
    "simulate": ("camera", "optics", "simulator"),
    "correlate": ("camera", "centroiding", "coincidence"),
    "reconstruct": ("camera", "optics", "maps", "reconstruction"),
    "depthmap": ("camera", "optics", "maps", "reconstruction", "depthmap"),
}


def _key_line(text: str, path: str) -> int | None:
    """Line (1-based) where the dotted ``path`` is defined, if it can be found."""
    if not text:
        return None
    *table, key = path.split(".")
    want = ".".join(table)
    current = ""
    header = re.compile(r"^\s*\[+\s*([^\]]+?)\s*\]+")
    assign = re.compile(r"^\s*" + re.escape(key) + r"\s*=")
    for i, line in enumerate(text.splitlines(), 1):
        m = header.match(line)
        if m:
            current = m.group(1).replace('"', "").replace(" ", "")
            if not table and current == key:
                return i
            continue
        if current == want and assign.match(line):
            return i
    return None


def _number(v) -> bool:
    return isinstance(v, (int, float)) and not isinstance(v, bool)


def _check(kind: str, value, path: str, text: str):
    def fail(what):
        raise ConfigError(f"expected {what}, got {value!r}", path, _key_line(text, path))

    if kind == "f":
        if not _number(value) or not math.isfinite(value):
            fail("a finite number")
        return float(value)
    if kind == "i":
        if isinstance(value, bool) or not isinstance(value, int):
            fail("an integer")
        return int(value)
    if kind == "b":
        if not isinstance(value, bool):
            fail("true or false")
        return value
    if kind == "s":
        if not isinstance(value, str):
            fail("a string")
        return value
    if kind == "pair":
        if not (isinstance(value, list) and len(value) == 2 and all(_number(v) for v in value)):
            fail("a list of two numbers")
        return [float(v) for v in value]
    if kind == "signs":
        if not (isinstance(value, list) and len(value) == 2 and all(v in (-1, 1) and not isinstance(v, bool) for v in value)):
            fail("a list of two signs (+1 or -1)")
        return [int(v) for v in value]
    if kind == "floats":
        if not (isinstance(value, list) and all(_number(v) for v in value)):
            fail("a list of numbers")
        return [float(v) for v in value]
    if kind == "strs":
        if not (isinstance(value, list) and all(isinstance(v, str) for v in value)):
            fail("a list of strings")
        return list(value)
    if kind == "elements":
        if not (isinstance(value, list) and all(isinstance(v, dict) for v in value)):
            fail("a list of element tables")
        try:
            OpticalPrescription.from_records(value)
        except (InvalidArgumentError, KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"bad optical element: {exc}", path, _key_line(text, path)) from None
        return copy.deepcopy(value)
    raise AssertionError(kind)


def _validate_scene(table, text: str) -> dict:
    path = "simulator.scene"
    if not isinstance(table, dict):
        raise ConfigError("expected a table", path, _key_line(text, path))
    kind = table.get("kind", "usaf-bars")
    if kind not in SCENE_SCHEMA:
        raise ConfigError(f"unknown scene kind {kind!r}; expected one of {sorted(SCENE_SCHEMA)}", path + ".kind", _key_line(text, path + ".kind"))
    out = {"kind": kind}
    allowed = SCENE_SCHEMA[kind]
    for key, value in table.items():
        if key == "kind":
            continue
        if key not in allowed:
            raise ConfigError(f"unknown key for scene kind {kind!r}", f"{path}.{key}", _key_line(text, f"{path}.{key}"))
        out[key] = _check(allowed[key], value, f"{path}.{key}", text)
    return out


def validate(raw: dict, text: str = "") -> dict:
    """Check ``raw`` against the schema and fill defaults inside present sections."""
    out = {}
    for section, table in raw.items():
        if section not in SCHEMA:
            raise ConfigError(f"unknown section [{section}]", section, _key_line(text, section))
        if not isinstance(table, dict):
            raise ConfigError("expected a table", section, _key_line(text, section))
        schema = SCHEMA[section]
        sec = {}
        for key, value in table.items():
            path = f"{section}.{key}"
            if key not in schema:
                raise ConfigError("unknown key", path, _key_line(text, path))
            kind, _ = schema[key]
            sec[key] = _validate_scene(value, text) if kind == "table" else _check(kind, value, path, text)
        for key, (kind, default) in schema.items():
            if key not in sec and default is not None:
                sec[key] = copy.deepcopy(default)
        if section == "simulator" and "scene" not in sec:
            sec["scene"] = {"kind": "none"}
        out[section] = sec
    _cross_check(out, text)
    return out


def _cross_check(cfg: dict, text: str) -> None:
    optics = cfg.get("optics")
    if optics is not None:
        if optics["mode"] not in MODES:
            raise ConfigError(f"mode must be one of {MODES}", "optics.mode", _key_line(text, "optics.mode"))
        given = [k for k in ("relay", "sample_camera", "partner_arm") if k in optics]
        if given and len(given) != 3:
            raise ConfigError("relay, sample_camera and partner_arm must be given together", "optics." + given[0], _key_line(text, "optics." + given[0]))
    rec = cfg.get("reconstruction")
    if rec is not None:
        if rec["grid_bins"] < 1:
            raise ConfigError("must be at least 1", "reconstruction.grid_bins", _key_line(text, "reconstruction.grid_bins"))
        if rec["z_step_mm"] <= 0:
            raise ConfigError("must be positive", "reconstruction.z_step_mm", _key_line(text, "reconstruction.z_step_mm"))
        if rec["z_min_mm"] > rec["z_max_mm"]:
            raise ConfigError("z_min_mm exceeds z_max_mm", "reconstruction.z_min_mm", _key_line(text, "reconstruction.z_min_mm"))
    dm = cfg.get("depthmap")
    if dm is not None and dm["stencil"] not in (3, 5):
        raise ConfigError("stencil must be 3 or 5", "depthmap.stencil", _key_line(text, "depthmap.stencil"))


def parse_value(text: str):
    """TOML literal if it parses as one, else the bare string."""
    try:
        return tomllib.loads(f"v = {text}")["v"]
    except tomllib.TOMLDecodeError:
        return text


@dataclass
class PipelineConfig:
    data: dict
    text: str = ""
    base_dir: str = "."

    # -- loading

    @classmethod
    def from_text(cls, text: str, base_dir: str = ".") -> "PipelineConfig":
        try:
            raw = tomllib.loads(text)
        except tomllib.TOMLDecodeError as exc:
            m = re.search(r"line (\d+)", str(exc))
            raise ConfigError(f"TOML syntax error: {exc}", None, int(m.group(1)) if m else None) from None
        return cls(validate(raw, text), text, base_dir)

    @classmethod
    def load(cls, path: str | os.PathLike | None = None) -> "PipelineConfig":
        """Read ``path``, or the packaged defaults when ``path`` is None.

        Raises ``OSError`` when the file cannot be read.
        """
        if path is None:
            text = resources.files("pairtrace").joinpath("data/default.toml").read_text(encoding="utf-8")
            return cls.from_text(text)
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
        return cls.from_text(text, os.path.dirname(os.path.abspath(path)))

    def with_overrides(self, assignments) -> "PipelineConfig":
        """Apply ``section.key=value`` (or ``simulator.scene.key=value``) assignments."""
        raw = copy.deepcopy(self.data)
        for item in assignments:
            if "=" not in item:
                raise ConfigError(f"override {item!r} is not of the form section.key=value")
            path, value = item.split("=", 1)
            parts = path.strip().split(".")
            if len(parts) < 2:
                raise ConfigError("override needs section.key", path)
            node = raw
            for p in parts[:-1]:
                node = node.setdefault(p, {})
                if not isinstance(node, dict):
                    raise ConfigError("not a table", path)
            node[parts[-1]] = parse_value(value.strip())
        old_kind = self.data.get("simulator", {}).get("scene", {}).get("kind")
        scene = raw.get("simulator", {}).get("scene")
        if isinstance(scene, dict) and scene.get("kind") != old_kind:
            # a new scene kind starts from its own defaults
            explicit = {a.split("=", 1)[0].strip().rsplit(".", 1)[-1] for a in assignments if a.strip().startswith("simulator.scene.")}
            raw["simulator"]["scene"] = {k: v for k, v in scene.items() if k == "kind" or k in explicit}
        return PipelineConfig(validate(raw, ""), self.text, self.base_dir)

    # -- access

    def require(self, *sections: str) -> None:
        for s in sections:
            if s not in self.data:
                raise ConfigError(f"missing section [{s}]", s)

    def section(self, name: str) -> dict:
        self.require(name)
        return self.data[name]

    @property
    def config_hash(self) -> str:
        blob = json.dumps(self.data, sort_keys=True, separators=(",", ":")).encode("utf-8")
        return hashlib.sha256(blob).hexdigest()

    # -- builders

    def geometry(self) -> CameraGeometry:
        c = self.section("camera")
        try:
            return CameraGeometry(
                c["width_px"],
                c["height_px"],
                c["pixel_pitch_um"] * 1e-6,
                BeamRegion(tuple(c["image_center_px"]), c["image_radius_px"]),
                BeamRegion(tuple(c["fourier_center_px"]), c["fourier_radius_px"]),
            )
        except InvalidArgumentError as exc:
            raise ConfigError(str(exc), "camera") from None

    def regions(self) -> tuple[BeamRegion, BeamRegion]:
        g = self.geometry()
        return g.image_region, g.fourier_region

    def layout(self) -> OpticsLayout:
        o = self.section("optics")
        try:
            if "relay" not in o:
                return OpticsLayout.default(o["mode"])
            mats = [OpticalPrescription.from_records(o[k]).matrix() for k in ("relay", "sample_camera", "partner_arm")]
            return OpticsLayout(o["mode"], *mats)
        except InvalidArgumentError as exc:
            raise ConfigError(str(exc), "optics") from None

    def reconstruction_config(self) -> ReconstructionConfig:
        """Coordinate maps from the optics, or the explicit ``[maps]`` values.

        Raises
        ------
        DegenerateImagingPlaneError
            When derived maps are requested and the planes are conjugate.
        """
        m = self.section("maps")
        rec = self.section("reconstruction")
        bound = rec["max_angle_mrad"] * 1e-3
        o = self.section("optics")
        b_min = o["b_min_um"] * 1e-6
        if m["derive_from_optics"]:
            try:
                cfg = self.layout().reconstruction_config(self.geometry(), b_min)
            except InvalidArgumentError as exc:
                raise ConfigError(str(exc), "optics") from None
            return ReconstructionConfig(cfg.mode, cfg.image_map, cfg.fourier_map, cfg.base, cfg.unfolded, cfg.partner_pitch, bound, b_min)
        g = self.geometry()
        mode = o["mode"]
        pos_arm, ang_arm = ("image", "fourier") if mode == "image-plane" else ("fourier", "image")
        regions = {"image": g.image_region, "fourier": g.fourier_region}
        try:
            pos = CoordinateMap(pos_arm, regions[pos_arm].center, m["position_um_per_px"] * 1e-6, tuple(m["position_sign"]))
            ang = CoordinateMap(ang_arm, regions[ang_arm].center, m["angle_mrad_per_px"] * 1e-3, tuple(m["angle_sign"]))
        except InvalidArgumentError as exc:
            raise ConfigError(str(exc), "maps") from None
        maps = {pos.arm: pos, ang.arm: ang}
        return ReconstructionConfig(mode, maps["image"], maps["fourier"], paraxial_bound=bound, b_min=b_min)

    def grid_spec(self, rcfg: ReconstructionConfig) -> GridSpec:
        rec = self.section("reconstruction")
        size = rec["bin_um"] * 1e-6 if rec["bin_um"] > 0 else rcfg.position_map.scale
        return GridSpec.centered(rec["grid_bins"], size)

    def parallax_layout(self) -> ParallaxLayout:
        rec = self.section("reconstruction")
        try:
            return ParallaxLayout(rec["parallax_pitch_px"], rec["parallax_diameter_px"])
        except InvalidArgumentError as exc:
            raise ConfigError(str(exc), "reconstruction.parallax_pitch_px") from None

    def correlation_params(self) -> CorrelationParams:
        c = self.section("centroiding")
        k = self.section("coincidence")
        cal = TimingCalibration()
        if c["calibration_csv"]:
            cal = TimingCalibration.read_csv(os.path.join(self.base_dir, c["calibration_csv"]))
        return CorrelationParams(
            spatial_radius_px=c["spatial_radius_px"],
            temporal_window_ns=c["temporal_window_ns"],
            bin_width_ns=k["bin_width_ns"],
            max_delay_ns=k["max_delay_ns"],
            significance_k=k["significance_k"],
            gate_ns=k["gate_ns"],
            peak_center_ns=k["peak_center_ns"] if k["fixed_peak_center"] else None,
            calibration=cal,
        )

    def sim_spec(self) -> SimSpec:
        s = self.section("simulator")
        g = self.geometry()
        try:
            source = SourceSpec(
                s["pair_rate_hz"],
                s["beam_waist_sigma_mm"] * 1e-3,
                s["theta_sigma_mrad"] * 1e-3,
                s["position_blur_sigma_um"] * 1e-6,
                s["theta_blur_sigma_mrad"] * 1e-3,
            )
            # both regions share the sensor; size the dark rate per region
            dark = dark_rate_for_region(g.image_region.radius, g.pixel_pitch, s["dark_density_hz_per_cm2"])
            detector = DetectorSpec(
                s["quantum_efficiency"],
                dark,
                s["jitter_sigma_ns"],
                s["cluster_sigma_px"],
                s["mean_cluster_hits"],
                s["tot_gain"],
                s["tot_noise_sigma"],
                s["tick_ps"],
                s["latency_ns"],
            )
            scene_params = dict(s["scene"])
            scene = make_scene(scene_params.pop("kind"), **scene_params)
            return SimSpec(source, detector, scene, g, self.layout(), s["duration_s"], s["chunk_s"])
        except InvalidArgumentError as exc:
            raise ConfigError(str(exc), "simulator") from None
