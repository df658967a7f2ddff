"""Command-line entry point.

Exit codes: 0 success, 2 invalid configuration or arguments, 3 input or
output failure (unreadable, unwritable or malformed files), 4 no coincidence
peak found (the histogram is still written), 5 degenerate imaging plane
(the offending matrix is printed).

Every command writes ``report.json`` and ``report.txt`` into ``--out``.
Both are byte-identical across reruns with the same inputs and seed;
wall-clock times go to a separate ``timing.json``.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time

import numpy as np

from pairtrace import __version__
from pairtrace.coincidence import PairTable
from pairtrace.config import COMMAND_SECTIONS, PipelineConfig
from pairtrace.depthmap import (
    all_in_focus,
    depth_from_focus,
    depth_histogram,
    histogram_modes,
    segment,
    sharpness_volume,
    write_depthmap,
)
from pairtrace.errors import (
    ConfigError,
    DegenerateImagingPlaneError,
    HitValidationError,
    InvalidArgumentError,
    NoCorrelationFoundError,
    ParseError,
)
from pairtrace.events import read_hits, write_hits
from pairtrace.pipeline import correlate
from pairtrace.reconstruction import focal_stack, form_image, pairs_to_rays, parallax_grid, write_pgm, write_stack
from pairtrace.simulate import simulate

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_NO_PEAK, EXIT_DEGENERATE = 0, 2, 3, 4, 5


class Timer:
    def __init__(self):
        self.stages: dict[str, float] = {}

    def stage(self, name: str):
        timer = self

        class _Ctx:
            def __enter__(self):
                self.t0 = time.perf_counter()

            def __exit__(self, *exc):
                timer.stages[name] = timer.stages.get(name, 0.0) + time.perf_counter() - self.t0

        return _Ctx()


# ---------------------------------------------------------------------------
# reports


def _plain(obj):
    """JSON-ready copy with numpy scalars turned into Python numbers."""
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return [_plain(v) for v in obj.tolist()]
    return obj


def render_text(report: dict) -> str:
    """Human-readable form of a report."""
    lines = [f"pairtrace {report.get('version', '?')} {report.get('command', '?')}"]
    for key in ("seed", "config_hash", "status"):
        if key in report:
            lines.append(f"  {key}: {report[key]}")

    def emit(title, value, indent=2):
        pad = " " * indent
        if isinstance(value, dict):
            lines.append(f"{pad}{title}:")
            for k in value:
                emit(k, value[k], indent + 2)
        elif isinstance(value, float):
            lines.append(f"{pad}{title}: {value:.6g}")
        else:
            lines.append(f"{pad}{title}: {value}")

    for key in report:
        if key not in ("version", "command", "seed", "config_hash", "status"):
            emit(key, report[key])
    return "\n".join(lines) + "\n"


def _write_reports(out: str, report: dict, timer: Timer) -> None:
    report = _plain(report)
    with open(os.path.join(out, "report.json"), "w", encoding="utf-8") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
        fh.write("\n")
    with open(os.path.join(out, "report.txt"), "w", encoding="utf-8") as fh:
        fh.write(render_text(report))
    timing = {name: round(sec, 6) for name, sec in timer.stages.items()}
    with open(os.path.join(out, "timing.json"), "w", encoding="utf-8") as fh:
        json.dump({"command": report.get("command"), "wall_clock_s": timing}, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _base_report(command: str, args, cfg: PipelineConfig) -> dict:
    return {"command": command, "version": __version__, "seed": args.seed, "config_hash": cfg.config_hash}


def _hit_format(path: str) -> str:
    return "csv" if path.lower().endswith(".csv") else "binary"


# ---------------------------------------------------------------------------
# commands


def cmd_simulate(args, cfg: PipelineConfig, timer: Timer) -> int:
    cfg.require(*COMMAND_SECTIONS["simulate"])
    spec = cfg.sim_spec()
    with timer.stage("simulate"):
        res = simulate(spec, args.seed, args.threads)
    g = spec.geometry
    with timer.stage("write"):
        write_hits(res.hits_image, os.path.join(args.out, "hits_image.bin"), "binary", g.width, g.height)
        write_hits(res.hits_fourier, os.path.join(args.out, "hits_fourier.bin"), "binary", g.width, g.height)
        res.truth.write_csv(os.path.join(args.out, "truth.csv"))
    report = _base_report("simulate", args, cfg)
    report["counters"] = res.counters()
    report["duration_s"] = spec.duration_s
    report["expected_pairs"] = spec.source.pair_rate * spec.duration_s
    _write_reports(args.out, report, timer)
    print(render_text(report), end="")
    return EXIT_OK


def cmd_correlate(args, cfg: PipelineConfig, timer: Timer) -> int:
    cfg.require(*COMMAND_SECTIONS["correlate"])
    g = cfg.geometry()
    params = cfg.correlation_params()
    with timer.stage("read"):
        hits_a = read_hits(args.hits_image, _hit_format(args.hits_image), g.width, g.height)
        hits_b = read_hits(args.hits_fourier, _hit_format(args.hits_fourier), g.width, g.height)
    report = _base_report("correlate", args, cfg)
    hist_path = os.path.join(args.out, "histogram.csv")
    try:
        with timer.stage("correlate"):
            res = correlate(hits_a, hits_b, g.image_region, g.fourier_region, params, threads=args.threads)
    except NoCorrelationFoundError as exc:
        if exc.histogram is not None:
            exc.histogram.write_csv(hist_path)
        report["status"] = "no-correlation"
        report["error"] = str(exc)
        _write_reports(args.out, report, timer)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NO_PEAK
    with timer.stage("write"):
        res.histogram.write_csv(hist_path)
        res.pairing.pairs.write_csv(os.path.join(args.out, "pairs.csv"))
    report["counters"] = res.counters
    if res.peak is not None:
        p = res.peak
        report["peak"] = {
            "center_ns": p.center_ns,
            "height": p.height,
            "background_mean": p.background_mean,
            "significance": p.significance,
            "fwhm_ns": p.fwhm_ns,
        }
    report["gate"] = {"gate_ns": res.gate.gate_ns, "peak_center_ns": res.gate.peak_center_ns}
    if res.accidentals is not None:
        a = res.accidentals
        report["accidentals"] = {"accidental_rate_hz": a.accidental_rate_hz, "true_rate_hz": a.true_rate_hz, "snr": a.snr}
    report["duration_s"] = res.duration_s
    _write_reports(args.out, report, timer)
    print(render_text(report), end="")
    return EXIT_OK


def _rays(args, cfg: PipelineConfig, timer: Timer):
    rcfg = cfg.reconstruction_config()
    with timer.stage("read"):
        pairs = PairTable.read_csv(args.pairs)
    rec = cfg.section("reconstruction")
    with timer.stage("rays"):
        rays, ray_report = pairs_to_rays(pairs, rcfg, rec["dither_px"], args.seed)
    counters = {"pairs_read": ray_report.pairs_in, "rays": ray_report.rays_out, "rays_dropped_nonparaxial": ray_report.dropped_nonparaxial}
    return rcfg, rays, counters


def cmd_reconstruct(args, cfg: PipelineConfig, timer: Timer) -> int:
    need = "depthmap" if args.mode == "depthmap" else "reconstruct"
    cfg.require(*COMMAND_SECTIONS[need])
    rcfg, rays, counters = _rays(args, cfg, timer)
    rec = cfg.section("reconstruction")
    spec = cfg.grid_spec(rcfg)
    report = _base_report(f"reconstruct {args.mode}", args, cfg)
    report["counters"] = counters
    report["grid"] = {"nx": spec.nx, "ny": spec.ny, "bin_um": spec.dx * 1e6}

    if args.mode == "refocus":
        z = rec["z_mm"] * 1e-3
        with timer.stage("refocus"):
            img = form_image(rays, spec, z, rcfg.base, rec["bilinear"], args.threads)
        write_pgm(img, os.path.join(args.out, "refocus.pgm"))
        report["z_mm"] = rec["z_mm"]
        counters.update({"binned_weight": img.total, "overflow_rays": img.overflow_rays})
    elif args.mode == "parallax":
        center = rcfg.angle_map.center
        radius = cfg.geometry().fourier_region.radius if rcfg.angle_map.arm == "fourier" else cfg.geometry().image_region.radius
        with timer.stage("parallax"):
            views = parallax_grid(rays, cfg.parallax_layout(), center, spec, radius, rec["z_mm"] * 1e-3)
        for k, v in enumerate(views):
            write_pgm(v, os.path.join(args.out, f"view_{k}.pgm"))
        report["views"] = {str(k): {"binned_weight": v.total, "overflow_rays": v.overflow_rays} for k, v in enumerate(views)}
        report["z_mm"] = rec["z_mm"]
    else:
        with timer.stage("stack"):
            stack = focal_stack(rays, spec, rec["z_min_mm"] * 1e-3, rec["z_max_mm"] * 1e-3, rec["z_step_mm"] * 1e-3, rcfg.base, args.threads)
        report["stack"] = {"slices": len(stack), "z_min_mm": float(stack.z[0] * 1e3), "z_max_mm": float(stack.z[-1] * 1e3)}
        counters["overflow_rays_max"] = int(stack.overflow_rays.max()) if len(stack) else 0
        if args.mode == "stack":
            write_stack(stack, os.path.join(args.out, "stack"))
        else:
            d = cfg.section("depthmap")
            with timer.stage("depthmap"):
                vol = sharpness_volume(stack, d["sum_window_px"], d["poisson_debias"])
                dm = depth_from_focus(vol, stack.z * 1e3, d["stencil"])
                aif = all_in_focus(stack, dm)
                mask = segment(aif, d["threshold_window_px"], d["threshold_offset_std"])
                dm = dm.with_mask(mask)
                hist = depth_histogram(dm, d["histogram_bin_mm"] or None)
            write_depthmap(dm, args.out)
            write_pgm(aif, os.path.join(args.out, "all_in_focus.pgm"))
            hist.write_csv(os.path.join(args.out, "depth_histogram.csv"))
            report["depthmap"] = {
                "defined_pixels": int(dm.defined.sum()),
                "foreground_pixels": int(mask.sum()),
                "histogram_modes_mm": histogram_modes(hist, d["histogram_modes"]).tolist(),
            }
    _write_reports(args.out, report, timer)
    print(render_text(report), end="")
    return EXIT_OK


def cmd_report(args) -> int:
    path = args.path
    if os.path.isdir(path):
        path = os.path.join(path, "report.json")
    with open(path, encoding="utf-8") as fh:
        report = json.load(fh)
    print(render_text(report), end="")
    timing = os.path.join(os.path.dirname(path), "timing.json")
    if os.path.exists(timing):
        with open(timing, encoding="utf-8") as fh:
            t = json.load(fh)
        print("  wall_clock_s:")
        for name, sec in t.get("wall_clock_s", {}).items():
            print(f"    {name}: {sec:.3f}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing


def _common() -> argparse.ArgumentParser:
    # SUPPRESS keeps a flag given before the command from being reset after it
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", default=argparse.SUPPRESS, help="pipeline TOML file (default: packaged defaults)")
    p.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="seed for all randomness (default 0)")
    p.add_argument("--out", default=argparse.SUPPRESS, help="output directory (default .)")
    p.add_argument("--threads", type=int, default=argparse.SUPPRESS, help="worker threads (default 1)")
    p.add_argument(
        "--set",
        dest="overrides",
        action="append",
        default=argparse.SUPPRESS,
        metavar="SECTION.KEY=VALUE",
        help="override one config value (repeatable)",
    )
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    parser = argparse.ArgumentParser(
        prog="pairtrace",
        description="Simulate, correlate and reconstruct time-tagged photon-pair data.",
        parents=[common],
    )
    parser.add_argument("--version", action="version", version=f"pairtrace {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", parents=[common], help="generate hit files and truth labels")
    p.add_argument("--duration-s", type=float, help="override simulator.duration_s")

    p = sub.add_parser("correlate", parents=[common], help="cluster, histogram and gate two hit files")
    p.add_argument("hits_image", help="image-region hit file (.bin or .csv)")
    p.add_argument("hits_fourier", help="Fourier-region hit file (.bin or .csv)")
    p.add_argument("--gate-ns", type=float, help="override coincidence.gate_ns")

    p = sub.add_parser("reconstruct", parents=[common], help="form images from a pair file")
    p.add_argument("mode", choices=("refocus", "stack", "parallax", "depthmap"))
    p.add_argument("pairs", help="pair CSV written by correlate")
    p.add_argument("--z-mm", type=float, help="override reconstruction.z_mm")

    p = sub.add_parser("report", parents=[common], help="print a report in human-readable form")
    p.add_argument("path", help="report.json or the directory holding it")
    return parser


def _load_config(args) -> PipelineConfig:
    cfg = PipelineConfig.load(args.config)
    overrides = list(args.overrides)
    flag_keys = {"duration_s": "simulator.duration_s", "gate_ns": "coincidence.gate_ns", "z_mm": "reconstruction.z_mm"}
    for attr, key in flag_keys.items():
        value = getattr(args, attr, None)
        if value is not None:
            overrides.append(f"{key}={value!r}")
    return cfg.with_overrides(overrides) if overrides else cfg


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    for name, default in (("config", None), ("seed", 0), ("out", "."), ("threads", 1), ("overrides", [])):
        if not hasattr(args, name):
            setattr(args, name, default)
    if args.threads < 1:
        parser.error("--threads must be at least 1")
    if args.command == "report":
        try:
            return cmd_report(args)
        except (OSError, ValueError) as exc:
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_IO

    timer = Timer()
    try:
        cfg = _load_config(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"error: cannot read config: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        os.makedirs(args.out, exist_ok=True)
        if args.command == "simulate":
            return cmd_simulate(args, cfg, timer)
        if args.command == "correlate":
            return cmd_correlate(args, cfg, timer)
        return cmd_reconstruct(args, cfg, timer)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DegenerateImagingPlaneError as exc:
        print(f"error: {exc}", file=sys.stderr)
        print(f"matrix:\n{exc.matrix}", file=sys.stderr)
        return EXIT_DEGENERATE
    except (ParseError, HitValidationError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except InvalidArgumentError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
