"""Compiled vs NumPy kernel timings on simulated data.

Usage::

    python benchmarks/bench_kernels.py --duration-s 5 --repeat 3
"""

import argparse
import time

import numpy as np

from pairtrace import kernels
from pairtrace.coincidence import GateConfig, delay_histogram, extract_pairs
from pairtrace.pipeline import region_events
from pairtrace.reconstruction import GridSpec, SampleRays, focal_stack
from pairtrace.simulate import DetectorSpec, SimSpec, simulate


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        times.append(time.perf_counter() - t0)
    return min(times), out


def run(backend, hits, geometry, rays, grid, repeat):
    with kernels.using(backend):
        rows = {}
        rows["cluster + centroid"], (a, b) = best_of(
            lambda: (region_events(hits[0], geometry.image_region), region_events(hits[1], geometry.fourier_region)), repeat
        )
        rows["delay histogram"], _ = best_of(lambda: delay_histogram(a.events, b.events, 500.0, 1.0), repeat)
        rows["pair extraction"], _ = best_of(lambda: extract_pairs(a.events, b.events, GateConfig(20.0, 0.0)), repeat)
        rows["focal stack (41)"], _ = best_of(lambda: focal_stack(rays, grid, -20e-3, 20e-3, 1e-3), repeat)
    return rows


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--duration-s", type=float, default=5.0, help="simulated acquisition length")
    p.add_argument("--repeat", type=int, default=3, help="best-of repetitions per stage")
    p.add_argument("--rays", type=int, default=1_000_000, help="rays binned per focal-stack slice")
    args = p.parse_args(argv)

    spec = SimSpec(detector=DetectorSpec(), duration_s=args.duration_s)
    sim = simulate(spec, 1)
    hits = (sim.hits_image, sim.hits_fourier)
    rng = np.random.default_rng(0)
    rays = SampleRays.from_arrays(rng.normal(0, 3e-4, (args.rays, 2)), rng.normal(0, 0.01, (args.rays, 2)))
    grid = GridSpec.centered(128, 1.1e-5)
    n_hits = len(hits[0]) + len(hits[1])
    print(f"{n_hits} hits, {args.rays} rays, best of {args.repeat}")

    backends = kernels.available_backends()
    results = {name: run(name, hits, spec.geometry, rays, grid, args.repeat) for name in backends}
    header = f"{'stage':<20}" + "".join(f"{name + ' (s)':>14}" for name in backends)
    if "cython" in results:
        header += f"{'speedup':>10}"
    print(header)
    for stage in results[backends[0]]:
        line = f"{stage:<20}" + "".join(f"{results[name][stage]:>14.4f}" for name in backends)
        if "cython" in results:
            line += f"{results['python'][stage] / results['cython'][stage]:>9.1f}x"
        print(line)


if __name__ == "__main__":
    main()
