"""Latency modeling and reconstruction benchmarking.

Three complementary views of reconstruction cost:

* an analytic linear model ``cycles(n) = cycles_per_atom * n + fixed_cycles``
  fitted to measured accelerator timings (the bundled reference points are a
  100 MHz implementation measured at 115 us for 100 sites and 1.825 ms for
  1600 sites, which fit to exactly 114 cycles/site + 100 fixed);
* a structural estimate summing per-stage cycle counts from dataflow traces,
  with either no pipeline overlap or a max-stage bottleneck model;
* a wall-clock benchmark harness timing the reconstruction modes over
  in-memory frames, mirroring the mean/std-over-trials experiment shape.
"""

from __future__ import annotations

import json
import os
import platform
import sys
import time
from dataclasses import dataclass, field

import numpy as np

from atomdet import kernels, simulate
from atomdet.errors import DegenerateFit
from atomdet.reconstruct import (
    LaneTrace,
    ReconstructionConfig,
    reconstruct_baseline,
    reconstruct_dataflow,
    reconstruct_optimized,
)

DEFAULT_CLOCK_HZ = 100e6

# reference accelerator timings: (site count, seconds) at 100 MHz
REFERENCE_LATENCY_POINTS = ((100, 115e-6), (1600, 1.825e-3))


@dataclass(frozen=True)
class LatencyModel:
    cycles_per_atom: float
    fixed_cycles: float
    clock_hz: float = DEFAULT_CLOCK_HZ

    def __post_init__(self):
        if self.cycles_per_atom <= 0 or self.clock_hz <= 0:
            raise ValueError("cycles_per_atom and clock_hz must be > 0")
        if self.fixed_cycles < 0:
            raise ValueError("fixed_cycles must be >= 0")

    def to_dict(self) -> dict:
        return {
            "cycles_per_atom": self.cycles_per_atom,
            "fixed_cycles": self.fixed_cycles,
            "clock_hz": self.clock_hz,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "LatencyModel":
        return cls(
            cycles_per_atom=float(data["cycles_per_atom"]),
            fixed_cycles=float(data["fixed_cycles"]),
            clock_hz=float(data["clock_hz"]),
        )


def save_latency_model(path, model: LatencyModel) -> None:
    with open(path, "w") as fh:
        json.dump(model.to_dict(), fh, indent=1)
        fh.write("\n")


def load_latency_model(path) -> LatencyModel:
    with open(path) as fh:
        return LatencyModel.from_dict(json.load(fh))


def fit_latency_model(points, clock_hz: float = DEFAULT_CLOCK_HZ) -> LatencyModel:
    """Least-squares line through (site count, seconds) pairs, in cycle space."""
    pts = [(float(n), float(s)) for n, s in points]
    if len(pts) < 2:
        raise DegenerateFit("need at least two (n_atoms, seconds) points")
    ns = np.array([p[0] for p in pts])
    if np.unique(ns).size < 2:
        raise DegenerateFit("need at least two distinct site counts")
    cycles = np.array([p[1] for p in pts]) * clock_hz
    if len(pts) == 2:
        # two points determine the line exactly; skip the SVD and its rounding
        per_atom = (cycles[1] - cycles[0]) / (ns[1] - ns[0])
        fixed = cycles[0] - per_atom * ns[0]
    else:
        design = np.stack([ns, np.ones_like(ns)], axis=1)
        (per_atom, fixed), *_ = np.linalg.lstsq(design, cycles, rcond=None)
    return LatencyModel(cycles_per_atom=float(per_atom), fixed_cycles=float(fixed),
                        clock_hz=clock_hz)


def reference_latency_model() -> LatencyModel:
    return fit_latency_model(REFERENCE_LATENCY_POINTS, DEFAULT_CLOCK_HZ)


def predict_latency(model: LatencyModel, n_atoms: int) -> float:
    """Predicted reconstruction seconds for an n-site array."""
    if n_atoms < 0:
        raise ValueError("n_atoms must be >= 0")
    return (model.cycles_per_atom * n_atoms + model.fixed_cycles) / model.clock_hz


def structural_cycles(traces: list[LaneTrace], pipeline_overlap: str = "none") -> int:
    """Cycle estimate from per-site stage traces.

    ``none`` sums every stage of every site (no overlap at all); ``full``
    assumes perfect pipelining: the bottleneck stage paces one site per
    bottleneck-interval, plus a one-time fill of the remaining stages.
    """
    if pipeline_overlap not in ("none", "full"):
        raise ValueError("pipeline_overlap must be 'none' or 'full'")
    if not traces:
        return 0
    if pipeline_overlap == "none":
        return int(sum(t.total for t in traces))
    stage_max = [max(t.stages()[i] for t in traces) for i in range(5)]
    bottleneck = max(stage_max)
    fill = sum(stage_max) - bottleneck
    return int(len(traces) * bottleneck + fill)


@dataclass(frozen=True)
class BenchRow:
    size: int          # array is size x size sites
    mode: str
    trials: int
    mean_s: float
    std_s: float
    degenerate_std: bool = False  # trials < 2: std reported as 0


@dataclass(frozen=True)
class BenchReport:
    rows: tuple[BenchRow, ...]
    environment: dict = field(default_factory=dict)

    def to_csv(self, path) -> None:
        with open(path, "w") as fh:
            fh.write("size,mode,trials,mean_us,std_us\n")
            for row in self.rows:
                fh.write(f"{row.size},{row.mode},{row.trials},"
                         f"{row.mean_s * 1e6:.3f},{row.std_s * 1e6:.3f}\n")

    def mean_seconds(self, size: int, mode: str) -> float:
        for row in self.rows:
            if row.size == size and row.mode == mode:
                return row.mean_s
        raise KeyError(f"no bench row for size={size} mode={mode}")


def bench_scene(size: int, seed: int = 7) -> simulate.SceneSpec:
    """Scene sized for a size x size array at the documented simulator defaults."""
    return simulate.default_scene(rows=size, cols=size, seed=seed)


def _mode_runner(mode: str, image, artifact, worker_count: int):
    if mode == "baseline":
        return lambda: reconstruct_baseline(image, artifact)
    if mode == "optimized":
        cfg = ReconstructionConfig(mode="optimized", worker_count=worker_count)
        return lambda: reconstruct_optimized(image, artifact, cfg)
    if mode == "dataflow":
        return lambda: reconstruct_dataflow(image, artifact)
    raise ValueError(f"unknown mode {mode!r}")


def environment_metadata(worker_count: int) -> dict:
    return {
        "python": sys.version.split()[0],
        "platform": platform.platform(),
        "machine": platform.machine(),
        "cpu_count": os.cpu_count(),
        "kernel_backend": kernels.BACKEND,
        "worker_count": worker_count,
    }


def run_bench(modes, sizes, trials: int = 50, worker_count: int | None = None,
              warmup: int = 5, seed: int = 7) -> BenchReport:
    """Wall-clock timing of reconstruction only, over `trials` repeats per point.

    The frame is sampled once per size and held in memory; calibration happens
    before any timer starts. Trials run sequentially to avoid cross-trial
    interference, and `warmup` untimed runs precede the measured ones.
    """
    if trials < 1:
        raise ValueError("trials must be >= 1")
    if worker_count is None:
        worker_count = max(1, os.cpu_count() or 1)
    rows = []
    for size in sizes:
        spec = bench_scene(size, seed=seed)
        artifact = simulate.scene_artifact(spec)
        image, _ = simulate.sample_image(spec, frame_index=0)
        for mode in modes:
            run = _mode_runner(mode, image, artifact, worker_count)
            for _ in range(warmup):
                run()
            times = np.empty(trials)
            for t in range(trials):
                start = time.perf_counter()
                run()
                times[t] = time.perf_counter() - start
            degenerate = trials < 2
            std = 0.0 if degenerate else float(np.std(times, ddof=1))
            rows.append(BenchRow(size=size, mode=mode, trials=trials,
                                 mean_s=float(times.mean()), std_s=std,
                                 degenerate_std=degenerate))
    return BenchReport(rows=tuple(rows), environment=environment_metadata(worker_count))
