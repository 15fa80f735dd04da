"""Per-frame reconstruction: emission matrix and occupancy from one image.

Three modes with different fidelity/performance trade-offs:

* ``baseline`` - global least squares over the union of all site windows,
  with one column per site plus a constant background column. Serial; handles
  overlapping PSFs exactly; the reference the fast paths are checked against.
* ``optimized`` - per-site multiply-reduce against the calibrated projector,
  embarrassingly parallel across sites. Output is identical for any worker
  count because each site is computed independently and written exactly once.
* ``dataflow`` - bit-deterministic emulation of a lane-structured accelerator:
  float32 arithmetic throughout, one lane per kernel row, fixed log2-depth
  adder trees, and the projector matrix sum recomputed per site the same way.
  Also returns per-site cycle traces for the structural latency model.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.linalg import lsqr

from atomdet import core, kernels
from atomdet.core import CalibrationArtifact, EmissionMatrix, Image, OccupancyMatrix
from atomdet.errors import SingularDesign, ZeroMatrixSum

_MODES = ("baseline", "optimized", "dataflow")
_CHANNELS = ("raw", "normalized")

# dense design matrices beyond this many entries switch to the sparse solver
_DENSE_LIMIT = 30_000_000

_BUS_BITS = 512   # memory interface width
_WORD_BITS = 32   # per-sample precision after decode


@dataclass(frozen=True)
class ReconstructionConfig:
    mode: str = "optimized"
    subtract_background: bool = True
    emission_channel: str = "normalized"
    worker_count: int = 1

    def __post_init__(self):
        if self.mode not in _MODES:
            raise ValueError(f"mode must be one of {_MODES}, got {self.mode!r}")
        if self.emission_channel not in _CHANNELS:
            raise ValueError(f"emission_channel must be one of {_CHANNELS}")
        if self.worker_count < 1:
            raise ValueError("worker_count must be >= 1")


@dataclass(frozen=True)
class LaneTrace:
    """Per-site cycle counts for each pipeline stage of the dataflow emulation."""

    row: int
    col: int
    fetch: int       # ceil(k*k*32 / 512) bus beats
    decode: int      # modeled as one cycle
    row_mac: int     # k elements per lane
    tree_reduce: int  # ceil(log2 k) adder-tree levels
    aggregate: int

    @property
    def total(self) -> int:
        return self.fetch + self.decode + self.row_mac + self.tree_reduce + self.aggregate

    def stages(self) -> tuple[int, int, int, int, int]:
        return (self.fetch, self.decode, self.row_mac, self.tree_reduce, self.aggregate)


def fetch_beats(k: int) -> int:
    """Bus beats to move one k x k window of 32-bit words over a 512-bit bus."""
    return math.ceil(k * k * _WORD_BITS / _BUS_BITS)


def _normalized(raw: np.ndarray, matrix_sums: np.ndarray) -> np.ndarray:
    return np.divide(raw, matrix_sums, out=np.zeros_like(raw), where=matrix_sums != 0)


def _site_psfs(artifact: CalibrationArtifact) -> np.ndarray:
    """(1|n, k, k) forward kernels recovered from the projectors.

    Exact for isolated-site projectors, where proj = psf / sum(psf**2) and the
    cached energy is that denominator.
    """
    energies = np.array([p.energy for p in artifact.projectors])
    return artifact.weights_stack * energies[:, None, None]


def reconstruct_baseline(image: Image, artifact: CalibrationArtifact) -> EmissionMatrix:
    """Global least squares over the union pixel support (serial reference).

    Solves min ||A gamma - d|| with one PSF column per site plus a constant
    column for the background; raw emissions are the fitted gammas and the
    fitted background is reported on the result.
    """
    grid = artifact.grid
    k = artifact.kernel_size
    n = grid.site_count
    corners = core.roi_corners(grid, k, image.width, image.height)
    psfs = _site_psfs(artifact)
    shared = artifact.shared_projector

    h, w = image.height, image.width
    mask = np.zeros((h, w), dtype=bool)
    for y0, x0 in corners:
        mask[y0:y0 + k, x0:x0 + k] = True
    support = np.flatnonzero(mask.ravel())
    m = support.size
    pos = np.full(h * w, -1, dtype=np.int64)
    pos[support] = np.arange(m)
    d = image.pixels.ravel()[support]

    dy, dx = np.meshgrid(np.arange(k), np.arange(k), indexing="ij")
    win_flat = (corners[:, 0:1] + dy.ravel()[None, :]) * w + (corners[:, 1:2] + dx.ravel()[None, :])
    rows_in_d = pos[win_flat]  # (n, k*k), all >= 0 by construction

    if m * (n + 1) <= _DENSE_LIMIT:
        design = np.zeros((m, n + 1))
        for i in range(n):
            design[rows_in_d[i], i] = psfs[0 if shared else i].ravel()
        design[:, n] = 1.0
        sol, _, rank, _ = np.linalg.lstsq(design, d, rcond=None)
        if rank < n + 1:
            raise SingularDesign(f"design matrix rank {rank} < {n + 1} columns")
    else:
        if shared:
            vals = np.tile(psfs[0].ravel(), n)
        else:
            vals = psfs.reshape(n, -1).ravel()
        rows = np.concatenate([rows_in_d.ravel(), np.arange(m)])
        cols = np.concatenate([np.repeat(np.arange(n), k * k), np.full(m, n)])
        vals = np.concatenate([vals, np.ones(m)])
        design = coo_matrix((vals, (rows, cols)), shape=(m, n + 1)).tocsr()
        col_energy = np.asarray(design.multiply(design).sum(axis=0)).ravel()
        if np.any(col_energy == 0):
            raise SingularDesign("design matrix has an all-zero column")
        sol = lsqr(design, d, atol=1e-10, btol=1e-10, iter_lim=10 * (n + 1))[0]

    raw = sol[:n]
    fitted_b = float(sol[n])
    normalized = _normalized(raw, artifact.site_matrix_sums())
    return EmissionMatrix(
        raw.reshape(grid.rows, grid.cols),
        normalized.reshape(grid.rows, grid.cols),
        fitted_background=fitted_b,
    )


def _chunk_bounds(n: int, parts: int) -> list[tuple[int, int]]:
    edges = np.linspace(0, n, parts + 1).astype(int)
    return [(int(edges[i]), int(edges[i + 1])) for i in range(parts) if edges[i + 1] > edges[i]]


def reconstruct_optimized(image: Image, artifact: CalibrationArtifact,
                          cfg: ReconstructionConfig | None = None) -> EmissionMatrix:
    """Per-site projector multiply-reduce, distributed over a worker pool.

    Each worker owns a disjoint slice of the preallocated output, so the
    result is bit-identical for every worker count.
    """
    if cfg is None:
        cfg = ReconstructionConfig(mode="optimized")
    grid = artifact.grid
    n = grid.site_count
    corners = core.roi_corners(grid, artifact.kernel_size, image.width, image.height)
    raw_flat = np.empty(n)
    args = (image.pixels, corners, artifact.weights_stack,
            artifact.background, cfg.subtract_background, raw_flat)
    if cfg.worker_count <= 1 or n == 1:
        kernels.emissions_raw(*args, 0, n)
    else:
        with ThreadPoolExecutor(max_workers=cfg.worker_count) as pool:
            futures = [pool.submit(kernels.emissions_raw, *args, lo, hi)
                       for lo, hi in _chunk_bounds(n, cfg.worker_count)]
            for fut in futures:
                fut.result()
    normalized = _normalized(raw_flat, artifact.site_matrix_sums())
    return EmissionMatrix(raw_flat.reshape(grid.rows, grid.cols),
                          normalized.reshape(grid.rows, grid.cols))


def reconstruct_dataflow(image: Image, artifact: CalibrationArtifact
                         ) -> tuple[EmissionMatrix, list[LaneTrace]]:
    """Bit-deterministic float32 emulation of the accelerator pipeline.

    Single-threaded by contract: determinism forbids scheduling effects on
    arithmetic order; the hardware's parallelism is emulated, not scheduled.
    """
    grid = artifact.grid
    k = artifact.kernel_size
    n = grid.site_count
    corners = core.roi_corners(grid, k, image.width, image.height)
    product = np.empty(n, dtype=np.float32)
    matrix = np.empty(n, dtype=np.float32)
    kernels.dataflow_emissions(image.pixels, corners, artifact.weights_stack, product, matrix)
    if np.any(matrix == 0.0):
        bad = int(np.flatnonzero(matrix == 0.0)[0])
        raise ZeroMatrixSum(f"site ({bad // grid.cols}, {bad % grid.cols}) has zero matrix sum")
    normalized32 = product / matrix  # float32 division, as aggregated on-chip

    beats = fetch_beats(k)
    levels = kernels.tree_levels(k)
    traces = [
        LaneTrace(row=i // grid.cols, col=i % grid.cols, fetch=beats, decode=1,
                  row_mac=k, tree_reduce=levels, aggregate=1)
        for i in range(n)
    ]
    em = EmissionMatrix(
        product.astype(np.float64).reshape(grid.rows, grid.cols),
        normalized32.astype(np.float64).reshape(grid.rows, grid.cols),
    )
    return em, traces


def threshold(emissions: EmissionMatrix, artifact: CalibrationArtifact) -> OccupancyMatrix:
    """Strictly-greater comparison on the artifact's configured channel; ties are unoccupied."""
    values = emissions.channel(artifact.threshold_channel)
    return OccupancyMatrix(values > artifact.threshold)


def reconstruct_frame(image: Image, artifact: CalibrationArtifact,
                      cfg: ReconstructionConfig
                      ) -> tuple[EmissionMatrix, list[LaneTrace] | None]:
    if cfg.mode == "baseline":
        return reconstruct_baseline(image, artifact), None
    if cfg.mode == "optimized":
        return reconstruct_optimized(image, artifact, cfg), None
    em, traces = reconstruct_dataflow(image, artifact)
    return em, traces
