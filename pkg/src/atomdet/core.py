"""Domain types for atom-array fluorescence readout.

All types are immutable after construction and validate their invariants in
``__post_init__``; arrays are coerced to float64 and marked read-only so they
can be shared freely across worker threads.

Coordinate conventions
----------------------
* Pixel arrays are indexed ``pixels[y, x]`` (row-major); positions and ROI
  corners are expressed as ``(x, y)`` / ``(y0, x0)`` as noted per field.
* Site indices are ``(r, c)`` with flat ordering ``r * cols + c``.
* Sub-pixel site centers map to integer ROI corners via round-half-away-from-
  zero, fixed for reproducibility across platforms.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from atomdet.errors import ConfigError, WindowOutOfBounds

FORMAT_VERSION = 1

_PROJECTOR_MAGIC = b"ATPJ"
_PROJECTOR_HEADER = struct.Struct("<4sHH")  # magic, kernel size k, projector count


def round_half_away(x: float) -> int:
    """Round to nearest integer, halves away from zero (not banker's rounding)."""
    if x >= 0:
        return int(math.floor(x + 0.5))
    return -int(math.floor(-x + 0.5))


def _round_half_away_arr(x: np.ndarray) -> np.ndarray:
    return (np.sign(x) * np.floor(np.abs(x) + 0.5)).astype(np.int64)


def _readonly(arr: np.ndarray, dtype=np.float64) -> np.ndarray:
    out = np.array(arr, dtype=dtype, copy=True)
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class Image:
    """A camera frame: 2-D grid of non-negative photoelectron counts.

    ``bit_depth`` records the source quantization (16 for camera frames,
    ``None`` for unquantized synthetic float frames).
    """

    pixels: np.ndarray
    bit_depth: int | None = None

    def __post_init__(self):
        px = _readonly(self.pixels)
        if px.ndim != 2 or px.size == 0:
            raise ValueError("pixels must be a non-empty 2-D array")
        if not np.all(np.isfinite(px)):
            raise ValueError("pixel values must be finite")
        if px.min() < 0:
            raise ValueError("pixel values must be >= 0")
        object.__setattr__(self, "pixels", px)

    @classmethod
    def from_flat(cls, width: int, height: int, values, bit_depth: int | None = None) -> "Image":
        flat = np.asarray(values, dtype=np.float64)
        if flat.size != width * height:
            raise ValueError(f"expected {width * height} pixel values, got {flat.size}")
        return cls(flat.reshape(height, width), bit_depth)

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]


def _check_kernel_shape(weights: np.ndarray, what: str):
    if weights.ndim != 2 or weights.shape[0] != weights.shape[1]:
        raise ValueError(f"{what} weights must be square")
    k = weights.shape[0]
    if k < 3 or k % 2 == 0:
        raise ValueError(f"{what} size must be odd and >= 3, got {k}")
    if not np.all(np.isfinite(weights)):
        raise ValueError(f"{what} weights must be finite")


@dataclass(frozen=True)
class PsfKernel:
    """Per-site k x k response to a unit-brightness emitter (k odd, default 31)."""

    weights: np.ndarray

    def __post_init__(self):
        w = _readonly(self.weights)
        _check_kernel_shape(w, "PSF")
        if w.min() < 0:
            raise ValueError("PSF weights must be >= 0")
        if w.sum() <= 0:
            raise ValueError("PSF weights must have positive sum")
        object.__setattr__(self, "weights", w)

    @property
    def size(self) -> int:
        return self.weights.shape[0]

    @property
    def is_normalized(self) -> bool:
        return abs(float(self.weights.sum()) - 1.0) <= 1e-9

    def normalized(self) -> "PsfKernel":
        return PsfKernel(self.weights / self.weights.sum())


@dataclass(frozen=True)
class Projector:
    """Reconstruction kernel paired with its cached sums.

    ``matrix_sum`` is the sum of the projector weights (the normalization
    denominator); ``energy`` is the sum of squared weights of the source PSF,
    kept so the forward kernel can be recovered as ``weights * energy`` for
    isolated-site projectors.
    """

    weights: np.ndarray
    matrix_sum: float
    energy: float

    def __post_init__(self):
        w = _readonly(self.weights)
        _check_kernel_shape(w, "projector")
        s = float(w.sum())
        tol = 1e-9 * max(1.0, abs(s))
        if abs(s - self.matrix_sum) > tol:
            raise ValueError(f"matrix_sum {self.matrix_sum} inconsistent with weights sum {s}")
        if not math.isfinite(self.energy) or self.energy < 0:
            raise ValueError("energy must be finite and >= 0")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "matrix_sum", s)
        object.__setattr__(self, "energy", float(self.energy))

    @property
    def size(self) -> int:
        return self.weights.shape[0]


@dataclass(frozen=True)
class AtomGrid:
    """Fitted lattice geometry: rows x cols sites on a square lattice.

    ``site_position(r, c) = origin + R(angle) @ (c * pitch, r * pitch)`` with
    the usual counter-clockwise rotation matrix; ``angle`` is restricted to
    (-pi/4, pi/4] so row/column assignment is unambiguous.
    """

    rows: int
    cols: int
    origin: tuple[float, float]
    pitch: float
    angle: float = 0.0

    def __post_init__(self):
        if self.rows < 1 or self.cols < 1:
            raise ValueError("rows and cols must be >= 1")
        if not self.pitch > 0:
            raise ValueError("pitch must be > 0")
        if not (-math.pi / 4 < self.angle <= math.pi / 4):
            raise ValueError("angle must lie in (-pi/4, pi/4]")
        ox, oy = self.origin
        object.__setattr__(self, "origin", (float(ox), float(oy)))
        object.__setattr__(self, "pitch", float(self.pitch))
        object.__setattr__(self, "angle", float(self.angle))

    @property
    def site_count(self) -> int:
        return self.rows * self.cols

    def site_position(self, r: int, c: int) -> tuple[float, float]:
        """Sub-pixel (x, y) center of site (r, c)."""
        if not (0 <= r < self.rows and 0 <= c < self.cols):
            raise IndexError(f"site ({r}, {c}) outside {self.rows}x{self.cols} grid")
        cos_a = math.cos(self.angle)
        sin_a = math.sin(self.angle)
        dx, dy = c * self.pitch, r * self.pitch
        return (self.origin[0] + cos_a * dx - sin_a * dy,
                self.origin[1] + sin_a * dx + cos_a * dy)

    def site_positions(self) -> np.ndarray:
        """(rows*cols, 2) array of (x, y) centers in flat site order."""
        rr, cc = np.meshgrid(np.arange(self.rows), np.arange(self.cols), indexing="ij")
        dx = cc.ravel() * self.pitch
        dy = rr.ravel() * self.pitch
        cos_a, sin_a = math.cos(self.angle), math.sin(self.angle)
        return np.stack([self.origin[0] + cos_a * dx - sin_a * dy,
                         self.origin[1] + sin_a * dx + cos_a * dy], axis=1)


@dataclass(frozen=True)
class Roi:
    """k x k window for one site; (x0, y0) is the top-left pixel, fully inside the image."""

    row: int
    col: int
    x0: int
    y0: int
    size: int


def roi_corners(grid: AtomGrid, k: int, width: int, height: int) -> np.ndarray:
    """(n, 2) int64 array of (y0, x0) window corners for every site, flat order.

    Raises WindowOutOfBounds when any window exits the image; windows are a
    hard error, never clamped, because silent truncation corrupts emissions.
    """
    if k % 2 == 0 or k < 3:
        raise ValueError("kernel size must be odd and >= 3")
    half = (k - 1) // 2
    pos = grid.site_positions()
    cx = _round_half_away_arr(pos[:, 0])
    cy = _round_half_away_arr(pos[:, 1])
    x0 = cx - half
    y0 = cy - half
    bad = (x0 < 0) | (y0 < 0) | (x0 + k > width) | (y0 + k > height)
    if np.any(bad):
        i = int(np.flatnonzero(bad)[0])
        r, c = divmod(i, grid.cols)
        raise WindowOutOfBounds(
            f"site ({r}, {c}) at ({pos[i, 0]:.2f}, {pos[i, 1]:.2f}) needs window "
            f"[{x0[i]}:{x0[i] + k}, {y0[i]}:{y0[i] + k}] outside {width}x{height} image"
        )
    return np.stack([y0, x0], axis=1)


def extract_roi(grid: AtomGrid, image: Image, r: int, c: int, k: int) -> Roi:
    """ROI centered at the rounded site position; WindowOutOfBounds if it exits the image."""
    if k % 2 == 0 or k < 3:
        raise ValueError("kernel size must be odd and >= 3")
    half = (k - 1) // 2
    x, y = grid.site_position(r, c)
    x0 = round_half_away(x) - half
    y0 = round_half_away(y) - half
    if x0 < 0 or y0 < 0 or x0 + k > image.width or y0 + k > image.height:
        raise WindowOutOfBounds(
            f"site ({r}, {c}) at ({x:.2f}, {y:.2f}) needs window "
            f"[{x0}:{x0 + k}, {y0}:{y0 + k}] outside {image.width}x{image.height} image"
        )
    return Roi(row=r, col=c, x0=x0, y0=y0, size=k)


def roi_pixels(image: Image, roi: Roi) -> np.ndarray:
    return image.pixels[roi.y0:roi.y0 + roi.size, roi.x0:roi.x0 + roi.size]


@dataclass(frozen=True)
class EmissionMatrix:
    """Per-site reconstructed brightness: raw product sums and normalized values.

    ``fitted_background`` is populated only by the global least-squares mode,
    which solves for the background level jointly with the emissions.
    """

    raw: np.ndarray
    normalized: np.ndarray
    fitted_background: float | None = None

    def __post_init__(self):
        raw = _readonly(self.raw)
        norm = _readonly(self.normalized)
        if raw.ndim != 2 or raw.shape != norm.shape:
            raise ValueError("raw and normalized must be 2-D arrays of equal shape")
        object.__setattr__(self, "raw", raw)
        object.__setattr__(self, "normalized", norm)

    @property
    def rows(self) -> int:
        return self.raw.shape[0]

    @property
    def cols(self) -> int:
        return self.raw.shape[1]

    def channel(self, name: str) -> np.ndarray:
        if name == "raw":
            return self.raw
        if name == "normalized":
            return self.normalized
        raise ValueError(f"unknown emission channel {name!r}")


@dataclass(frozen=True)
class OccupancyMatrix:
    """Thresholded boolean occupancy, same shape as its emission matrix."""

    occupied: np.ndarray

    def __post_init__(self):
        occ = np.array(self.occupied, dtype=bool, copy=True)
        if occ.ndim != 2:
            raise ValueError("occupied must be a 2-D boolean array")
        occ.setflags(write=False)
        object.__setattr__(self, "occupied", occ)

    @property
    def rows(self) -> int:
        return self.occupied.shape[0]

    @property
    def cols(self) -> int:
        return self.occupied.shape[1]


@dataclass(frozen=True)
class CalibrationArtifact:
    """Everything the per-frame path needs: grid, projectors, background, threshold.

    ``projectors`` holds either one shared projector (statistically
    indistinguishable per-site PSFs) or one per site in flat order.
    ``metadata`` carries the kernel size, creation parameters, the emission
    channel the threshold applies to, and the format version.
    """

    grid: AtomGrid
    projectors: tuple[Projector, ...]
    background: float
    threshold: float
    metadata: dict = field(default_factory=dict)

    # derived caches so the per-frame path recomputes nothing but the
    # window extraction and multiply-reduce
    weights_stack: np.ndarray = field(init=False, repr=False, compare=False)
    matrix_sums: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        projs = tuple(self.projectors)
        n = self.grid.site_count
        if len(projs) not in (1, n):
            raise ValueError(f"need 1 or {n} projectors, got {len(projs)}")
        sizes = {p.size for p in projs}
        if len(sizes) != 1:
            raise ValueError("all projectors must share one kernel size")
        if not math.isfinite(self.threshold):
            raise ValueError("threshold must be finite")
        if not (math.isfinite(self.background) and self.background >= 0):
            raise ValueError("background must be finite and >= 0")
        object.__setattr__(self, "projectors", projs)
        object.__setattr__(self, "background", float(self.background))
        object.__setattr__(self, "threshold", float(self.threshold))
        stack = np.ascontiguousarray(np.stack([p.weights for p in projs]))
        stack.setflags(write=False)
        sums = _readonly(np.array([p.matrix_sum for p in projs]))
        object.__setattr__(self, "weights_stack", stack)
        object.__setattr__(self, "matrix_sums", sums)

    @property
    def kernel_size(self) -> int:
        return self.projectors[0].size

    @property
    def shared_projector(self) -> bool:
        return len(self.projectors) == 1

    def projector_for(self, r: int, c: int) -> Projector:
        if self.shared_projector:
            return self.projectors[0]
        return self.projectors[r * self.grid.cols + c]

    def site_matrix_sums(self) -> np.ndarray:
        """(rows*cols,) matrix sums, expanding a shared projector."""
        if self.shared_projector:
            return np.full(self.grid.site_count, self.matrix_sums[0])
        return np.asarray(self.matrix_sums)

    @property
    def threshold_channel(self) -> str:
        return self.metadata.get("threshold_channel", "normalized")


# ---------------------------------------------------------------------------
# Serialization: JSON for AtomGrid / CalibrationArtifact, optional raw binary
# channel for projector weights (little-endian float32, 8-byte header).
# ---------------------------------------------------------------------------


def grid_to_dict(grid: AtomGrid) -> dict:
    return {
        "rows": grid.rows,
        "cols": grid.cols,
        "origin": [grid.origin[0], grid.origin[1]],
        "pitch": grid.pitch,
        "angle": grid.angle,
    }


def grid_from_dict(data: dict) -> AtomGrid:
    try:
        return AtomGrid(
            rows=int(data["rows"]),
            cols=int(data["cols"]),
            origin=(float(data["origin"][0]), float(data["origin"][1])),
            pitch=float(data["pitch"]),
            angle=float(data.get("angle", 0.0)),
        )
    except KeyError as exc:
        raise ConfigError(f"grid is missing field {exc.args[0]!r}") from exc


def projector_to_dict(proj: Projector) -> dict:
    return {
        "size": proj.size,
        "weights": proj.weights.tolist(),
        "matrix_sum": proj.matrix_sum,
        "energy": proj.energy,
    }


def projector_from_dict(data: dict) -> Projector:
    return Projector(
        weights=np.asarray(data["weights"], dtype=np.float64),
        matrix_sum=float(data["matrix_sum"]),
        energy=float(data["energy"]),
    )


def save_projector_blob(path, projectors) -> None:
    """Raw binary channel: header {magic 'ATPJ', u16 k, u16 count}, then
    count * k * k little-endian float32 weights, row-major."""
    projs = list(projectors)
    k = projs[0].size
    stacked = np.stack([p.weights for p in projs]).astype("<f4")
    with open(path, "wb") as fh:
        fh.write(_PROJECTOR_HEADER.pack(_PROJECTOR_MAGIC, k, len(projs)))
        fh.write(stacked.tobytes())


def load_projector_weights(path) -> np.ndarray:
    """(count, k, k) float64 weights from a projector blob."""
    raw = Path(path).read_bytes()
    if len(raw) < _PROJECTOR_HEADER.size:
        raise ConfigError(f"{path}: truncated projector blob")
    magic, k, count = _PROJECTOR_HEADER.unpack_from(raw)
    if magic != _PROJECTOR_MAGIC:
        raise ConfigError(f"{path}: bad projector blob magic {magic!r}")
    body = np.frombuffer(raw, dtype="<f4", offset=_PROJECTOR_HEADER.size)
    if body.size != count * k * k:
        raise ConfigError(f"{path}: expected {count * k * k} weights, found {body.size}")
    return body.astype(np.float64).reshape(count, k, k)


def save_artifact(path, artifact: CalibrationArtifact, blob_path=None) -> None:
    """Write the artifact JSON; with ``blob_path`` the projector weights go to
    the binary channel and the JSON stores the blob name plus cached sums."""
    data = {
        "format_version": FORMAT_VERSION,
        "grid": grid_to_dict(artifact.grid),
        "background": artifact.background,
        "threshold": artifact.threshold,
        "metadata": artifact.metadata,
    }
    if blob_path is not None:
        save_projector_blob(blob_path, artifact.projectors)
        data["projectors"] = {
            "blob": Path(blob_path).name,
            "energies": [p.energy for p in artifact.projectors],
        }
    else:
        data["projectors"] = [projector_to_dict(p) for p in artifact.projectors]
    with open(path, "w") as fh:
        json.dump(data, fh, indent=1)
        fh.write("\n")


def load_artifact(path) -> CalibrationArtifact:
    path = Path(path)
    with open(path) as fh:
        data = json.load(fh)
    if "grid" not in data:
        raise ConfigError(f"{path}: artifact is missing field 'grid'")
    grid = grid_from_dict(data["grid"])
    pdata = data.get("projectors")
    if pdata is None:
        raise ConfigError(f"{path}: artifact is missing field 'projectors'")
    if isinstance(pdata, dict):
        weights = load_projector_weights(path.parent / pdata["blob"])
        energies = [float(e) for e in pdata["energies"]]
        if len(energies) != weights.shape[0]:
            raise ConfigError(f"{path}: projector blob count does not match energies")
        projectors = tuple(
            Projector(weights=w, matrix_sum=float(w.sum()), energy=e)
            for w, e in zip(weights, energies)
        )
    else:
        projectors = tuple(projector_from_dict(p) for p in pdata)
    return CalibrationArtifact(
        grid=grid,
        projectors=projectors,
        background=float(data["background"]),
        threshold=float(data["threshold"]),
        metadata=dict(data.get("metadata", {})),
    )
