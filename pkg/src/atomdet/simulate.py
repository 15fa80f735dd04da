"""Synthetic fluorescence frames from the linear photoelectron model.

The expected count at pixel x is ``b + sum_i psf_i(x) * gamma_i`` over the
occupied sites; sampled frames add Poisson shot noise and optional Gaussian
read noise on top. The PSF is stamped at the nearest pixel to each site
center (no sub-pixel interpolation), matching the well-separated-tweezer
regime the runtime path assumes.

Everything here is deterministic given the spec's seed: frame ``i`` draws
from ``default_rng(seed + i)``, so frames can be produced on concurrent
workers without sharing RNG state.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, replace

import numpy as np

from atomdet import core
from atomdet.core import AtomGrid, CalibrationArtifact, Image, Projector, PsfKernel
from atomdet.errors import ConfigError, WindowOutOfBounds

_NOISE_MODES = ("none", "poisson")


@dataclass(frozen=True)
class SceneSpec:
    """Scene description for the simulator; see ``scene_from_json`` for the file form."""

    width: int
    height: int
    grid: AtomGrid
    psf: PsfKernel
    background: float = 0.0
    brightness_mean: float = 1000.0
    brightness_jitter: float = 0.0
    fill_probability: float = 0.5
    occupancy: np.ndarray | None = None  # (rows, cols) bool; overrides fill_probability
    noise: str = "poisson"
    read_noise_sigma: float = 0.0
    seed: int = 0
    subpixel: bool = False  # bilinear sub-pixel stamping; default mirrors the
                            # nearest-pixel regime the runtime path assumes

    def __post_init__(self):
        if self.background < 0 or self.brightness_mean < 0 or self.brightness_jitter < 0:
            raise ConfigError("background, brightness_mean and brightness_jitter must be >= 0")
        if not 0.0 <= self.fill_probability <= 1.0:
            raise ConfigError("fill_probability must lie in [0, 1]")
        if self.noise not in _NOISE_MODES:
            raise ConfigError(f"noise must be one of {_NOISE_MODES}, got {self.noise!r}")
        if self.read_noise_sigma < 0:
            raise ConfigError("read_noise_sigma must be >= 0")
        if not self.psf.is_normalized:
            raise ConfigError("scene PSF must be normalized (unit sum)")
        if self.occupancy is not None:
            occ = np.array(self.occupancy, dtype=bool, copy=True)
            if occ.shape != (self.grid.rows, self.grid.cols):
                raise ConfigError(
                    f"occupancy shape {occ.shape} does not match grid "
                    f"{self.grid.rows}x{self.grid.cols}"
                )
            occ.setflags(write=False)
            object.__setattr__(self, "occupancy", occ)


@dataclass(frozen=True)
class GroundTruth:
    occupancy: np.ndarray
    gammas: np.ndarray
    background: float
    frame_index: int
    seed: int


def make_gaussian_psf(k: int, sigma: float) -> PsfKernel:
    """Normalized isotropic Gaussian sampled at pixel centers, unit sum."""
    if k % 2 == 0 or k < 3:
        raise ValueError("kernel size must be odd and >= 3")
    if not sigma > 0:
        raise ValueError("sigma must be > 0")
    half = (k - 1) // 2
    if sigma < 1e-6:
        # delta limit: everything but the center underflows anyway
        w = np.zeros((k, k))
        w[half, half] = 1.0
        return PsfKernel(w)
    d = np.arange(-half, half + 1, dtype=np.float64)
    g = np.exp(-(d ** 2) / (2.0 * sigma ** 2))
    w = np.outer(g, g)
    return PsfKernel(w / w.sum())


def _resolve_occupancy(spec: SceneSpec, rng: np.random.Generator) -> np.ndarray:
    if spec.occupancy is not None:
        return np.array(spec.occupancy, dtype=bool)
    return rng.random((spec.grid.rows, spec.grid.cols)) < spec.fill_probability


def _draw_gammas(spec: SceneSpec, occupancy: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    gammas = np.zeros(occupancy.shape)
    idx = np.nonzero(occupancy)
    n = idx[0].size
    if n == 0:
        return gammas
    mean = spec.brightness_mean
    sigma = spec.brightness_jitter * mean
    draws = rng.normal(mean, sigma, size=n)
    # truncate at zero by redrawing; brightness is a non-negative quantity
    for _ in range(100):
        neg = draws < 0
        if not neg.any():
            break
        draws[neg] = rng.normal(mean, sigma, size=int(neg.sum()))
    np.clip(draws, 0.0, None, out=draws)
    gammas[idx] = draws
    return gammas


def render_expected(spec: SceneSpec, occupancy: np.ndarray, gammas: np.ndarray) -> Image:
    """Deterministic expected-count image for explicit occupancy and brightnesses."""
    k = spec.psf.size
    px = np.full((spec.height, spec.width), float(spec.background))
    flat_gamma = np.asarray(gammas, dtype=np.float64).ravel()
    flat_occ = np.asarray(occupancy, dtype=bool).ravel()
    if not spec.subpixel:
        corners = core.roi_corners(spec.grid, k, spec.width, spec.height)
        for i in np.flatnonzero(flat_occ):
            y0, x0 = corners[i]
            px[y0:y0 + k, x0:x0 + k] += flat_gamma[i] * spec.psf.weights
        return Image(px)
    # bilinear sub-pixel placement: spread the kernel over the four integer
    # alignments so the stamped intensity centroid lands at the exact center
    half = (k - 1) // 2
    pos = spec.grid.site_positions()
    for i in np.flatnonzero(flat_occ):
        x, y = pos[i]
        xf, yf = math.floor(x), math.floor(y)
        fx, fy = x - xf, y - yf
        x0, y0 = int(xf) - half, int(yf) - half
        if x0 < 0 or y0 < 0 or x0 + k + 1 > spec.width or y0 + k + 1 > spec.height:
            raise WindowOutOfBounds(
                f"site {i // spec.grid.cols, i % spec.grid.cols} at ({x:.2f}, {y:.2f}) "
                f"needs a {k + 1}x{k + 1} stamp outside the {spec.width}x{spec.height} image"
            )
        w = flat_gamma[i] * spec.psf.weights
        pad = np.zeros((k + 1, k + 1))
        pad[:k, :k] += (1 - fy) * (1 - fx) * w
        pad[:k, 1:] += (1 - fy) * fx * w
        pad[1:, :k] += fy * (1 - fx) * w
        pad[1:, 1:] += fy * fx * w
        px[y0:y0 + k + 1, x0:x0 + k + 1] += pad
    return Image(px)


def expected_image(spec: SceneSpec) -> Image:
    """Noise-free image with every occupied atom at the mean brightness."""
    rng = np.random.default_rng(spec.seed)
    occupancy = _resolve_occupancy(spec, rng)
    gammas = np.where(occupancy, spec.brightness_mean, 0.0)
    return render_expected(spec, occupancy, gammas)


def sample_image(spec: SceneSpec, frame_index: int = 0) -> tuple[Image, GroundTruth]:
    """One simulated frame plus its ground truth; bit-identical per (seed, frame_index)."""
    rng = np.random.default_rng(spec.seed + frame_index)
    occupancy = _resolve_occupancy(spec, rng)
    gammas = _draw_gammas(spec, occupancy, rng)
    lam = render_expected(spec, occupancy, gammas).pixels
    if spec.noise == "poisson":
        px = rng.poisson(lam).astype(np.float64)
    else:
        px = lam.copy()
    if spec.read_noise_sigma > 0:
        px += rng.normal(0.0, spec.read_noise_sigma, size=px.shape)
        np.clip(px, 0.0, None, out=px)
    truth = GroundTruth(
        occupancy=occupancy,
        gammas=gammas,
        background=spec.background,
        frame_index=frame_index,
        seed=spec.seed,
    )
    return Image(px), truth


def sample_frames(spec: SceneSpec, count: int, start_index: int = 0):
    for i in range(start_index, start_index + count):
        yield sample_image(spec, frame_index=i)


# ---------------------------------------------------------------------------
# Scene JSON and derived artifacts
# ---------------------------------------------------------------------------


def _psf_from_config(data: dict) -> PsfKernel:
    kind = data.get("kind", "gaussian")
    if kind == "gaussian":
        size = int(data.get("size", 31))
        sigma = float(data.get("sigma", 2.2))
        if sigma <= 0:
            raise ConfigError("scene psf.sigma must be > 0")
        return make_gaussian_psf(size, sigma)
    if kind == "explicit":
        if "weights" not in data:
            raise ConfigError("scene psf.weights required for kind 'explicit'")
        return PsfKernel(np.asarray(data["weights"], dtype=np.float64)).normalized()
    raise ConfigError(f"scene psf.kind must be 'gaussian' or 'explicit', got {kind!r}")


def scene_from_dict(data: dict) -> SceneSpec:
    try:
        grid = core.grid_from_dict(data["grid"])
        psf = _psf_from_config(data.get("psf", {}))
        occ_field = data.get("occupancy", 0.5)
        occupancy = None
        fill = 0.5
        if isinstance(occ_field, (int, float)):
            fill = float(occ_field)
        elif isinstance(occ_field, list):
            occupancy = np.asarray(occ_field, dtype=bool)
        else:
            raise ConfigError("scene occupancy must be a fill probability or boolean matrix")
        return SceneSpec(
            width=int(data["width"]),
            height=int(data["height"]),
            grid=grid,
            psf=psf,
            background=float(data.get("background", 0.0)),
            brightness_mean=float(data.get("brightness_mean", 1000.0)),
            brightness_jitter=float(data.get("brightness_jitter", 0.0)),
            fill_probability=fill,
            occupancy=occupancy,
            noise=str(data.get("noise", "poisson")),
            read_noise_sigma=float(data.get("read_noise_sigma", 0.0)),
            seed=int(data.get("seed", 0)),
            subpixel=bool(data.get("subpixel", False)),
        )
    except KeyError as exc:
        raise ConfigError(f"scene is missing field {exc.args[0]!r}") from exc


def scene_to_dict(spec: SceneSpec) -> dict:
    """Fully-resolved scene dict (inverse of scene_from_dict, weights inline)."""
    occ = spec.occupancy
    return {
        "width": spec.width,
        "height": spec.height,
        "grid": core.grid_to_dict(spec.grid),
        "psf": {"kind": "explicit", "weights": spec.psf.weights.tolist()},
        "background": spec.background,
        "brightness_mean": spec.brightness_mean,
        "brightness_jitter": spec.brightness_jitter,
        "occupancy": spec.fill_probability if occ is None else occ.tolist(),
        "noise": spec.noise,
        "read_noise_sigma": spec.read_noise_sigma,
        "seed": spec.seed,
        "subpixel": spec.subpixel,
    }


def scene_from_json(path) -> SceneSpec:
    with open(path) as fh:
        try:
            data = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    return scene_from_dict(data)


def default_scene(rows: int = 10, cols: int = 10, seed: int = 1234) -> SceneSpec:
    """10x10 array in a 256x256 frame (pitch 23, origin 24): the documented
    simulator defaults used by the CLI when no scene file is given."""
    pitch = 23.0
    margin = 24.0
    width = int(round((cols - 1) * pitch + 2 * margin + 1))
    height = int(round((rows - 1) * pitch + 2 * margin + 1))
    return SceneSpec(
        width=width,
        height=height,
        grid=AtomGrid(rows=rows, cols=cols, origin=(margin, margin), pitch=pitch),
        psf=make_gaussian_psf(31, 2.2),
        background=5.0,
        brightness_mean=1500.0,
        brightness_jitter=0.05,
        fill_probability=0.5,
        noise="poisson",
        read_noise_sigma=0.0,
        seed=seed,
    )


def scene_artifact(spec: SceneSpec, threshold: float | None = None,
                   threshold_channel: str = "normalized") -> CalibrationArtifact:
    """Ground-truth artifact for a known scene (shared projector, exact grid).

    Useful as an oracle: reconstruction against this artifact isolates the
    runtime path from calibration error. The default threshold sits halfway
    up the mean brightness on the requested channel.
    """
    psf = spec.psf.normalized()
    energy = float(np.sum(psf.weights ** 2))
    weights = psf.weights / energy
    proj = Projector(weights=weights, matrix_sum=float(weights.sum()), energy=energy)
    if threshold is None:
        raw_thr = spec.brightness_mean / 2.0
        threshold = raw_thr if threshold_channel == "raw" else raw_thr / proj.matrix_sum
    return CalibrationArtifact(
        grid=spec.grid,
        projectors=(proj,),
        background=spec.background,
        threshold=float(threshold),
        metadata={
            "kernel_size": psf.size,
            "threshold_channel": threshold_channel,
            "source": "scene-ground-truth",
            "format_version": core.FORMAT_VERSION,
        },
    )


def with_seed(spec: SceneSpec, seed: int) -> SceneSpec:
    return replace(spec, seed=seed)
