"""Offline calibration: grid geometry, per-site PSFs, projectors, background, threshold.

Fed an exemplary set of frames, ``calibrate`` produces the full
CalibrationArtifact so that the per-frame path is reduced to window
extraction and a multiply-reduce. None of this is latency critical.

Method choices (the stages themselves are standard):
* Otsu's method both binarizes the mean image for grid detection and picks
  the detection threshold on the emission histogram; it is deterministic and
  parameter free.
* Site occupancy during PSF estimation is broken out of the chicken-and-egg
  loop by a one-pass window-sum quantile prefilter.
* Per-site projectors collapse to one shared projector when all per-site
  PSFs agree to 1e-3 max-abs, which saves memory without changing results in
  the homogeneous case.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from atomdet import core
from atomdet.core import AtomGrid, CalibrationArtifact, Image, Projector, PsfKernel
from atomdet.errors import (
    DegeneratePsf,
    GridDetectFailed,
    InsufficientBrightFrames,
    NoBackgroundPixels,
    NotBimodal,
)

_SHARED_PSF_TOL = 1e-3  # max-abs agreement for collapsing to one projector
_SVD_RCOND = 1e-10      # singular values below rcond*sigma_max treated as zero


@dataclass(frozen=True)
class CalibrationConfig:
    rows: int
    cols: int
    kernel_size: int = 31
    min_images: int = 2
    occupancy_prefilter: float = 0.5
    threshold_channel: str = "normalized"

    def __post_init__(self):
        if self.kernel_size % 2 == 0 or self.kernel_size < 3:
            raise ValueError("kernel_size must be odd and >= 3")
        if self.rows < 1 or self.cols < 1:
            raise ValueError("rows and cols must be >= 1")
        if self.min_images < 2:
            raise ValueError("min_images must be >= 2")
        if not 0.0 <= self.occupancy_prefilter < 1.0:
            raise ValueError("occupancy_prefilter must lie in [0, 1)")
        if self.threshold_channel not in ("raw", "normalized"):
            raise ValueError("threshold_channel must be 'raw' or 'normalized'")


def otsu_threshold(values, bins: int = 256) -> tuple[float, float]:
    """Otsu's threshold on a histogram spanning [min, max] of the samples.

    Returns (threshold, effectiveness) where effectiveness is the between-
    class variance divided by the total variance (0 for unimodal data).
    """
    v = np.asarray(values, dtype=np.float64).ravel()
    lo, hi = float(v.min()), float(v.max())
    total_var = float(v.var())
    if hi <= lo or total_var == 0.0:
        return lo, 0.0
    hist, edges = np.histogram(v, bins=bins, range=(lo, hi))
    p = hist.astype(np.float64) / hist.sum()
    centers = 0.5 * (edges[:-1] + edges[1:])
    w0 = np.cumsum(p)
    mu = np.cumsum(p * centers)
    mu_t = mu[-1]
    w1 = 1.0 - w0
    with np.errstate(divide="ignore", invalid="ignore"):
        between = (mu_t * w0 - mu) ** 2 / (w0 * w1)
    between[~np.isfinite(between)] = 0.0
    t = int(np.argmax(between))
    # class split is "bin <= t vs bin > t"; the boundary value is the upper edge
    threshold = float(edges[t + 1])
    # histogram-based variances so effectiveness is consistent with the split
    hist_var = float(np.sum(p * (centers - mu_t) ** 2))
    effectiveness = float(between[t]) / hist_var if hist_var > 0 else 0.0
    return threshold, effectiveness


def _fold_angle(theta: float) -> float:
    """Fold an axis direction into (-pi/4, pi/4] (lattice axes are mod 90 deg)."""
    half_pi = math.pi / 2.0
    theta = math.remainder(theta, half_pi)
    if theta <= -math.pi / 4:
        theta += half_pi
    elif theta > math.pi / 4:
        theta -= half_pi
    return theta


def fit_grid(mean_image: Image, cfg: CalibrationConfig) -> AtomGrid:
    """Recover origin, pitch and angle of the site lattice from a mean image.

    Binarize at Otsu's level, take the rows*cols largest connected
    components, assign their intensity-weighted centroids to lattice indices,
    and least-squares fit the four lattice parameters. The fit is linear in
    (ox, oy, pitch*cos, pitch*sin), so it is exact, not iterative.
    """
    n_sites = cfg.rows * cfg.cols
    px = mean_image.pixels
    threshold, _ = otsu_threshold(px)
    mask = px > threshold
    labels, n_comp = ndimage.label(mask)
    if n_comp < n_sites:
        raise GridDetectFailed(
            f"found {n_comp} bright components, need {n_sites}", component_count=n_comp
        )
    areas = np.bincount(labels.ravel())[1:]
    keep = np.argsort(areas)[::-1][:n_sites] + 1
    centroids_yx = ndimage.center_of_mass(px, labels, keep.tolist())
    pts = np.array([(x, y) for y, x in centroids_yx])  # (n, 2) as (x, y)

    # initial pitch/angle from nearest-neighbour geometry
    diff = pts[:, None, :] - pts[None, :, :]
    dist = np.hypot(diff[..., 0], diff[..., 1])
    np.fill_diagonal(dist, np.inf)
    nn = np.argmin(dist, axis=1)
    nn_vec = pts[nn] - pts
    pitch0 = float(np.median(dist[np.arange(len(pts)), nn]))
    angles = [_fold_angle(math.atan2(v[1], v[0])) for v in nn_vec]
    angle0 = float(np.median(angles))

    # de-rotate, then group sorted y into rows and sort each row by x
    cos_a, sin_a = math.cos(-angle0), math.sin(-angle0)
    rot = np.stack([cos_a * pts[:, 0] - sin_a * pts[:, 1],
                    sin_a * pts[:, 0] + cos_a * pts[:, 1]], axis=1)
    order = np.argsort(rot[:, 1])
    row_of = np.empty(len(pts), dtype=int)
    row_idx = 0
    prev_y = None
    for idx in order:
        y = rot[idx, 1]
        if prev_y is not None and y - prev_y > pitch0 / 2:
            row_idx += 1
        row_of[idx] = row_idx
        prev_y = y
    if row_idx + 1 != cfg.rows or np.any(np.bincount(row_of) != cfg.cols):
        raise GridDetectFailed(
            f"could not arrange {n_sites} centroids into {cfg.rows}x{cfg.cols}",
            component_count=n_comp,
        )
    col_of = np.empty(len(pts), dtype=int)
    for r in range(cfg.rows):
        members = np.flatnonzero(row_of == r)
        col_of[members[np.argsort(rot[members, 0])]] = np.arange(cfg.cols)

    # linear least squares: x = ox + u*c - v*r ; y = oy + v*c + u*r
    r_idx = row_of.astype(np.float64)
    c_idx = col_of.astype(np.float64)
    n = len(pts)
    design = np.zeros((2 * n, 4))
    rhs = np.empty(2 * n)
    design[0::2, 0] = 1.0
    design[0::2, 2] = c_idx
    design[0::2, 3] = -r_idx
    design[1::2, 1] = 1.0
    design[1::2, 2] = r_idx
    design[1::2, 3] = c_idx
    rhs[0::2] = pts[:, 0]
    rhs[1::2] = pts[:, 1]
    (ox, oy, u, v), *_ = np.linalg.lstsq(design, rhs, rcond=None)
    pitch = math.hypot(u, v)
    angle = math.atan2(v, u)
    residual = design @ np.array([ox, oy, u, v]) - rhs
    rms = math.sqrt(float(np.mean(residual[0::2] ** 2 + residual[1::2] ** 2)))
    if pitch <= 0 or rms > pitch / 4:
        raise GridDetectFailed(
            f"lattice fit residual RMS {rms:.3f} px exceeds pitch/4 "
            f"({pitch / 4:.3f} px)", component_count=n_comp, residual_rms=rms,
        )
    return AtomGrid(rows=cfg.rows, cols=cfg.cols, origin=(float(ox), float(oy)),
                    pitch=pitch, angle=angle)


def _window_mask(grid: AtomGrid, k: int, width: int, height: int) -> np.ndarray:
    corners = core.roi_corners(grid, k, width, height)
    mask = np.zeros((height, width), dtype=bool)
    for y0, x0 in corners:
        mask[y0:y0 + k, x0:x0 + k] = True
    return mask


def estimate_background(images, grid: AtomGrid, k: int) -> float:
    """Per-image median over pixels outside every site window, averaged over images."""
    images = list(images)
    if not images:
        raise ValueError("need at least one image")
    first = images[0]
    outside = ~_window_mask(grid, k, first.width, first.height)
    if not outside.any():
        raise NoBackgroundPixels(f"{k}x{k} windows tile the whole {first.width}x{first.height} frame")
    medians = [float(np.median(img.pixels[outside])) for img in images]
    return float(np.mean(medians))


def estimate_psf(images, grid: AtomGrid, background: float,
                 cfg: CalibrationConfig) -> tuple[list[PsfKernel], PsfKernel]:
    """Per-site PSFs averaged over bright frames, plus the pooled kernel.

    A frame counts as bright for a site when its background-subtracted window
    sum exceeds the ``occupancy_prefilter`` quantile of that site's sums.
    """
    images = list(images)
    k = cfg.kernel_size
    first = images[0]
    corners = core.roi_corners(grid, k, first.width, first.height)
    stacks = np.stack([img.pixels for img in images])  # (frames, h, w)
    kernels: list[PsfKernel] = []
    accum = np.zeros((k, k))
    for i, (y0, x0) in enumerate(corners):
        windows = stacks[:, y0:y0 + k, x0:x0 + k]
        sums = windows.sum(axis=(1, 2)) - background * k * k
        cutoff = np.quantile(sums, cfg.occupancy_prefilter)
        bright = sums > cutoff
        site = (i // grid.cols, i % grid.cols)
        if int(bright.sum()) < 2:
            raise InsufficientBrightFrames(
                f"site {site}: {int(bright.sum())} frames passed the prefilter, need 2",
                site=site,
            )
        avg = windows[bright].mean(axis=0) - background
        np.clip(avg, 0.0, None, out=avg)
        total = avg.sum()
        if total <= 0:
            raise InsufficientBrightFrames(
                f"site {site}: bright-frame average carries no signal", site=site
            )
        kernels.append(PsfKernel(avg / total))
        accum += kernels[-1].weights
    pooled = PsfKernel(accum / accum.sum())
    return kernels, pooled


def _stamp_offset(weights: np.ndarray, offset: tuple[int, int], k: int) -> np.ndarray:
    """Kernel shifted by integer (dx, dy) pixels, cropped to the k x k window."""
    dx, dy = int(round(offset[0])), int(round(offset[1]))
    out = np.zeros((k, k))
    src_y = slice(max(0, -dy), min(k, k - dy))
    src_x = slice(max(0, -dx), min(k, k - dx))
    dst_y = slice(max(0, dy), min(k, k + dy))
    dst_x = slice(max(0, dx), min(k, k + dx))
    out[dst_y, dst_x] = weights[src_y, src_x]
    return out


def build_projector(psf: PsfKernel, neighbors=None) -> Projector:
    """Pseudoinverse-derived reconstruction kernel for one site.

    Isolated site: the map gamma -> gamma * psf is rank one, so its
    Moore-Penrose inverse is psf / sum(psf**2) and the product sum recovers
    gamma exactly. With overlapping neighbors, each neighbor kernel (shifted
    into this site's window) becomes a column of a design matrix whose SVD
    pseudoinverse row for the center site cancels the neighbor cross-talk.
    """
    w = psf.weights
    energy = float(np.sum(w ** 2))
    if energy == 0.0:
        raise DegeneratePsf("PSF has zero energy")
    k = psf.size
    if not neighbors:
        proj = w / energy
    else:
        columns = [w.ravel()]
        for offset, nb in neighbors:
            if nb.size != k:
                raise ValueError("neighbor kernels must match the center kernel size")
            columns.append(_stamp_offset(nb.weights, offset, k).ravel())
        design = np.stack(columns, axis=1)
        pinv = np.linalg.pinv(design, rcond=_SVD_RCOND)
        proj = pinv[0].reshape(k, k)
    return Projector(weights=proj, matrix_sum=float(proj.sum()), energy=energy)


def calibrate_threshold(emissions, min_samples: int = 16,
                        min_effectiveness: float = 0.5) -> float:
    """Otsu threshold over the emission samples; NotBimodal if the classes
    are not separable (between/total variance ratio below 0.5)."""
    v = np.asarray(emissions, dtype=np.float64).ravel()
    if v.size < min_samples:
        raise ValueError(f"need at least {min_samples} emission samples, got {v.size}")
    if not np.all(np.isfinite(v)):
        raise ValueError("emission samples must be finite")
    threshold, effectiveness = otsu_threshold(v)
    if effectiveness <= min_effectiveness:
        raise NotBimodal(
            f"emission histogram variance ratio {effectiveness:.3f} <= {min_effectiveness}",
            variance_ratio=effectiveness,
        )
    return threshold


def calibrate(images, cfg: CalibrationConfig) -> CalibrationArtifact:
    """Full calibration pass over an exemplary image set."""
    from atomdet import reconstruct  # runtime path reused for threshold samples

    images = list(images)
    if len(images) < cfg.min_images:
        raise ValueError(f"need at least {cfg.min_images} images, got {len(images)}")
    mean_image = Image(np.mean([img.pixels for img in images], axis=0))
    grid = fit_grid(mean_image, cfg)
    background = estimate_background(images, grid, cfg.kernel_size)
    site_kernels, pooled = estimate_psf(images, grid, background, cfg)

    spread = max(float(np.max(np.abs(kern.weights - pooled.weights))) for kern in site_kernels)
    if spread <= _SHARED_PSF_TOL:
        projectors = (build_projector(pooled),)
    else:
        projectors = tuple(build_projector(kern) for kern in site_kernels)

    artifact = CalibrationArtifact(
        grid=grid,
        projectors=projectors,
        background=background,
        threshold=0.0,  # placeholder until the emission pass below
        metadata={
            "kernel_size": cfg.kernel_size,
            "threshold_channel": cfg.threshold_channel,
            "min_images": cfg.min_images,
            "occupancy_prefilter": cfg.occupancy_prefilter,
            "n_images": len(images),
            "shared_projector": len(projectors) == 1,
            "psf_spread_max_abs": spread,
            "format_version": core.FORMAT_VERSION,
        },
    )
    run_cfg = reconstruct.ReconstructionConfig(mode="optimized",
                                               emission_channel=cfg.threshold_channel)
    samples = [
        reconstruct.reconstruct_optimized(img, artifact, run_cfg).channel(cfg.threshold_channel)
        for img in images
    ]
    threshold = calibrate_threshold(np.concatenate([s.ravel() for s in samples]))
    return CalibrationArtifact(
        grid=grid,
        projectors=projectors,
        background=background,
        threshold=threshold,
        metadata=artifact.metadata,
    )
