"""Adaptive foreground masking from patch features.

The mask is derived in four steps: project patch features onto their first
principal component, binarize the projections at a fixed threshold, resolve
which side of the threshold is foreground by comparing per-channel variance
medians, and clean the grid up with square-kernel dilation plus closing.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DegenerateDataError
from .features import CategoryConfig, ImageFeatures, atomic_write_bytes


@dataclass(frozen=True, eq=False)
class PcaResult:
    """First principal axis of a feature matrix.

    ``direction`` is unit length with its largest-magnitude component made
    positive, so the result is unique.  ``projections`` are the scores of
    the mean-centered rows along that axis.
    """

    direction: np.ndarray = field(repr=False)
    projections: np.ndarray = field(repr=False)
    explained_variance: float


@dataclass(frozen=True, eq=False)
class ForegroundMask:
    """Grid-level foreground decision plus the parameters that produced it.

    A degenerate mask (no signal, or refinement removed every cell) is
    stored as all-true so downstream consumers can use it unconditionally.
    """

    grid: np.ndarray = field(repr=False)  # bool (grid_h, grid_w), True = foreground
    tau: float
    kernel: int
    inverted: bool
    degenerate: bool = False


def first_principal_component(X: np.ndarray) -> PcaResult:
    """Direction of maximum variance of the mean-centered rows of X.

    Computed from the singular value decomposition of the centered data
    matrix.  Sample variance (ddof=1) is the variance convention for
    ``explained_variance``.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2:
        raise ValueError(f"X must be 2-D, got shape {X.shape}")
    n = X.shape[0]
    if n < 2:
        raise ValueError(f"need at least 2 rows, got {n}")
    if not np.isfinite(X).all():
        raise ValueError("X contains non-finite values")
    if bool((X == X[0]).all()):
        raise DegenerateDataError("all rows identical: covariance is zero")
    centered = X - X.mean(axis=0)
    _, s, vt = np.linalg.svd(centered, full_matrices=False)
    direction = vt[0]
    if direction[int(np.argmax(np.abs(direction)))] < 0:
        direction = -direction
    return PcaResult(
        direction=direction,
        projections=centered @ direction,
        explained_variance=float(s[0] ** 2 / (n - 1)),
    )


def initial_mask(projections: np.ndarray, tau: float) -> np.ndarray:
    """Binarize projections with a strict threshold: out[i] = proj[i] > tau."""
    proj = np.asarray(projections, dtype=np.float64)
    if not np.isfinite(proj).all():
        raise ValueError("projections contain non-finite values")
    return proj > tau


def resolve_orientation(X: np.ndarray, mask: np.ndarray) -> tuple[np.ndarray, bool]:
    """Decide which side of the initial mask is foreground.

    Foreground should carry the larger median of per-channel variances; if
    the masked side loses that comparison, the mask is negated.  When either
    side is empty or a singleton the sample variance is undefined and the
    mask is returned unchanged.
    """
    X = np.asarray(X, dtype=np.float64)
    m = np.asarray(mask, dtype=bool)
    if m.shape != (X.shape[0],):
        raise ValueError(f"mask length {m.shape} does not match {X.shape[0]} rows")
    n_masked = int(m.sum())
    n_unmasked = m.size - n_masked
    if n_masked < 2 or n_unmasked < 2:
        return m.copy(), False
    median_masked = float(np.median(X[m].var(axis=0, ddof=1)))
    median_unmasked = float(np.median(X[~m].var(axis=0, ddof=1)))
    if median_masked >= median_unmasked:
        return m.copy(), False
    return ~m, True


def _check_kernel(kernel: int) -> None:
    if kernel < 1 or kernel % 2 == 0:
        raise ValueError(f"kernel must be odd and >= 1, got {kernel}")


def _windows(grid: np.ndarray, kernel: int) -> np.ndarray:
    pad = kernel // 2
    padded = np.pad(grid, pad, mode="constant", constant_values=False)
    return sliding_window_view(padded, (kernel, kernel))


def binary_dilation(grid: np.ndarray, kernel: int) -> np.ndarray:
    """Square-kernel dilation; cells outside the grid count as background."""
    _check_kernel(kernel)
    g = np.asarray(grid, dtype=bool)
    if kernel == 1:
        return g.copy()
    return _windows(g, kernel).any(axis=(-2, -1))


def binary_erosion(grid: np.ndarray, kernel: int) -> np.ndarray:
    """Square-kernel erosion; cells outside the grid count as background."""
    _check_kernel(kernel)
    g = np.asarray(grid, dtype=bool)
    if kernel == 1:
        return g.copy()
    return _windows(g, kernel).all(axis=(-2, -1))


def binary_closing(grid: np.ndarray, kernel: int) -> np.ndarray:
    """Dilation followed by erosion with the same square kernel."""
    return binary_erosion(binary_dilation(grid, kernel), kernel)


def refine_mask(grid: np.ndarray, kernel: int) -> np.ndarray:
    """Connectivity-enhancing dilation, then closing: Closing(Dilation(grid))."""
    return binary_closing(binary_dilation(grid, kernel), kernel)


def compute_foreground_mask(features: ImageFeatures, config: CategoryConfig) -> ForegroundMask:
    """Foreground mask for one image from its configured mask layer.

    Degenerate inputs (constant features) and refinements that erase every
    cell both yield an all-true mask flagged as degenerate.
    """
    grid = features.layer(config.mask_layer)
    X = grid.flat().astype(np.float64)
    all_true = np.ones((grid.grid_h, grid.grid_w), dtype=bool)
    pca_input = X
    if config.pca_standardize:
        std = X.std(axis=0, ddof=1) if X.shape[0] > 1 else np.ones(X.shape[1])
        std = np.where(std > 0, std, 1.0)
        pca_input = (X - X.mean(axis=0)) / std
    try:
        pca = first_principal_component(pca_input)
    except DegenerateDataError:
        return ForegroundMask(
            grid=all_true, tau=config.tau, kernel=config.kernel, inverted=False, degenerate=True
        )
    mask0 = initial_mask(pca.projections, config.tau)
    # Orientation always compares the raw features; variance is translation
    # invariant, so centering would not change the outcome anyway.
    mask1, inverted = resolve_orientation(X, mask0)
    refined = refine_mask(mask1.reshape(grid.grid_h, grid.grid_w), config.kernel)
    if not refined.any():
        return ForegroundMask(
            grid=all_true, tau=config.tau, kernel=config.kernel, inverted=inverted, degenerate=True
        )
    return ForegroundMask(
        grid=refined, tau=config.tau, kernel=config.kernel, inverted=inverted, degenerate=False
    )


def write_mask_pgm(mask: np.ndarray, path: str | os.PathLike) -> None:
    """Debug dump as binary PGM: 255 = foreground, 0 = background."""
    grid = np.asarray(mask, dtype=bool)
    header = f"P5\n{grid.shape[1]} {grid.shape[0]}\n255\n".encode("ascii")
    payload = np.where(grid, 255, 0).astype(np.uint8).tobytes()
    atomic_write_bytes(path, header + payload)
