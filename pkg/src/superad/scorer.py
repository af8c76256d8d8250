"""Nearest-neighbor anomaly scoring against a memory bank.

Each layer's patch grid is matched against that layer's bank matrix by
exact cosine search; per-layer maps are averaged, interpolated up to the
original resolution, and optionally blurred.  Hole filling is a separate
post-binarization step used by the evaluation stage.
"""

from __future__ import annotations

import math
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .coreset import MemoryBank
from .errors import CorruptionError, ValidationError
from .features import CategoryConfig, ImageFeatures, PatchFeatureGrid, _Cursor, atomic_write_bytes

_BANK_BLOCK_ROWS = 8192
_PATCH_BLOCK_ROWS = 4096

_CROSS = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]], dtype=bool)


@dataclass(frozen=True, eq=False)
class AnomalyMap:
    """Full-resolution anomaly field for one image."""

    image_id: str
    full_res: np.ndarray = field(repr=False)  # float32 (original_h, original_w)
    image_score: float
    grid_maps: dict[int, np.ndarray] | None = field(default=None, repr=False)


def layer_anomaly_map(test_grid: PatchFeatureGrid, bank_layer: np.ndarray) -> np.ndarray:
    """Minimum cosine distance of each patch to the bank rows.

    Patch vectors are unit-normalized first; exact zero vectors have no
    direction and score the maximum distance 2.0.  The search is exact and
    blocked only for memory, so results are independent of the tiling.
    """
    bank = np.asarray(bank_layer)
    if bank.ndim != 2:
        raise ValidationError(f"bank layer must be 2-D, got shape {bank.shape}")
    if bank.shape[0] == 0:
        raise ValidationError("bank layer is empty")
    if bank.shape[1] != test_grid.dim:
        raise ValidationError(
            f"bank dim {bank.shape[1]} != patch feature dim {test_grid.dim}"
        )
    patches = test_grid.flat().astype(np.float64)
    norms = np.linalg.norm(patches, axis=1)
    nonzero = norms > 0.0
    unit = np.zeros_like(patches)
    unit[nonzero] = patches[nonzero] / norms[nonzero, None]

    best = np.full(patches.shape[0], -np.inf)
    for p0 in range(0, patches.shape[0], _PATCH_BLOCK_ROWS):
        p1 = min(p0 + _PATCH_BLOCK_ROWS, patches.shape[0])
        block_best = np.full(p1 - p0, -np.inf)
        for b0 in range(0, bank.shape[0], _BANK_BLOCK_ROWS):
            b1 = min(b0 + _BANK_BLOCK_ROWS, bank.shape[0])
            sims = unit[p0:p1] @ bank[b0:b1].astype(np.float64).T
            np.maximum(block_best, sims.max(axis=1), out=block_best)
        best[p0:p1] = block_best
    scores = 1.0 - best
    scores[~nonzero] = 2.0
    np.clip(scores, 0.0, 2.0, out=scores)
    return scores.reshape(test_grid.grid_h, test_grid.grid_w)


def fuse_maps(maps: list[np.ndarray]) -> np.ndarray:
    """Elementwise arithmetic mean of same-shaped maps."""
    if not maps:
        raise ValueError("need at least one map")
    shape = maps[0].shape
    for m in maps[1:]:
        if m.shape != shape:
            raise ValidationError(f"map shapes differ: {m.shape} vs {shape}")
    return np.mean(np.stack(maps), axis=0)


def _axis_weights(n_src: int, n_dst: int) -> tuple[np.ndarray, np.ndarray]:
    """Left indices and interpolation weights mapping dst pixels to src cells.

    Source cell i covers a block of n_dst / n_src pixels and is anchored at
    the block center; destination pixels outside the outermost centers clamp
    to the edge values.
    """
    if n_src == 1:
        return np.zeros(n_dst, dtype=int), np.zeros(n_dst)
    centers = (np.arange(n_src) + 0.5) * (n_dst / n_src) - 0.5
    targets = np.arange(n_dst, dtype=np.float64)
    left = np.clip(np.searchsorted(centers, targets, side="right") - 1, 0, n_src - 2)
    weights = (targets - centers[left]) / (centers[left + 1] - centers[left])
    return left, np.clip(weights, 0.0, 1.0)


def upsample(grid_map: np.ndarray, target: tuple[int, int]) -> np.ndarray:
    """Bilinear interpolation of a grid map to the target resolution.

    Grid cells are aligned to the centers of the pixel blocks they cover,
    edges are extended, and outputs stay within the input's value range.
    """
    grid = np.asarray(grid_map, dtype=np.float64)
    if grid.ndim != 2:
        raise ValueError(f"grid map must be 2-D, got shape {grid.shape}")
    out_h, out_w = int(target[0]), int(target[1])
    h, w = grid.shape
    if out_h < h or out_w < w:
        raise ValueError(f"target {target} smaller than grid {(h, w)}")
    iy, wy = _axis_weights(h, out_h)
    rows = grid[iy] * (1.0 - wy)[:, None] + grid[np.minimum(iy + 1, h - 1)] * wy[:, None]
    ix, wx = _axis_weights(w, out_w)
    return rows[:, ix] * (1.0 - wx)[None, :] + rows[:, np.minimum(ix + 1, w - 1)] * wx[None, :]


def smooth(anomaly_map: np.ndarray, sigma: float) -> np.ndarray:
    """Gaussian blur with kernel radius ceil(3*sigma) and reflective borders.

    sigma = 0 is the identity.
    """
    if sigma < 0:
        raise ValueError(f"sigma must be >= 0, got {sigma}")
    m = np.asarray(anomaly_map, dtype=np.float64)
    if sigma == 0:
        return m.copy()
    radius = math.ceil(3.0 * sigma)
    offsets = np.arange(-radius, radius + 1, dtype=np.float64)
    kernel = np.exp(-(offsets**2) / (2.0 * sigma * sigma))
    kernel /= kernel.sum()

    def conv_axis0(arr: np.ndarray) -> np.ndarray:
        padded = np.pad(arr, ((radius, radius), (0, 0)), mode="symmetric")
        out = np.zeros_like(arr)
        for j, kj in enumerate(kernel):
            out += kj * padded[j : j + arr.shape[0]]
        return out

    return conv_axis0(conv_axis0(m).T).T


def fill_holes(binary: np.ndarray) -> np.ndarray:
    """Set to true every false region not 4-connected to the border."""
    m = np.asarray(binary, dtype=bool)
    if m.ndim != 2:
        raise ValueError(f"expected a 2-D mask, got shape {m.shape}")
    if m.size == 0 or m.all():
        return m.copy()
    labels, count = ndimage.label(~m, structure=_CROSS)
    if count == 0:
        return m.copy()
    border = np.unique(
        np.concatenate([labels[0], labels[-1], labels[:, 0], labels[:, -1]])
    )
    border = border[border != 0]
    out = np.ones_like(m)
    out[np.isin(labels, border)] = False
    return out


def score_image(
    test: ImageFeatures,
    bank: MemoryBank,
    config: CategoryConfig,
    debug: bool = False,
) -> AnomalyMap:
    """Full anomaly map for one test image.

    Per-layer nearest-neighbor maps are averaged on the shared grid, then
    interpolated to the original resolution and optionally blurred.  The
    image score is the maximum pixel of the final map.
    """
    if bank.config_hash != config.hash_hex():
        raise ValidationError(
            f"{test.image_id}: bank config hash {bank.config_hash[:12]} does not match "
            f"run config {config.hash_hex()[:12]}"
        )
    if set(test.layer_indices()) != set(bank.layer_indices()) or set(
        config.layer_indices
    ) != set(bank.layer_indices()):
        raise ValidationError(
            f"{test.image_id}: layer sets differ (features {test.layer_indices()}, "
            f"bank {bank.layer_indices()}, config {config.layer_indices})"
        )
    grid_maps = {
        g.layer_index: layer_anomaly_map(g, bank.layers[g.layer_index]) for g in test.layers
    }
    fused = fuse_maps([grid_maps[i] for i in sorted(grid_maps)])
    full = smooth(upsample(fused, test.original_size), config.smoothing_sigma)
    full32 = full.astype(np.float32)
    return AnomalyMap(
        image_id=test.image_id,
        full_res=full32,
        image_score=float(full32.max()),
        grid_maps={i: m.astype(np.float32) for i, m in grid_maps.items()} if debug else None,
    )


def write_anomaly_map(values: np.ndarray, path: str | os.PathLike) -> None:
    """Persist a float map as (u32 H, u32 W, f32 row-major), little-endian."""
    arr = np.ascontiguousarray(values, dtype="<f4")
    if arr.ndim != 2:
        raise ValueError(f"anomaly map must be 2-D, got shape {arr.shape}")
    atomic_write_bytes(path, struct.pack("<II", *arr.shape) + arr.tobytes())


def read_anomaly_map(path: str | os.PathLike) -> np.ndarray:
    path = Path(path)
    cur = _Cursor(path.read_bytes(), str(path))
    h, w = cur.unpack("<II")
    data = np.frombuffer(cur.take(4 * h * w), dtype="<f4").copy()
    if cur.remaining:
        raise CorruptionError(f"{path}: {cur.remaining} trailing bytes")
    return data.reshape(h, w)
