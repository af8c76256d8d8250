"""Greedy k-center reference selection and memory bank construction.

Reference images are picked by farthest-point traversal over their global
embeddings; the bank stores the unit-normalized patch vectors of the picked
references, one matrix per feature layer.
"""

from __future__ import annotations

import json
import logging
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import CorruptionError, FormatError, ValidationError
from .features import CategoryConfig, ImageFeatures, _Cursor, atomic_write_bytes

log = logging.getLogger(__name__)

SADB_MAGIC = b"SADB"
SADB_VERSION = 1


@dataclass(frozen=True)
class CoresetSelection:
    """Result of greedy k-center selection.

    ``radii[i]`` is the maximum over all points of the distance to the
    nearest of the first ``i + 1`` selected points; it is non-increasing.
    """

    selected: tuple[int, ...]
    radii: tuple[float, ...]


def greedy_coreset(points: np.ndarray, k: int) -> CoresetSelection:
    """Greedy k-center selection with deterministic tie-breaking.

    The seed point is the one farthest from the centroid; every later pick
    maximizes the minimum L2 distance to the already-selected set.  Ties
    always go to the lowest index, so the output is a pure function of the
    input.
    """
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2:
        raise ValueError(f"points must be a 2-D matrix, got shape {pts.shape}")
    n = pts.shape[0]
    if n == 0:
        raise ValueError("cannot select from an empty point set")
    if not np.isfinite(pts).all():
        raise ValueError("points contain non-finite values")
    if not 1 <= k <= n:
        raise ValueError(f"k must satisfy 1 <= k <= {n}, got {k}")

    centroid = pts.mean(axis=0)
    seed = int(np.argmax(((pts - centroid) ** 2).sum(axis=1)))
    selected = [seed]
    chosen = np.zeros(n, dtype=bool)
    chosen[seed] = True
    min_d2 = ((pts - pts[seed]) ** 2).sum(axis=1)
    radii = [float(np.sqrt(min_d2.max()))]
    for _ in range(1, k):
        # Selected points sit at distance 0; mask them below any real
        # distance so argmax lands on the lowest-index unselected point.
        nxt = int(np.argmax(np.where(chosen, -1.0, min_d2)))
        selected.append(nxt)
        chosen[nxt] = True
        np.minimum(min_d2, ((pts - pts[nxt]) ** 2).sum(axis=1), out=min_d2)
        radii.append(float(np.sqrt(min_d2.max())))
    return CoresetSelection(selected=tuple(selected), radii=tuple(radii))


def select_references(train: Sequence[ImageFeatures], k: int) -> list[str]:
    """Image ids of the k most coverage-diverse training images.

    Selection runs over the global (CLS) embeddings and returns ids in
    selection order.
    """
    if len(train) < k:
        raise ValueError(f"need at least k={k} training images, got {len(train)}")
    dims = {f.dim for f in train}
    if len(dims) != 1:
        raise ValidationError(f"training images disagree on feature dim: {sorted(dims)}")
    cls_matrix = np.stack([f.cls for f in train]).astype(np.float64)
    selection = greedy_coreset(cls_matrix, k)
    return [train[i].image_id for i in selection.selected]


@dataclass(frozen=True, eq=False)
class MemoryBank:
    """Per-layer matrices of unit-normalized reference patch vectors."""

    category: str
    layers: dict[int, np.ndarray] = field(repr=False)  # layer_index -> (n, dim) float32
    source_ids: tuple[str, ...]
    config_hash: str  # hex sha256 of the producing CategoryConfig
    warnings: tuple[str, ...] = ()

    def layer_indices(self) -> tuple[int, ...]:
        return tuple(sorted(self.layers))

    @property
    def dim(self) -> int:
        return int(next(iter(self.layers.values())).shape[1])


def _normalized_rows(rows: np.ndarray) -> np.ndarray:
    """Unit-normalize rows in float64, drop exact zero vectors, cast float32."""
    rows64 = rows.astype(np.float64)
    norms = np.linalg.norm(rows64, axis=1)
    keep = norms > 0.0
    unit = rows64[keep] / norms[keep, None]
    return unit.astype(np.float32)


def build_memory_bank(
    refs: Sequence[ImageFeatures],
    masks: Sequence | None,
    config: CategoryConfig,
) -> MemoryBank:
    """Stack the references' patch vectors into one matrix per layer.

    Row order is (reference order, then row-major grid order).  When
    ``masks`` is given, only foreground patches contribute; a mask that
    would remove every patch of an image falls back to that image's full
    grid and is recorded as a warning.  Exact zero patch vectors are
    dropped because their direction is undefined.
    """
    if not refs:
        raise ValueError("refs must be non-empty")
    if masks is not None and len(masks) != len(refs):
        raise ValidationError(f"got {len(masks)} masks for {len(refs)} references")
    layer_set = refs[0].layer_indices()
    dim = refs[0].dim
    for f in refs[1:]:
        if f.layer_indices() != layer_set:
            raise ValidationError(
                f"{f.image_id}: layer set {f.layer_indices()} != {layer_set}"
            )
        if f.dim != dim:
            raise ValidationError(f"{f.image_id}: dim {f.dim} != {dim}")

    warnings: list[str] = []
    flat_masks: list[np.ndarray | None] = []
    for f, mask in zip(refs, masks if masks is not None else [None] * len(refs)):
        if mask is None:
            flat_masks.append(None)
            continue
        grid = np.asarray(mask.grid, dtype=bool)
        if grid.shape != f.grid_size:
            raise ValidationError(
                f"{f.image_id}: mask shape {grid.shape} != grid {f.grid_size}"
            )
        if not grid.any():
            msg = f"{f.image_id}: foreground mask empty, keeping full grid"
            warnings.append(msg)
            log.warning(msg)
            flat_masks.append(None)
        else:
            flat_masks.append(grid.reshape(-1))

    layers: dict[int, np.ndarray] = {}
    for layer_index in layer_set:
        parts = []
        for f, flat in zip(refs, flat_masks):
            vectors = f.layer(layer_index).flat()
            parts.append(vectors if flat is None else vectors[flat])
        layers[layer_index] = _normalized_rows(np.concatenate(parts, axis=0))
        if layers[layer_index].shape[0] == 0:
            raise ValidationError(
                f"layer {layer_index}: no usable patch vectors (all zero)"
            )
    return MemoryBank(
        category=config.category,
        layers=layers,
        source_ids=tuple(f.image_id for f in refs),
        config_hash=config.hash_hex(),
        warnings=tuple(warnings),
    )


def serialize_bank(bank: MemoryBank) -> bytes:
    out = bytearray()
    out += SADB_MAGIC
    out += struct.pack("<H", SADB_VERSION)
    out += bytes.fromhex(bank.config_hash)
    cat = bank.category.encode("utf-8")
    out += struct.pack("<I", len(cat))
    out += cat
    out += struct.pack("<IB", bank.dim, len(bank.layers))
    for layer_index in bank.layer_indices():
        matrix = bank.layers[layer_index]
        out += struct.pack("<HI", layer_index, matrix.shape[0])
        out += np.ascontiguousarray(matrix, dtype="<f4").tobytes()
    return bytes(out)


def sources_sidecar_path(bank_path: str | os.PathLike) -> Path:
    return Path(str(bank_path) + ".sources.jsonl")


def save_bank(bank: MemoryBank, path: str | os.PathLike) -> None:
    """Persist the bank plus a JSON-lines sidecar of its source image ids."""
    atomic_write_bytes(path, serialize_bank(bank))
    lines = [json.dumps({"image_id": i}, sort_keys=True) for i in bank.source_ids]
    lines += [json.dumps({"warning": w}, sort_keys=True) for w in bank.warnings]
    atomic_write_bytes(sources_sidecar_path(path), ("\n".join(lines) + "\n").encode())


def load_bank(path: str | os.PathLike) -> MemoryBank:
    path = Path(path)
    cur = _Cursor(path.read_bytes(), str(path))
    magic = cur.take(4)
    if magic != SADB_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}, expected {SADB_MAGIC!r}")
    (version,) = cur.unpack("<H")
    if version != SADB_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    config_hash = cur.take(32).hex()
    (cat_len,) = cur.unpack("<I")
    try:
        category = cur.take(cat_len).decode("utf-8")
    except UnicodeDecodeError as exc:
        raise CorruptionError(f"{path}: category is not valid UTF-8") from exc
    dim, n_layers = cur.unpack("<IB")
    if dim == 0 or n_layers == 0:
        raise ValidationError(f"{path}: empty bank")
    layers: dict[int, np.ndarray] = {}
    for _ in range(n_layers):
        layer_index, n_rows = cur.unpack("<HI")
        if layer_index in layers:
            raise ValidationError(f"{path}: duplicate layer {layer_index}")
        data = np.frombuffer(cur.take(4 * n_rows * dim), dtype="<f4").copy()
        layers[layer_index] = data.reshape(n_rows, dim)
    if cur.remaining:
        raise CorruptionError(f"{path}: {cur.remaining} trailing bytes")

    source_ids: list[str] = []
    warnings: list[str] = []
    sidecar = sources_sidecar_path(path)
    if sidecar.exists():
        for line in sidecar.read_text().splitlines():
            if not line.strip():
                continue
            record = json.loads(line)
            if "image_id" in record:
                source_ids.append(record["image_id"])
            elif "warning" in record:
                warnings.append(record["warning"])
    return MemoryBank(
        category=category,
        layers=layers,
        source_ids=tuple(source_ids),
        config_hash=config_hash,
        warnings=tuple(warnings),
    )
