"""Feature bundles, per-category configuration, and the SADF on-disk format.

A feature bundle holds one image's global (CLS) embedding plus the patch
feature grids of the configured transformer layers.  The binary layout is
shared with the exporter and must stay bit-exact: see ``read_feature_file``
and ``write_feature_file``.
"""

from __future__ import annotations

import hashlib
import io
import json
import os
import struct
import tempfile
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from .errors import ConfigError, CorruptionError, FormatError, ValidationError

SADF_MAGIC = b"SADF"
SADF_VERSION = 1

DEFAULT_PATCH_SIZE = 14
DEFAULT_LAYER_INDICES = (6, 12, 18, 24)
DEFAULT_SHORT_SIDE = 672


def preprocess_dims(
    original: tuple[int, int], short_side: int, patch_size: int = DEFAULT_PATCH_SIZE
) -> tuple[int, int]:
    """Resized (height, width) for an aspect-preserving short-side resize.

    The short side lands exactly on ``short_side``; the long side is the
    aspect-preserving length rounded to the nearest multiple of
    ``patch_size``, with ties rounding up.  Both outputs are therefore
    multiples of ``patch_size``.
    """
    h, w = int(original[0]), int(original[1])
    if h <= 0 or w <= 0:
        raise ValueError(f"image dimensions must be positive, got {(h, w)}")
    if patch_size <= 0:
        raise ValueError(f"patch_size must be positive, got {patch_size}")
    if short_side <= 0 or short_side % patch_size != 0:
        raise ValueError(
            f"short_side must be a positive multiple of patch_size, got {short_side}"
        )
    short, long = (h, w) if h <= w else (w, h)
    # round(short_side * long / (short * patch_size)) with ties up, in exact
    # integer arithmetic: floor((2*a + b) / (2*b)) computes round-half-up(a/b).
    n_patches = (2 * short_side * long + short * patch_size) // (2 * short * patch_size)
    long_px = n_patches * patch_size
    return (short_side, long_px) if h <= w else (long_px, short_side)


def _snap_to_multiple(value: int, patch_size: int) -> int:
    n = max(1, (2 * value + patch_size) // (2 * patch_size))
    return n * patch_size


@dataclass(frozen=True)
class CategoryConfig:
    """Per-category pipeline settings.

    ``short_side`` is snapped to the nearest positive multiple of
    ``patch_size`` on construction.
    """

    category: str
    short_side: int = DEFAULT_SHORT_SIDE
    layer_indices: tuple[int, ...] = DEFAULT_LAYER_INDICES
    k_refs: int = 16
    use_fg_mask: bool = False
    use_hole_fill: bool = False
    tau: float = 1.0
    kernel: int = 3
    pca_components: int = 1
    pca_standardize: bool = False
    smoothing_sigma: float = 0.0
    mask_layer: int = 6
    patch_size: int = DEFAULT_PATCH_SIZE

    def __post_init__(self):
        if not self.category:
            raise ConfigError("category name must be non-empty")
        if self.patch_size < 1:
            raise ConfigError(f"patch_size must be >= 1, got {self.patch_size}")
        if self.short_side < 1:
            raise ConfigError(f"short_side must be positive, got {self.short_side}")
        object.__setattr__(
            self, "short_side", _snap_to_multiple(int(self.short_side), self.patch_size)
        )
        layers = tuple(int(i) for i in self.layer_indices)
        if not layers or sorted(set(layers)) != list(layers):
            raise ConfigError(
                f"layer_indices must be unique and ascending, got {self.layer_indices}"
            )
        object.__setattr__(self, "layer_indices", layers)
        if self.k_refs < 1:
            raise ConfigError(f"k_refs must be >= 1, got {self.k_refs}")
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise ConfigError(f"kernel must be odd and >= 1, got {self.kernel}")
        if self.pca_components != 1:
            raise ConfigError("only pca_components=1 is supported")
        if not np.isfinite(self.tau):
            raise ConfigError(f"tau must be finite, got {self.tau}")
        if self.smoothing_sigma < 0:
            raise ConfigError(f"smoothing_sigma must be >= 0, got {self.smoothing_sigma}")
        if self.mask_layer not in layers:
            raise ConfigError(
                f"mask_layer {self.mask_layer} not among layer_indices {layers}"
            )

    def as_dict(self) -> dict:
        out = {}
        for f in fields(self):
            value = getattr(self, f.name)
            out[f.name] = list(value) if isinstance(value, tuple) else value
        return out

    def hash_bytes(self) -> bytes:
        canonical = json.dumps(self.as_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).digest()

    def hash_hex(self) -> str:
        return self.hash_bytes().hex()


@dataclass(frozen=True, eq=False)
class PatchFeatureGrid:
    """One layer's patch features on a 2-D grid, row-major, float32."""

    layer_index: int
    grid_h: int
    grid_w: int
    dim: int
    values: np.ndarray = field(repr=False)  # shape (grid_h, grid_w, dim)

    def flat(self) -> np.ndarray:
        """Patch vectors as an (grid_h * grid_w, dim) view, row-major."""
        return self.values.reshape(-1, self.dim)


@dataclass(frozen=True, eq=False)
class ImageFeatures:
    """All extracted features of one image plus its geometry metadata."""

    image_id: str
    original_size: tuple[int, int]
    resized_size: tuple[int, int]
    patch_size: int
    cls: np.ndarray = field(repr=False)
    layers: tuple[PatchFeatureGrid, ...] = field(repr=False)

    @property
    def dim(self) -> int:
        return int(self.cls.shape[0])

    @property
    def grid_size(self) -> tuple[int, int]:
        return self.layers[0].grid_h, self.layers[0].grid_w

    def layer(self, layer_index: int) -> PatchFeatureGrid:
        for grid in self.layers:
            if grid.layer_index == layer_index:
                return grid
        raise ValidationError(
            f"{self.image_id}: layer {layer_index} not present "
            f"(have {[g.layer_index for g in self.layers]})"
        )

    def layer_indices(self) -> tuple[int, ...]:
        return tuple(g.layer_index for g in self.layers)


def validate_features(f: ImageFeatures) -> None:
    """Check every ImageFeatures invariant; raise ValidationError on failure."""
    ident = f.image_id or "<features>"
    oh, ow = f.original_size
    rh, rw = f.resized_size
    if f.patch_size < 1:
        raise ValidationError(f"{ident}: patch_size must be >= 1, got {f.patch_size}")
    if oh < 1 or ow < 1:
        raise ValidationError(f"{ident}: original_size must be positive, got {(oh, ow)}")
    if rh < 1 or rw < 1 or rh % f.patch_size or rw % f.patch_size:
        raise ValidationError(
            f"{ident}: resized_size must be positive multiples of patch_size "
            f"{f.patch_size}, got {(rh, rw)}"
        )
    if f.cls.ndim != 1 or f.cls.shape[0] < 1:
        raise ValidationError(f"{ident}: cls must be a non-empty vector")
    if f.cls.dtype != np.float32:
        raise ValidationError(f"{ident}: cls must be float32, got {f.cls.dtype}")
    if not np.isfinite(f.cls).all():
        raise ValidationError(f"{ident}: cls contains non-finite values")
    if not f.layers:
        raise ValidationError(f"{ident}: at least one feature layer is required")
    indices = [g.layer_index for g in f.layers]
    if sorted(set(indices)) != indices:
        raise ValidationError(f"{ident}: layer indices must be unique and ascending, got {indices}")
    expect_h, expect_w = rh // f.patch_size, rw // f.patch_size
    dim = f.dim
    for g in f.layers:
        if g.layer_index < 1:
            raise ValidationError(f"{ident}: layer index must be >= 1, got {g.layer_index}")
        if (g.grid_h, g.grid_w) != (expect_h, expect_w):
            raise ValidationError(
                f"{ident}: layer {g.layer_index} grid {(g.grid_h, g.grid_w)} does not "
                f"match resized/patch_size geometry {(expect_h, expect_w)}"
            )
        if g.dim != dim:
            raise ValidationError(
                f"{ident}: layer {g.layer_index} dim {g.dim} != cls dim {dim}"
            )
        if g.values.shape != (g.grid_h, g.grid_w, g.dim):
            raise ValidationError(
                f"{ident}: layer {g.layer_index} buffer shape {g.values.shape} != "
                f"{(g.grid_h, g.grid_w, g.dim)}"
            )
        if g.values.dtype != np.float32:
            raise ValidationError(
                f"{ident}: layer {g.layer_index} must be float32, got {g.values.dtype}"
            )
        if not np.isfinite(g.values).all():
            raise ValidationError(f"{ident}: layer {g.layer_index} contains non-finite values")


def features_equal(a: ImageFeatures, b: ImageFeatures) -> bool:
    """Bit-level equality of two bundles."""
    if (a.image_id, a.original_size, a.resized_size, a.patch_size) != (
        b.image_id,
        b.original_size,
        b.resized_size,
        b.patch_size,
    ):
        return False
    if a.cls.tobytes() != b.cls.tobytes():
        return False
    if len(a.layers) != len(b.layers):
        return False
    for ga, gb in zip(a.layers, b.layers):
        if (ga.layer_index, ga.grid_h, ga.grid_w, ga.dim) != (
            gb.layer_index,
            gb.grid_h,
            gb.grid_w,
            gb.dim,
        ):
            return False
        if ga.values.tobytes() != gb.values.tobytes():
            return False
    return True


class _Cursor:
    """Sequential reader over a byte buffer that reports truncation."""

    def __init__(self, data: bytes, source: str):
        self.data = data
        self.pos = 0
        self.source = source

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CorruptionError(
                f"{self.source}: truncated, needed {n} bytes at offset {self.pos}, "
                f"have {len(self.data) - self.pos}"
            )
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    @property
    def remaining(self) -> int:
        return len(self.data) - self.pos


def serialize_features(f: ImageFeatures) -> bytes:
    """Encode a validated bundle in SADF layout (little-endian throughout)."""
    validate_features(f)
    buf = io.BytesIO()
    buf.write(SADF_MAGIC)
    buf.write(struct.pack("<HH", SADF_VERSION, f.patch_size))
    ident = f.image_id.encode("utf-8")
    buf.write(struct.pack("<I", len(ident)))
    buf.write(ident)
    buf.write(struct.pack("<IIII", *f.original_size, *f.resized_size))
    buf.write(struct.pack("<II", f.dim, f.dim))  # dim, cls_len
    buf.write(np.ascontiguousarray(f.cls, dtype="<f4").tobytes())
    buf.write(struct.pack("<B", len(f.layers)))
    for g in f.layers:
        buf.write(struct.pack("<HII", g.layer_index, g.grid_h, g.grid_w))
        buf.write(np.ascontiguousarray(g.values, dtype="<f4").tobytes())
    return buf.getvalue()


def parse_features(data: bytes, source: str = "<bytes>") -> ImageFeatures:
    cur = _Cursor(data, source)
    magic = cur.take(4)
    if magic != SADF_MAGIC:
        raise FormatError(f"{source}: bad magic {magic!r}, expected {SADF_MAGIC!r}")
    version, patch_size = cur.unpack("<HH")
    if version != SADF_VERSION:
        raise FormatError(f"{source}: unsupported version {version}")
    (id_len,) = cur.unpack("<I")
    try:
        image_id = cur.take(id_len).decode("utf-8")
    except UnicodeDecodeError as exc:
        raise CorruptionError(f"{source}: image_id is not valid UTF-8") from exc
    oh, ow, rh, rw = cur.unpack("<IIII")
    dim, cls_len = cur.unpack("<II")
    if cls_len != dim:
        raise ValidationError(f"{source}: cls length {cls_len} != dim {dim}")
    if dim == 0:
        raise ValidationError(f"{source}: dim must be >= 1")
    cls = np.frombuffer(cur.take(4 * cls_len), dtype="<f4").copy()
    (n_layers,) = cur.unpack("<B")
    layers = []
    for _ in range(n_layers):
        layer_index, grid_h, grid_w = cur.unpack("<HII")
        count = grid_h * grid_w * dim
        values = np.frombuffer(cur.take(4 * count), dtype="<f4").copy()
        layers.append(
            PatchFeatureGrid(
                layer_index=layer_index,
                grid_h=grid_h,
                grid_w=grid_w,
                dim=dim,
                values=values.reshape(grid_h, grid_w, dim),
            )
        )
    if cur.remaining:
        raise CorruptionError(f"{source}: {cur.remaining} trailing bytes after last layer")
    features = ImageFeatures(
        image_id=image_id,
        original_size=(oh, ow),
        resized_size=(rh, rw),
        patch_size=patch_size,
        cls=cls,
        layers=tuple(layers),
    )
    validate_features(features)
    return features


def read_feature_file(path: str | os.PathLike) -> ImageFeatures:
    """Load and validate one SADF file."""
    path = Path(path)
    return parse_features(path.read_bytes(), source=str(path))


def atomic_write_bytes(path: str | os.PathLike, data: bytes) -> None:
    """Write via a unique temp name plus atomic rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as handle:
            handle.write(data)
        os.replace(tmp, path)
    except BaseException:
        try:
            os.unlink(tmp)
        except OSError:
            pass
        raise


def write_feature_file(f: ImageFeatures, path: str | os.PathLike) -> None:
    """Validate and persist a bundle; bytes are deterministic for equal input."""
    atomic_write_bytes(path, serialize_features(f))
