"""Run manifest: dataset layout, per-category configuration, output paths."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

from . import __version__
from .errors import ConfigError
from .features import CategoryConfig

CATEGORIES = (
    "can",
    "fabric",
    "fruit_jelly",
    "rice",
    "sheet_metal",
    "vial",
    "wallplugs",
    "walnuts",
)

_SHORT_SIDES = {"sheet_metal": 448}
_FG_MASK_CATEGORIES = frozenset({"vial", "wallplugs"})
_HOLE_FILL_CATEGORIES = frozenset({"fabric", "walnuts"})

TRAIN_SPLIT = "train"
DEFAULT_EVAL_SPLIT = "test_public"


def default_config(category: str, **overrides) -> CategoryConfig:
    """Built-in per-category settings, optionally overridden."""
    if category not in CATEGORIES:
        raise ConfigError(f"unknown category {category!r}, expected one of {sorted(CATEGORIES)}")
    settings: dict = {
        "category": category,
        "short_side": _SHORT_SIDES.get(category, 672),
        "use_fg_mask": category in _FG_MASK_CATEGORIES,
        "use_hole_fill": category in _HOLE_FILL_CATEGORIES,
    }
    valid = {f for f in CategoryConfig.__dataclass_fields__ if f != "category"}
    for key, value in overrides.items():
        if key not in valid:
            raise ConfigError(f"unknown config key {key!r} for category {category!r}")
        settings[key] = value
    return CategoryConfig(**settings)


def load_config_overrides(path: str | Path) -> dict:
    """Load the structured config document: {"*": {...}, "<category>": {...}}."""
    try:
        with open(path, "r", encoding="utf-8") as handle:
            doc = json.load(handle)
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
    if not isinstance(doc, dict) or not all(isinstance(v, dict) for v in doc.values()):
        raise ConfigError(f"config file {path} must map category names to key/value tables")
    for name in doc:
        if name != "*" and name not in CATEGORIES:
            raise ConfigError(f"config file {path}: unknown category {name!r}")
    return doc


@dataclass(frozen=True)
class RunManifest:
    """Everything one pipeline run needs, resolved and hashable."""

    features_root: Path
    output_root: Path
    dataset_root: Path | None
    categories: tuple[str, ...]
    configs: dict[str, CategoryConfig] = field(repr=False)
    version: str = __version__

    @property
    def config_hash(self) -> str:
        """Digest of the canonicalized per-category configuration document."""
        doc = {c: self.configs[c].as_dict() for c in self.categories}
        canonical = json.dumps(doc, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()

    def bank_path(self, category: str) -> Path:
        return self.output_root / "banks" / f"{category}.sadb"

    def maps_dir(self, category: str, split: str) -> Path:
        return self.output_root / "maps" / category / split

    def scores_index_path(self, category: str, split: str) -> Path:
        return self.maps_dir(category, split) / "image_scores.jsonl"

    def report_path(self, category: str) -> Path:
        return self.output_root / "reports" / f"{category}.json"

    def summary_path(self) -> Path:
        return self.output_root / "reports" / "summary.csv"

    def masks_dir(self, category: str, split: str) -> Path:
        return self.output_root / "masks" / category / split

    def features_dir(self, category: str, split: str) -> Path:
        return self.features_root / category / split


def build_manifest(
    features_root: str | Path,
    output_root: str | Path,
    dataset_root: str | Path | None = None,
    categories: list[str] | None = None,
    overrides: dict | None = None,
    sigma: float | None = None,
) -> RunManifest:
    """Resolve categories and per-category configs into a manifest.

    Without an explicit category list, categories present under the
    features root are used.  ``sigma`` overrides smoothing for every
    category and participates in the config hash like any other setting.
    """
    features_root = Path(features_root)
    if categories is None:
        categories = sorted(
            p.name for p in features_root.iterdir() if p.is_dir() and p.name in CATEGORIES
        ) if features_root.is_dir() else []
        if not categories:
            raise ConfigError(
                f"no categories found under {features_root}; pass --category explicitly"
            )
    bad = sorted(set(categories) - set(CATEGORIES))
    if bad:
        raise ConfigError(f"unknown categories {bad}, expected one of {sorted(CATEGORIES)}")
    overrides = overrides or {}
    configs = {}
    for category in categories:
        merged = dict(overrides.get("*", {}))
        merged.update(overrides.get(category, {}))
        if sigma is not None:
            merged["smoothing_sigma"] = sigma
        configs[category] = default_config(category, **merged)
    return RunManifest(
        features_root=features_root,
        output_root=Path(output_root),
        dataset_root=Path(dataset_root) if dataset_root is not None else None,
        categories=tuple(categories),
        configs=configs,
    )
