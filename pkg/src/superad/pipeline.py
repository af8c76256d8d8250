"""Pipeline stages over the dataset directory layout.

Each stage reads only persisted artifacts of its predecessors, so any stage
can be rerun in isolation and reproduces a fresh full run bit for bit.
"""

from __future__ import annotations

import io
import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np
from PIL import Image

from .coreset import MemoryBank, build_memory_bank, load_bank, save_bank, select_references
from .errors import ConfigError, DataError, ValidationError
from .features import ImageFeatures, atomic_write_bytes, read_feature_file
from .fgmask import compute_foreground_mask, write_mask_pgm
from .manifest import RunManifest
from .metrics import (
    EvalResult,
    aupro_fpr_limit,
    auroc_fpr_limit,
    best_image_threshold,
    best_threshold,
    class_f1,
    pixel_f1,
    save_report,
)
from .scorer import fill_holes, read_anomaly_map, score_image, write_anomaly_map

log = logging.getLogger(__name__)

LABELS = ("good", "bad")


def worker_count() -> int:
    value = os.environ.get("SUPERAD_WORKERS", "")
    if value:
        try:
            return max(1, int(value))
        except ValueError as exc:
            raise ConfigError(f"SUPERAD_WORKERS must be an integer, got {value!r}") from exc
    return min(8, os.cpu_count() or 1)


def list_feature_files(manifest: RunManifest, category: str, split: str) -> list[Path]:
    """All .sadf files of a split, sorted for deterministic ordering."""
    root = manifest.features_dir(category, split)
    if not root.is_dir():
        return []
    return sorted(root.rglob("*.sadf"))


def _load_features(path: Path) -> ImageFeatures:
    try:
        return read_feature_file(path)
    except DataError as exc:
        raise type(exc)(f"feature file {path}: {exc}") from exc


def cmd_build_bank(manifest: RunManifest, category: str, debug_masks: bool = False) -> Path:
    """Select references, optionally mask them, and persist the bank."""
    config = manifest.configs[category]
    paths = list_feature_files(manifest, category, "train")
    if not paths:
        raise DataError(
            f"no training feature files for {category!r}; expected .sadf files under "
            f"{manifest.features_dir(category, 'train')}"
        )
    train = [_load_features(p) for p in paths]
    if len(train) < config.k_refs:
        raise ValueError(
            f"{category}: need at least k_refs={config.k_refs} training images, got {len(train)}"
        )
    selected_ids = select_references(train, config.k_refs)
    by_id = {f.image_id: f for f in train}
    refs = [by_id[i] for i in selected_ids]
    log.info("%s: selected %d references: %s", category, len(refs), selected_ids)
    masks = None
    if config.use_fg_mask:
        masks = [compute_foreground_mask(f, config) for f in refs]
        if debug_masks:
            for ref, mask in zip(refs, masks):
                out = manifest.output_root / "banks" / f"{category}_masks" / (
                    Path(ref.image_id).name + ".pgm"
                )
                write_mask_pgm(mask.grid, out)
    bank = build_memory_bank(refs, masks, config)
    bank_path = manifest.bank_path(category)
    save_bank(bank, bank_path)
    log.info("%s: bank written to %s", category, bank_path)
    return bank_path


def _score_one(
    manifest: RunManifest, category: str, split: str, bank: MemoryBank, path: Path, debug: bool
) -> tuple[str, float]:
    features = _load_features(path)
    result = score_image(features, bank, manifest.configs[category], debug=debug)
    rel = path.relative_to(manifest.features_dir(category, split)).with_suffix("")
    out = manifest.maps_dir(category, split) / rel.with_suffix(".anom")
    write_anomaly_map(result.full_res, out)
    if debug and result.grid_maps:
        for layer_index, grid_map in sorted(result.grid_maps.items()):
            write_anomaly_map(grid_map, out.with_suffix(f".layer{layer_index}.anom"))
    return features.image_id, result.image_score


def cmd_score(
    manifest: RunManifest, category: str, split: str, debug_maps: bool = False
) -> Path:
    """Score every image of a split; write .anom maps and a score index."""
    config = manifest.configs[category]
    bank_path = manifest.bank_path(category)
    if not bank_path.exists():
        raise DataError(f"memory bank not found at {bank_path}; run build-bank first")
    bank = load_bank(bank_path)
    if bank.config_hash != config.hash_hex():
        raise ConfigError(
            f"{category}: bank at {bank_path} was built with a different configuration "
            f"(bank {bank.config_hash[:12]}, manifest {config.hash_hex()[:12]}); "
            "rebuild the bank or align the flags"
        )
    paths = list_feature_files(manifest, category, split)
    results: list[tuple[str, float]] = []
    if paths:
        with ThreadPoolExecutor(max_workers=worker_count()) as pool:
            futures = [
                pool.submit(_score_one, manifest, category, split, bank, p, debug_maps)
                for p in paths
            ]
            results = [f.result() for f in futures]
    results.sort()
    index_path = manifest.scores_index_path(category, split)
    lines = [
        json.dumps({"image_id": i, "image_score": s}, sort_keys=True) for i, s in results
    ]
    atomic_write_bytes(index_path, ("\n".join(lines) + "\n" if lines else "").encode())
    log.info("%s/%s: scored %d images", category, split, len(results))
    return index_path


def _gt_mask_path(manifest: RunManifest, category: str, split: str, stem: str) -> Path | None:
    if manifest.dataset_root is None:
        return None
    base = manifest.dataset_root / category / split / "ground_truth" / "bad"
    for name in (f"{stem}.png", f"{stem}_mask.png"):
        candidate = base / name
        if candidate.exists():
            return candidate
    return None


def _load_gt_mask(path: Path, shape: tuple[int, int]) -> np.ndarray:
    with Image.open(path) as img:
        mask = np.asarray(img.convert("L")) > 0
    if mask.shape != shape:
        raise ValidationError(f"{path}: ground truth {mask.shape} != map {shape}")
    return mask


def _write_binarized(mask: np.ndarray, path: Path) -> None:
    image = Image.fromarray(np.where(mask, 255, 0).astype(np.uint8), mode="L")
    buf = io.BytesIO()
    image.save(buf, format="PNG")
    atomic_write_bytes(path, buf.getvalue())


def cmd_evaluate(
    manifest: RunManifest,
    category: str,
    split: str,
    threshold: float | None = None,
    image_threshold: float | None = None,
) -> EvalResult:
    """Metrics over a scored split with ground truth; writes the JSON report.

    Passing ``threshold`` freezes the pixel threshold instead of sweeping,
    which is how a threshold chosen on the public split is reused elsewhere.
    """
    config = manifest.configs[category]
    maps_dir = manifest.maps_dir(category, split)
    map_paths = sorted(p for p in maps_dir.rglob("*.anom") if ".layer" not in p.name)
    if not map_paths:
        raise DataError(f"no anomaly maps under {maps_dir}; run score first")

    maps, gts, image_labels, image_scores, rel_paths = [], [], [], [], []
    missing: list[str] = []
    for path in map_paths:
        rel = path.relative_to(maps_dir).with_suffix("")
        label = rel.parts[0] if rel.parts[:1] and rel.parts[0] in LABELS else None
        anomaly_map = read_anomaly_map(path)
        if label == "bad":
            gt_path = _gt_mask_path(manifest, category, split, rel.parts[-1])
            if gt_path is None:
                missing.append(
                    str(
                        (manifest.dataset_root or Path("<dataset-root>"))
                        / category
                        / split
                        / "ground_truth"
                        / "bad"
                        / f"{rel.parts[-1]}.png"
                    )
                )
                continue
            gts.append(_load_gt_mask(gt_path, anomaly_map.shape))
        else:
            gts.append(np.zeros(anomaly_map.shape, dtype=bool))
        maps.append(anomaly_map)
        image_labels.append(label == "bad")
        image_scores.append(float(anomaly_map.max()))
        rel_paths.append(rel)
    if missing:
        raise DataError(
            "missing ground-truth masks:\n  " + "\n  ".join(missing)
        )

    if threshold is None:
        threshold, _ = best_threshold(maps, gts, hole_fill=config.use_hole_fill)
    preds = [np.asarray(m) > threshold for m in maps]
    if config.use_hole_fill:
        preds = [fill_holes(p) for p in preds]
    f1, precision, recall, counts = pixel_f1(preds, gts)
    auroc = auroc_fpr_limit(maps, gts, limit=0.05)
    aupro = aupro_fpr_limit(maps, gts, limit=0.05)
    if image_threshold is None:
        if any(image_labels) and not all(image_labels):
            image_threshold, _ = best_image_threshold(image_scores, image_labels)
        else:
            image_threshold = float(max(image_scores))
    cls_f1 = class_f1(image_scores, image_labels, image_threshold)

    result = EvalResult(
        category=category,
        threshold=float(threshold),
        pixel_f1=f1,
        precision=precision,
        recall=recall,
        auroc_limit=auroc,
        aupro_limit=aupro,
        class_f1=cls_f1,
        image_threshold=float(image_threshold),
        counts=counts,
    )
    save_report(result, manifest.report_path(category))
    for rel, pred in zip(rel_paths, preds):
        out = manifest.masks_dir(category, split) / rel.with_suffix(".png")
        _write_binarized(pred, out)
    log.info(
        "%s/%s: f1=%.4f auroc005=%.4f aupro005=%.4f classf1=%.4f t=%.6g",
        category,
        split,
        f1,
        auroc,
        aupro,
        cls_f1,
        threshold,
    )
    return result
