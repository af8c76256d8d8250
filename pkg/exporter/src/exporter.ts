/**
 * Walks a dataset category, extracts features for every image, and writes
 * one SADF bundle per image plus a manifest of produced files.
 */

import * as fs from "fs";
import * as path from "path";

import { FeatureExtractor } from "./backbone";
import { DEFAULT_PATCH_SIZE } from "./geometry";
import { preprocessImage } from "./image";
import { FeatureBundle, serializeBundle } from "./sadf";

export const DEFAULT_LAYERS = [6, 12, 18, 24];

export interface ExportJob {
  datasetRoot: string;
  outputRoot: string;
  categories: string[];
  shortSides: Record<string, number>;
  defaultShortSide: number;
  layerIndices: number[];
  patchSize: number;
  batchSize: number;
  device: string;
}

export interface ExportedFile {
  imageId: string;
  path: string;
  originalSize: [number, number];
  resizedSize: [number, number];
  gridSize: [number, number];
}

export interface SkippedFile {
  path: string;
  reason: string;
}

export interface ExportManifest {
  category: string;
  backbone: string;
  dim: number;
  patchSize: number;
  layerIndices: number[];
  shortSide: number;
  files: ExportedFile[];
  skipped: SkippedFile[];
}

export function defaultJob(partial: Partial<ExportJob>): ExportJob {
  const job: ExportJob = {
    datasetRoot: partial.datasetRoot ?? ".",
    outputRoot: partial.outputRoot ?? "./features",
    categories: partial.categories ?? [],
    shortSides: partial.shortSides ?? { sheet_metal: 448 },
    defaultShortSide: partial.defaultShortSide ?? 672,
    layerIndices: partial.layerIndices ?? DEFAULT_LAYERS,
    patchSize: partial.patchSize ?? DEFAULT_PATCH_SIZE,
    batchSize: partial.batchSize ?? 1,
    device: partial.device ?? "cpu",
  };
  for (const layer of job.layerIndices) {
    if (!Number.isInteger(layer) || layer < 1 || layer > 24) {
      throw new Error(`layer indices must be within [1, 24], got ${layer}`);
    }
  }
  for (const [category, shortSide] of Object.entries(job.shortSides).concat([
    ["<default>", job.defaultShortSide],
  ] as [string, number][])) {
    if (shortSide % job.patchSize !== 0) {
      throw new Error(
        `short side for ${category} must be a multiple of ${job.patchSize}, got ${shortSide}`
      );
    }
  }
  return job;
}

function* walkImages(root: string): Generator<string> {
  if (!fs.existsSync(root)) return;
  const entries = fs.readdirSync(root, { withFileTypes: true }).sort((a, b) =>
    a.name.localeCompare(b.name)
  );
  for (const entry of entries) {
    const full = path.join(root, entry.name);
    if (entry.isDirectory()) {
      if (entry.name === "ground_truth") continue; // masks are not inputs
      yield* walkImages(full);
    } else if (/\.png$/i.test(entry.name)) {
      yield full;
    }
  }
}

function atomicWrite(target: string, data: Buffer | string): void {
  fs.mkdirSync(path.dirname(target), { recursive: true });
  const tmp = `${target}.${process.pid}.tmp`;
  fs.writeFileSync(tmp, data);
  fs.renameSync(tmp, target);
}

export async function exportCategory(
  job: ExportJob,
  category: string,
  backbone: FeatureExtractor,
  log: (message: string) => void = () => undefined
): Promise<ExportManifest> {
  const shortSide = job.shortSides[category] ?? job.defaultShortSide;
  const categoryRoot = path.join(job.datasetRoot, category);
  if (!fs.existsSync(categoryRoot)) {
    throw new Error(`category directory not found: ${categoryRoot}`);
  }
  const manifest: ExportManifest = {
    category,
    backbone: backbone.name,
    dim: backbone.dim,
    patchSize: job.patchSize,
    layerIndices: job.layerIndices,
    shortSide,
    files: [],
    skipped: [],
  };
  for (const imagePath of walkImages(categoryRoot)) {
    const relative = path.relative(job.datasetRoot, imagePath);
    const imageId = relative.replace(/\\/g, "/").replace(/\.png$/i, "");
    let bundle: FeatureBundle;
    try {
      const preprocessed = preprocessImage(imagePath, shortSide, job.patchSize);
      const features = await backbone.extract(preprocessed, job.layerIndices, job.patchSize);
      bundle = {
        imageId,
        originalSize: preprocessed.originalSize,
        resizedSize: preprocessed.resizedSize,
        patchSize: job.patchSize,
        cls: features.cls,
        layers: features.layers.map((layer) => ({ ...layer, dim: backbone.dim })),
      };
    } catch (err) {
      const reason = (err as Error).message;
      if (/cannot load model weights|@tensorflow\/tfjs/.test(reason)) {
        throw err; // missing weights abort the whole export
      }
      manifest.skipped.push({ path: imagePath, reason });
      log(`skipping unreadable image ${imagePath}: ${reason}`);
      continue;
    }
    const outPath = path.join(job.outputRoot, `${imageId}.sadf`);
    atomicWrite(outPath, serializeBundle(bundle));
    manifest.files.push({
      imageId,
      path: outPath,
      originalSize: [bundle.originalSize.height, bundle.originalSize.width],
      resizedSize: [bundle.resizedSize.height, bundle.resizedSize.width],
      gridSize: [
        bundle.resizedSize.height / job.patchSize,
        bundle.resizedSize.width / job.patchSize,
      ],
    });
    log(`${imageId}: ${bundle.originalSize.height}x${bundle.originalSize.width} -> ` +
      `${bundle.resizedSize.height}x${bundle.resizedSize.width}`);
  }
  const manifestPath = path.join(job.outputRoot, category, "export_manifest.json");
  atomicWrite(manifestPath, JSON.stringify(manifest, null, 2) + "\n");
  return manifest;
}
