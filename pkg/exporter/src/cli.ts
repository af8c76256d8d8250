#!/usr/bin/env node
/**
 * Export features for dataset categories into SADF files.
 *
 * Usage:
 *   dino-sadf-export --dataset-root data --output features \
 *     --category rice --category vial [--short-side 672] [--batch-size 1] \
 *     [--device cpu] [--backbone tfjs --model path/to/model.json]
 */

import { makeBackbone } from "./backbone";
import { defaultJob, exportCategory } from "./exporter";

interface CliArgs {
  datasetRoot?: string;
  output?: string;
  categories: string[];
  shortSide?: number;
  batchSize: number;
  device: string;
  backbone: string;
  model?: string;
  dim: number;
  layers?: number[];
}

function parseArgs(argv: string[]): CliArgs {
  const args: CliArgs = {
    categories: [],
    batchSize: 1,
    device: "cpu",
    backbone: "tfjs",
    dim: 1024,
  };
  for (let i = 0; i < argv.length; i++) {
    const flag = argv[i];
    const next = () => {
      if (i + 1 >= argv.length) throw new Error(`missing value for ${flag}`);
      return argv[++i];
    };
    switch (flag) {
      case "--dataset-root":
        args.datasetRoot = next();
        break;
      case "--output":
        args.output = next();
        break;
      case "--category":
        args.categories.push(next());
        break;
      case "--short-side":
        args.shortSide = Number(next());
        break;
      case "--batch-size":
        args.batchSize = Number(next());
        break;
      case "--device":
        args.device = next();
        break;
      case "--backbone":
        args.backbone = next();
        break;
      case "--model":
        args.model = next();
        break;
      case "--dim":
        args.dim = Number(next());
        break;
      case "--layers":
        args.layers = next().split(",").map(Number);
        break;
      case "--help":
      case "-h":
        printUsage();
        process.exit(0);
        break;
      default:
        throw new Error(`unknown flag ${flag}`);
    }
  }
  if (!args.datasetRoot || !args.output || args.categories.length === 0) {
    throw new Error("--dataset-root, --output, and at least one --category are required");
  }
  return args;
}

function printUsage(): void {
  process.stdout.write(
    "dino-sadf-export --dataset-root DIR --output DIR --category NAME...\n" +
      "  [--short-side 672] [--batch-size 1] [--device cpu]\n" +
      "  [--backbone tfjs|synthetic] [--model model.json] [--dim 1024]\n" +
      "  [--layers 6,12,18,24]\n"
  );
}

export async function main(argv: string[]): Promise<number> {
  let args: CliArgs;
  try {
    args = parseArgs(argv);
  } catch (err) {
    process.stderr.write(`dino-sadf-export: ${(err as Error).message}\n`);
    printUsage();
    return 2;
  }
  try {
    const job = defaultJob({
      datasetRoot: args.datasetRoot,
      outputRoot: args.output,
      categories: args.categories,
      layerIndices: args.layers,
      batchSize: args.batchSize,
      device: args.device,
      ...(args.shortSide !== undefined ? { defaultShortSide: args.shortSide, shortSides: {} } : {}),
    });
    const backbone = makeBackbone(args.backbone, args.model, args.dim);
    for (const category of args.categories) {
      const manifest = await exportCategory(job, category, backbone, (message) =>
        process.stderr.write(`${message}\n`)
      );
      process.stdout.write(
        `${category}: exported ${manifest.files.length} files, ` +
          `skipped ${manifest.skipped.length}\n`
      );
    }
    return 0;
  } catch (err) {
    process.stderr.write(`dino-sadf-export: ${(err as Error).message}\n`);
    return 1;
  }
}

if (require.main === module) {
  main(process.argv.slice(2)).then((code) => {
    process.exitCode = code;
  });
}
