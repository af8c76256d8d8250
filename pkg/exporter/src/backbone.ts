/**
 * Feature extraction backends.
 *
 * The production backend runs a converted DINOv2 ViT-L/14 graph model via
 * TensorFlow.js and captures the token sequences after transformer blocks
 * 6/12/18/24.  The synthetic backend derives deterministic features from
 * pixel content; it exists so the export path, the binary format, and the
 * geometry contract can be exercised without model weights.
 */

import { gridSize, Size } from "./geometry";
import { PreprocessedImage } from "./image";

export interface ExtractedLayer {
  layerIndex: number;
  gridH: number;
  gridW: number;
  values: Float32Array; // gridH * gridW * dim, row-major
}

export interface ExtractedFeatures {
  cls: Float32Array;
  layers: ExtractedLayer[];
}

export interface FeatureExtractor {
  readonly name: string;
  readonly dim: number;
  extract(image: PreprocessedImage, layerIndices: number[], patchSize: number): Promise<ExtractedFeatures>;
}

/** Splitmix64-style integer hash, stable across platforms. */
function hash2(a: number, b: number): number {
  let h = BigInt.asUintN(64, BigInt(a) * 0x9e3779b97f4a7c15n + BigInt(b) * 0xbf58476d1ce4e5b9n + 0x94d049bb133111ebn);
  h ^= h >> 30n;
  h = BigInt.asUintN(64, h * 0xbf58476d1ce4e5b9n);
  h ^= h >> 27n;
  h = BigInt.asUintN(64, h * 0x94d049bb133111ebn);
  h ^= h >> 31n;
  return Number(h & 0xffffffffn) / 0x100000000;
}

/**
 * Deterministic stand-in features: each patch token mixes the patch's mean
 * color with a hash of its grid position and the layer index, so features
 * are finite, nonzero, and repeatable bit for bit.
 */
export class SyntheticBackbone implements FeatureExtractor {
  readonly name = "synthetic";

  constructor(readonly dim: number = 1024, private readonly seed: number = 7) {}

  async extract(
    image: PreprocessedImage,
    layerIndices: number[],
    patchSize: number
  ): Promise<ExtractedFeatures> {
    const grid: Size = gridSize(image.resizedSize, patchSize);
    const { height: gh, width: gw } = grid;
    const w = image.resizedSize.width;
    const layers: ExtractedLayer[] = [];
    const means = new Float32Array(gh * gw * 3);
    for (let gy = 0; gy < gh; gy++) {
      for (let gx = 0; gx < gw; gx++) {
        let r = 0;
        let g = 0;
        let b = 0;
        for (let py = 0; py < patchSize; py++) {
          for (let px = 0; px < patchSize; px++) {
            const base = ((gy * patchSize + py) * w + gx * patchSize + px) * 3;
            r += image.pixels[base];
            g += image.pixels[base + 1];
            b += image.pixels[base + 2];
          }
        }
        const area = patchSize * patchSize;
        const cell = (gy * gw + gx) * 3;
        means[cell] = r / area;
        means[cell + 1] = g / area;
        means[cell + 2] = b / area;
      }
    }
    for (const layerIndex of layerIndices) {
      const values = new Float32Array(gh * gw * this.dim);
      for (let cell = 0; cell < gh * gw; cell++) {
        for (let d = 0; d < this.dim; d++) {
          const mixed =
            means[cell * 3 + d % 3] +
            0.25 * (hash2(this.seed + layerIndex * 131071, cell * this.dim + d) - 0.5);
          values[cell * this.dim + d] = mixed + 0.05; // keep away from exact zero
        }
      }
      layers.push({ layerIndex, gridH: gh, gridW: gw, values });
    }
    const cls = new Float32Array(this.dim);
    let mean = 0;
    for (let i = 0; i < image.pixels.length; i++) mean += image.pixels[i];
    mean /= image.pixels.length;
    const lastLayer = layerIndices[layerIndices.length - 1];
    for (let d = 0; d < this.dim; d++) {
      cls[d] = mean + 0.5 * (hash2(this.seed + lastLayer * 524287, d) - 0.5);
    }
    return { cls, layers };
  }
}

/**
 * Runs a converted DINOv2 graph model.  The model must accept a
 * [1, H, W, 3] float input and expose one output per requested block named
 * `layer<k>`, each [1, 1 + gridH * gridW, dim] with the CLS token first.
 */
export class TfjsBackbone implements FeatureExtractor {
  readonly name = "tfjs";
  readonly dim: number;
  private model: unknown = null;

  constructor(private readonly modelPath: string, dim = 1024) {
    this.dim = dim;
  }

  private async load(): Promise<any> {
    if (this.model) return this.model;
    let tf: any;
    try {
      // eslint-disable-next-line @typescript-eslint/no-var-requires
      tf = require("@tensorflow/tfjs");
    } catch (err) {
      throw new Error(
        "the tfjs backend needs the optional dependency @tensorflow/tfjs " +
          "(npm install @tensorflow/tfjs); alternatively run with --backbone synthetic"
      );
    }
    try {
      this.model = await tf.loadGraphModel(`file://${this.modelPath}`);
    } catch (err) {
      throw new Error(
        `cannot load model weights from ${this.modelPath}: ${(err as Error).message}; ` +
          "export aborted (pretrained weights are required)"
      );
    }
    return this.model;
  }

  async extract(
    image: PreprocessedImage,
    layerIndices: number[],
    patchSize: number
  ): Promise<ExtractedFeatures> {
    const tf: any = require("@tensorflow/tfjs");
    const model = await this.load();
    const { height, width } = image.resizedSize;
    const grid = gridSize(image.resizedSize, patchSize);
    const input = tf.tensor4d(image.pixels, [1, height, width, 3]);
    try {
      const names = layerIndices.map((i) => `layer${i}`);
      const outputs: any[] = await model.executeAsync(input, names);
      const layers: ExtractedLayer[] = [];
      let cls = new Float32Array(this.dim);
      for (let i = 0; i < layerIndices.length; i++) {
        const tokens = outputs[i]; // [1, 1 + gh * gw, dim]
        const data: Float32Array = tokens.dataSync();
        const dim = tokens.shape[2];
        const patchTokens = data.subarray(dim); // skip CLS
        layers.push({
          layerIndex: layerIndices[i],
          gridH: grid.height,
          gridW: grid.width,
          values: Float32Array.from(patchTokens),
        });
        if (i === layerIndices.length - 1) cls = Float32Array.from(data.subarray(0, dim));
        tokens.dispose();
      }
      return { cls, layers };
    } finally {
      input.dispose();
    }
  }
}

export function makeBackbone(kind: string, modelPath: string | undefined, dim: number): FeatureExtractor {
  if (kind === "synthetic") return new SyntheticBackbone(dim);
  if (kind === "tfjs") {
    if (!modelPath) throw new Error("--model <path to model.json> is required for the tfjs backbone");
    return new TfjsBackbone(modelPath, dim);
  }
  throw new Error(`unknown backbone ${JSON.stringify(kind)}; expected "tfjs" or "synthetic"`);
}
