/** PNG loading, aspect-preserving resize, and backbone input normalization. */

import * as fs from "fs";
import { PNG } from "pngjs";

import { preprocessDims, Size } from "./geometry";

/** Channel statistics the backbone was trained with. */
export const NORMALIZE_MEAN = [0.485, 0.456, 0.406];
export const NORMALIZE_STD = [0.229, 0.224, 0.225];

export interface DecodedImage {
  height: number;
  width: number;
  /** RGB float in [0, 1], row-major, 3 channels interleaved */
  rgb: Float32Array;
}

export interface PreprocessedImage {
  originalSize: Size;
  resizedSize: Size;
  /** normalized RGB, row-major interleaved, length h * w * 3 */
  pixels: Float32Array;
}

export function decodePng(path: string): DecodedImage {
  const png = PNG.sync.read(fs.readFileSync(path));
  const rgb = new Float32Array(png.height * png.width * 3);
  for (let i = 0, j = 0; i < png.data.length; i += 4, j += 3) {
    rgb[j] = png.data[i] / 255;
    rgb[j + 1] = png.data[i + 1] / 255;
    rgb[j + 2] = png.data[i + 2] / 255;
  }
  return { height: png.height, width: png.width, rgb };
}

/** Bilinear resize with pixel centers aligned (no antialiasing). */
export function resizeBilinear(image: DecodedImage, target: Size): Float32Array {
  const { height: srcH, width: srcW, rgb } = image;
  const { height: dstH, width: dstW } = target;
  const out = new Float32Array(dstH * dstW * 3);
  const scaleY = srcH / dstH;
  const scaleX = srcW / dstW;
  for (let y = 0; y < dstH; y++) {
    const srcY = Math.min(Math.max((y + 0.5) * scaleY - 0.5, 0), srcH - 1);
    const y0 = Math.min(Math.floor(srcY), srcH - 1);
    const y1 = Math.min(y0 + 1, srcH - 1);
    const wy = srcY - y0;
    for (let x = 0; x < dstW; x++) {
      const srcX = Math.min(Math.max((x + 0.5) * scaleX - 0.5, 0), srcW - 1);
      const x0 = Math.min(Math.floor(srcX), srcW - 1);
      const x1 = Math.min(x0 + 1, srcW - 1);
      const wx = srcX - x0;
      for (let c = 0; c < 3; c++) {
        const tl = rgb[(y0 * srcW + x0) * 3 + c];
        const tr = rgb[(y0 * srcW + x1) * 3 + c];
        const bl = rgb[(y1 * srcW + x0) * 3 + c];
        const br = rgb[(y1 * srcW + x1) * 3 + c];
        const top = tl + (tr - tl) * wx;
        const bottom = bl + (br - bl) * wx;
        out[(y * dstW + x) * 3 + c] = top + (bottom - top) * wy;
      }
    }
  }
  return out;
}

export function preprocessImage(path: string, shortSide: number, patchSize: number): PreprocessedImage {
  const decoded = decodePng(path);
  const originalSize = { height: decoded.height, width: decoded.width };
  const resizedSize = preprocessDims(originalSize, shortSide, patchSize);
  const resized = resizeBilinear(decoded, resizedSize);
  const pixels = new Float32Array(resized.length);
  for (let i = 0; i < resized.length; i += 3) {
    for (let c = 0; c < 3; c++) {
      pixels[i + c] = (resized[i + c] - NORMALIZE_MEAN[c]) / NORMALIZE_STD[c];
    }
  }
  return { originalSize, resizedSize, pixels };
}
