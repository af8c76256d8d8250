/**
 * Resize geometry shared with the scoring pipeline.
 *
 * The short side lands exactly on `shortSide`; the long side is the
 * aspect-preserving length rounded to the nearest multiple of `patchSize`,
 * ties rounding up.  The rule must stay bit-identical to the consumer's
 * `preprocess_dims`; both sides are pinned by fixtures/resize_cases.json.
 */

export interface Size {
  height: number;
  width: number;
}

export const DEFAULT_PATCH_SIZE = 14;

export function preprocessDims(original: Size, shortSide: number, patchSize = DEFAULT_PATCH_SIZE): Size {
  const { height, width } = original;
  if (!Number.isInteger(height) || !Number.isInteger(width) || height <= 0 || width <= 0) {
    throw new Error(`image dimensions must be positive integers, got ${height}x${width}`);
  }
  if (!Number.isInteger(patchSize) || patchSize <= 0) {
    throw new Error(`patchSize must be a positive integer, got ${patchSize}`);
  }
  if (!Number.isInteger(shortSide) || shortSide <= 0 || shortSide % patchSize !== 0) {
    throw new Error(`shortSide must be a positive multiple of ${patchSize}, got ${shortSide}`);
  }
  const short = Math.min(height, width);
  const long = Math.max(height, width);
  // round-half-up of (shortSide * long) / (short * patchSize) in exact
  // integer arithmetic; inputs stay far below Number.MAX_SAFE_INTEGER
  const nPatches = Math.floor((2 * shortSide * long + short * patchSize) / (2 * short * patchSize));
  const longPx = nPatches * patchSize;
  return height <= width ? { height: shortSide, width: longPx } : { height: longPx, width: shortSide };
}

export function gridSize(resized: Size, patchSize = DEFAULT_PATCH_SIZE): Size {
  return { height: resized.height / patchSize, width: resized.width / patchSize };
}
