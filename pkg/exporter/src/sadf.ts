/**
 * SADF binary bundles: one file per image, CLS vector plus the patch grids
 * of every exported layer, little-endian float32 throughout.
 *
 * Layout: magic "SADF" | u16 version | u16 patchSize | u32 idLen + utf8 id |
 * u32 origH origW resizedH resizedW | u32 dim | u32 clsLen + cls floats |
 * u8 nLayers | per layer: u16 layerIndex, u32 gridH, u32 gridW, floats
 * (row-major, channels contiguous per patch).
 */

export const SADF_MAGIC = "SADF";
export const SADF_VERSION = 1;

export interface LayerGrid {
  layerIndex: number;
  gridH: number;
  gridW: number;
  dim: number;
  /** length gridH * gridW * dim, row-major */
  values: Float32Array;
}

export interface FeatureBundle {
  imageId: string;
  originalSize: { height: number; width: number };
  resizedSize: { height: number; width: number };
  patchSize: number;
  cls: Float32Array;
  layers: LayerGrid[];
}

export class SadfError extends Error {}
export class SadfFormatError extends SadfError {}
export class SadfCorruptionError extends SadfError {}
export class SadfValidationError extends SadfError {}

function allFinite(values: Float32Array): boolean {
  for (let i = 0; i < values.length; i++) {
    if (!Number.isFinite(values[i])) return false;
  }
  return true;
}

export function validateBundle(bundle: FeatureBundle): void {
  const id = bundle.imageId || "<bundle>";
  const { originalSize: orig, resizedSize: resized, patchSize } = bundle;
  if (!Number.isInteger(patchSize) || patchSize < 1) {
    throw new SadfValidationError(`${id}: patchSize must be >= 1, got ${patchSize}`);
  }
  if (orig.height < 1 || orig.width < 1) {
    throw new SadfValidationError(`${id}: originalSize must be positive`);
  }
  if (
    resized.height < 1 ||
    resized.width < 1 ||
    resized.height % patchSize !== 0 ||
    resized.width % patchSize !== 0
  ) {
    throw new SadfValidationError(
      `${id}: resizedSize ${resized.height}x${resized.width} must be positive multiples of ${patchSize}`
    );
  }
  const dim = bundle.cls.length;
  if (dim < 1) throw new SadfValidationError(`${id}: cls must be non-empty`);
  if (!allFinite(bundle.cls)) throw new SadfValidationError(`${id}: cls has non-finite values`);
  if (bundle.layers.length < 1) {
    throw new SadfValidationError(`${id}: at least one layer required`);
  }
  const expectH = resized.height / patchSize;
  const expectW = resized.width / patchSize;
  let previous = 0;
  for (const layer of bundle.layers) {
    if (layer.layerIndex <= previous) {
      throw new SadfValidationError(`${id}: layer indices must be unique and ascending`);
    }
    previous = layer.layerIndex;
    if (layer.gridH !== expectH || layer.gridW !== expectW) {
      throw new SadfValidationError(
        `${id}: layer ${layer.layerIndex} grid ${layer.gridH}x${layer.gridW} does not match ` +
          `resized/patch geometry ${expectH}x${expectW}`
      );
    }
    if (layer.dim !== dim) {
      throw new SadfValidationError(`${id}: layer ${layer.layerIndex} dim ${layer.dim} != ${dim}`);
    }
    if (layer.values.length !== layer.gridH * layer.gridW * layer.dim) {
      throw new SadfValidationError(`${id}: layer ${layer.layerIndex} buffer length mismatch`);
    }
    if (!allFinite(layer.values)) {
      throw new SadfValidationError(`${id}: layer ${layer.layerIndex} has non-finite values`);
    }
  }
}

function writeFloats(target: Buffer, offset: number, values: Float32Array): number {
  for (let i = 0; i < values.length; i++) {
    target.writeFloatLE(values[i], offset);
    offset += 4;
  }
  return offset;
}

export function serializeBundle(bundle: FeatureBundle): Buffer {
  validateBundle(bundle);
  const idBytes = Buffer.from(bundle.imageId, "utf-8");
  const dim = bundle.cls.length;
  let size = 4 + 2 + 2 + 4 + idBytes.length + 16 + 4 + 4 + 4 * dim + 1;
  for (const layer of bundle.layers) size += 2 + 4 + 4 + 4 * layer.values.length;
  const out = Buffer.alloc(size);
  let offset = 0;
  out.write(SADF_MAGIC, offset, "ascii");
  offset += 4;
  out.writeUInt16LE(SADF_VERSION, offset);
  offset += 2;
  out.writeUInt16LE(bundle.patchSize, offset);
  offset += 2;
  out.writeUInt32LE(idBytes.length, offset);
  offset += 4;
  idBytes.copy(out, offset);
  offset += idBytes.length;
  for (const value of [
    bundle.originalSize.height,
    bundle.originalSize.width,
    bundle.resizedSize.height,
    bundle.resizedSize.width,
    dim,
    dim,
  ]) {
    out.writeUInt32LE(value, offset);
    offset += 4;
  }
  offset = writeFloats(out, offset, bundle.cls);
  out.writeUInt8(bundle.layers.length, offset);
  offset += 1;
  for (const layer of bundle.layers) {
    out.writeUInt16LE(layer.layerIndex, offset);
    offset += 2;
    out.writeUInt32LE(layer.gridH, offset);
    offset += 4;
    out.writeUInt32LE(layer.gridW, offset);
    offset += 4;
    offset = writeFloats(out, offset, layer.values);
  }
  return out;
}

class Cursor {
  private pos = 0;

  constructor(private readonly data: Buffer, private readonly source: string) {}

  private need(n: number): number {
    if (this.pos + n > this.data.length) {
      throw new SadfCorruptionError(
        `${this.source}: truncated, needed ${n} bytes at offset ${this.pos}`
      );
    }
    const at = this.pos;
    this.pos += n;
    return at;
  }

  bytes(n: number): Buffer {
    const at = this.need(n);
    return this.data.subarray(at, at + n);
  }

  u8(): number {
    return this.data.readUInt8(this.need(1));
  }

  u16(): number {
    return this.data.readUInt16LE(this.need(2));
  }

  u32(): number {
    return this.data.readUInt32LE(this.need(4));
  }

  floats(count: number): Float32Array {
    const at = this.need(4 * count);
    const out = new Float32Array(count);
    for (let i = 0; i < count; i++) out[i] = this.data.readFloatLE(at + 4 * i);
    return out;
  }

  get remaining(): number {
    return this.data.length - this.pos;
  }
}

export function parseBundle(data: Buffer, source = "<buffer>"): FeatureBundle {
  const cursor = new Cursor(data, source);
  const magic = cursor.bytes(4).toString("ascii");
  if (magic !== SADF_MAGIC) {
    throw new SadfFormatError(`${source}: bad magic ${JSON.stringify(magic)}`);
  }
  const version = cursor.u16();
  if (version !== SADF_VERSION) {
    throw new SadfFormatError(`${source}: unsupported version ${version}`);
  }
  const patchSize = cursor.u16();
  const idLen = cursor.u32();
  const imageId = cursor.bytes(idLen).toString("utf-8");
  const originalSize = { height: cursor.u32(), width: cursor.u32() };
  const resizedSize = { height: cursor.u32(), width: cursor.u32() };
  const dim = cursor.u32();
  const clsLen = cursor.u32();
  if (clsLen !== dim) {
    throw new SadfValidationError(`${source}: cls length ${clsLen} != dim ${dim}`);
  }
  const cls = cursor.floats(clsLen);
  const nLayers = cursor.u8();
  const layers: LayerGrid[] = [];
  for (let i = 0; i < nLayers; i++) {
    const layerIndex = cursor.u16();
    const gridH = cursor.u32();
    const gridW = cursor.u32();
    layers.push({ layerIndex, gridH, gridW, dim, values: cursor.floats(gridH * gridW * dim) });
  }
  if (cursor.remaining > 0) {
    throw new SadfCorruptionError(`${source}: ${cursor.remaining} trailing bytes`);
  }
  const bundle: FeatureBundle = { imageId, originalSize, resizedSize, patchSize, cls, layers };
  validateBundle(bundle);
  return bundle;
}
