export { preprocessDims, gridSize, DEFAULT_PATCH_SIZE, Size } from "./geometry";
export {
  FeatureBundle,
  LayerGrid,
  SadfCorruptionError,
  SadfError,
  SadfFormatError,
  SadfValidationError,
  parseBundle,
  serializeBundle,
  validateBundle,
} from "./sadf";
export { decodePng, preprocessImage, resizeBilinear, NORMALIZE_MEAN, NORMALIZE_STD } from "./image";
export {
  ExtractedFeatures,
  ExtractedLayer,
  FeatureExtractor,
  SyntheticBackbone,
  TfjsBackbone,
  makeBackbone,
} from "./backbone";
export { DEFAULT_LAYERS, ExportJob, ExportManifest, defaultJob, exportCategory } from "./exporter";
