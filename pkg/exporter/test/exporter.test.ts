import { spawnSync } from "child_process";
import * as fs from "fs";
import * as os from "os";
import * as path from "path";
import { PNG } from "pngjs";
import { afterAll, beforeAll, describe, expect, it } from "vitest";

import { SyntheticBackbone } from "../src/backbone";
import { preprocessDims } from "../src/geometry";
import { defaultJob, exportCategory } from "../src/exporter";
import { parseBundle } from "../src/sadf";

let workdir: string;

function writePng(target: string, height: number, width: number, seed: number): void {
  const png = new PNG({ height, width });
  for (let i = 0; i < png.data.length; i += 4) {
    png.data[i] = (i + seed * 37) % 256;
    png.data[i + 1] = (i * 3 + seed * 91) % 256;
    png.data[i + 2] = (i * 7 + seed * 13) % 256;
    png.data[i + 3] = 255;
  }
  fs.mkdirSync(path.dirname(target), { recursive: true });
  fs.writeFileSync(target, PNG.sync.write(png));
}

beforeAll(() => {
  workdir = fs.mkdtempSync(path.join(os.tmpdir(), "sadf-export-"));
  const root = path.join(workdir, "data");
  writePng(path.join(root, "rice", "train", "good", "000.png"), 70, 98, 1);
  writePng(path.join(root, "rice", "train", "good", "001.png"), 95, 70, 2);
  writePng(path.join(root, "rice", "test_public", "bad", "000.png"), 70, 70, 3);
  // ground-truth masks must not be exported as inputs
  writePng(path.join(root, "rice", "test_public", "ground_truth", "bad", "000.png"), 70, 70, 0);
  fs.writeFileSync(path.join(root, "rice", "train", "good", "broken.png"), "not a png");
});

afterAll(() => {
  fs.rmSync(workdir, { recursive: true, force: true });
});

function runExport(dim = 8) {
  const job = defaultJob({
    datasetRoot: path.join(workdir, "data"),
    outputRoot: path.join(workdir, "features"),
    categories: ["rice"],
    defaultShortSide: 70,
    shortSides: {},
    layerIndices: [6, 12, 18, 24],
  });
  return exportCategory(job, "rice", new SyntheticBackbone(dim));
}

describe("exportCategory with the synthetic backbone", () => {
  it("writes parseable SADF files with the configured geometry", async () => {
    const manifest = await runExport();
    expect(manifest.files.length).toBe(3);
    expect(manifest.skipped.length).toBe(1);
    expect(manifest.skipped[0].path).toContain("broken.png");
    for (const produced of manifest.files) {
      const bundle = parseBundle(fs.readFileSync(produced.path), produced.path);
      expect(bundle.patchSize).toBe(14);
      expect(bundle.layers.map((l) => l.layerIndex)).toEqual([6, 12, 18, 24]);
      const expected = preprocessDims(
        { height: produced.originalSize[0], width: produced.originalSize[1] },
        70
      );
      expect(bundle.resizedSize).toEqual(expected);
      expect(bundle.layers[0].gridH).toBe(expected.height / 14);
      expect(bundle.layers[0].gridW).toBe(expected.width / 14);
    }
    const manifestPath = path.join(workdir, "features", "rice", "export_manifest.json");
    expect(fs.existsSync(manifestPath)).toBe(true);
  });

  it("re-exports are bit-identical", async () => {
    const first = await runExport();
    const snapshot = first.files.map((f) => fs.readFileSync(f.path));
    const second = await runExport();
    second.files.forEach((f, i) => {
      expect(fs.readFileSync(f.path).equals(snapshot[i])).toBe(true);
    });
  });

  it("emitted files pass the consumer's full validation", async () => {
    const probe = spawnSync("python3", ["-c", "import superad"], { encoding: "utf-8" });
    if (probe.status !== 0) {
      console.warn("skipping cross-validation: python3 with the superad package unavailable");
      return;
    }
    const manifest = await runExport();
    const script = [
      "import sys",
      "from superad.features import read_feature_file",
      "for p in sys.argv[1:]:",
      "    f = read_feature_file(p)",
      "    assert f.layer_indices() == (6, 12, 18, 24), f.layer_indices()",
      "print('validated', len(sys.argv) - 1)",
    ].join("\n");
    const result = spawnSync(
      "python3",
      ["-c", script, ...manifest.files.map((f) => f.path)],
      { encoding: "utf-8" }
    );
    expect(result.stderr).toBe("");
    expect(result.status).toBe(0);
    expect(result.stdout).toContain("validated 3");
  });

  it("missing category directory fails clearly", async () => {
    const job = defaultJob({
      datasetRoot: path.join(workdir, "data"),
      outputRoot: path.join(workdir, "features"),
      categories: ["vial"],
      defaultShortSide: 70,
      shortSides: {},
    });
    await expect(exportCategory(job, "vial", new SyntheticBackbone(4))).rejects.toThrow(
      /category directory not found/
    );
  });

  it("rejects invalid job geometry", () => {
    expect(() =>
      defaultJob({ defaultShortSide: 100, shortSides: {}, categories: ["rice"] })
    ).toThrow(/multiple of 14/);
    expect(() => defaultJob({ layerIndices: [0, 6], categories: ["rice"] })).toThrow(
      /within \[1, 24\]/
    );
  });
});
