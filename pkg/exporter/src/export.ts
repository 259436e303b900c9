/*
 End-to-end export: read images, preprocess, encode, write one container.

 Each input produces a record named feat/<stem> with shape
 [channels, grid, grid], where grid = resolution / patch. The container
 and a copy of the effective manifest land next to each other so a
 downstream reader can reproduce the run.
*/
import { readFileSync, writeFileSync } from 'fs';
import { basename } from 'path';

import { decodePnm, ImageReadError } from './pgm.js';
import { toGrayscale, resizeBilinear, standardize } from './resize.js';
import { writeContainer, ContainerRecord } from './container.js';
import { EncoderSpec, resolveProjection, encodeImage } from './encoder.js';
import { ExportManifest, manifestText } from './manifest.js';

export interface ExportResult {
  output: string;
  manifestPath: string;
  records: string[];
}

function stemOf(path: string): string {
  const base = basename(path);
  const dot = base.lastIndexOf('.');
  return dot > 0 ? base.slice(0, dot) : base;
}

export function runExport(manifest: ExportManifest): ExportResult {
  const spec: EncoderSpec = {
    name: manifest.encoder,
    resolution: manifest.resolution,
    patch: manifest.patch,
    channels: manifest.channels,
    seed: manifest.seed,
    weights: manifest.weights,
  };
  const proj = resolveProjection(spec);
  const grid = manifest.resolution / manifest.patch;

  const records: ContainerRecord[] = [];
  const seen = new Set<string>();
  for (const imagePath of manifest.images) {
    let bytes: Uint8Array;
    try {
      bytes = readFileSync(imagePath);
    } catch (err) {
      throw new ImageReadError(`cannot read ${imagePath}: ${(err as Error).message}`);
    }
    const raw = decodePnm(bytes, imagePath);
    const gray = standardize(toGrayscale(raw));
    const sized = resizeBilinear(gray, manifest.resolution, manifest.resolution);
    const feat = encodeImage(sized, spec, proj);
    let name = `feat/${stemOf(imagePath)}`;
    let suffix = 1;
    while (seen.has(name)) {
      name = `feat/${stemOf(imagePath)}_${suffix}`;
      suffix += 1;
    }
    seen.add(name);
    records.push({
      name,
      dtype: 'f32',
      shape: [manifest.channels, grid, grid],
      data: feat,
    });
  }

  writeFileSync(manifest.output, writeContainer(records));
  const manifestPath = `${manifest.output}.manifest.txt`;
  writeFileSync(manifestPath, manifestText(manifest));
  return { output: manifest.output, manifestPath, records: records.map((r) => r.name) };
}
