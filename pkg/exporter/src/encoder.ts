/*
 Patch encoders. Two kinds:

 - "seeded-projection": a frozen random linear map per patch, reproducible
   from the manifest seed alone. No weight files involved.
 - "vit-b16": requires a weights container holding the projection of a
   real pretrained encoder ("proj/weight" [C, P] f32, "proj/bias" [C] f32).
   Pretrained weights are never bundled here, so the file must be supplied.
*/
import { readFileSync } from 'fs';
import { readContainer } from './container.js';
import { RawImage } from './pgm.js';

export class MissingWeightsError extends Error {}
export class ShapeMismatchError extends Error {}

export interface EncoderSpec {
  name: string;
  resolution: number;
  patch: number;
  channels: number;
  seed: number;
  weights?: string;
}

export interface Projection {
  weight: Float64Array; // [channels, patchDim] row-major
  bias: Float64Array; // [channels]
}

/** Deterministic 32-bit PRNG (mulberry32). */
export function mulberry32(seed: number): () => number {
  let a = seed >>> 0;
  return () => {
    a = (a + 0x6d2b79f5) >>> 0;
    let t = a;
    t = Math.imul(t ^ (t >>> 15), t | 1);
    t ^= t + Math.imul(t ^ (t >>> 7), t | 61);
    return ((t ^ (t >>> 14)) >>> 0) / 4294967296;
  };
}

/** Standard normal deviates via Box-Muller over the seeded stream. */
export function seededGaussians(seed: number, count: number): Float64Array {
  const rand = mulberry32(seed);
  const out = new Float64Array(count);
  for (let i = 0; i < count; i += 2) {
    let u = rand();
    while (u === 0) u = rand();
    const v = rand();
    const r = Math.sqrt(-2 * Math.log(u));
    out[i] = r * Math.cos(2 * Math.PI * v);
    if (i + 1 < count) {
      out[i + 1] = r * Math.sin(2 * Math.PI * v);
    }
  }
  return out;
}

export function seededProjection(channels: number, patchDim: number, seed: number): Projection {
  const weight = seededGaussians(seed, channels * patchDim);
  const scale = 1 / Math.sqrt(patchDim);
  for (let i = 0; i < weight.length; i++) {
    weight[i] *= scale;
  }
  return { weight, bias: new Float64Array(channels) };
}

export function loadProjection(path: string, channels: number, patchDim: number): Projection {
  let bytes: Uint8Array;
  try {
    bytes = readFileSync(path);
  } catch {
    throw new MissingWeightsError(
      `weights container not found: ${path} (use encoder = seeded-projection for a weight-free export)`,
    );
  }
  const records = new Map(readContainer(bytes).map((r) => [r.name, r]));
  const weight = records.get('proj/weight');
  const bias = records.get('proj/bias');
  if (!weight || !bias) {
    throw new MissingWeightsError(`weights container ${path} lacks proj/weight or proj/bias`);
  }
  if (weight.shape.length !== 2 || weight.shape[0] !== channels || weight.shape[1] !== patchDim) {
    throw new ShapeMismatchError(
      `proj/weight is [${weight.shape}], expected [${channels}, ${patchDim}]`,
    );
  }
  if (bias.shape.length !== 1 || bias.shape[0] !== channels) {
    throw new ShapeMismatchError(`proj/bias is [${bias.shape}], expected [${channels}]`);
  }
  return {
    weight: Float64Array.from(weight.data),
    bias: Float64Array.from(bias.data),
  };
}

export function resolveProjection(spec: EncoderSpec): Projection {
  const patchDim = spec.patch * spec.patch;
  if (spec.name === 'seeded-projection') {
    return spec.weights
      ? loadProjection(spec.weights, spec.channels, patchDim)
      : seededProjection(spec.channels, patchDim, spec.seed);
  }
  if (spec.name === 'vit-b16') {
    if (!spec.weights) {
      throw new MissingWeightsError(
        'encoder vit-b16 needs a weights container (weights = <path>); ' +
          'use encoder = seeded-projection for a weight-free export',
      );
    }
    return loadProjection(spec.weights, spec.channels, patchDim);
  }
  throw new MissingWeightsError(`unknown encoder ${JSON.stringify(spec.name)}`);
}

/**
 * Encode a standardized grayscale image into a patch-feature grid.
 *
 * The image must already be resolution x resolution; each patch is
 * flattened row-major and projected, giving [channels, grid, grid] with
 * grid = resolution / patch, channel-major like the primary expects.
 */
export function encodeImage(img: RawImage, spec: EncoderSpec, proj: Projection): Float32Array {
  if (img.width !== spec.resolution || img.height !== spec.resolution) {
    throw new ShapeMismatchError(
      `image is ${img.width}x${img.height}, expected ${spec.resolution}x${spec.resolution}`,
    );
  }
  const grid = spec.resolution / spec.patch;
  const patchDim = spec.patch * spec.patch;
  const out = new Float32Array(spec.channels * grid * grid);
  const patch = new Float64Array(patchDim);
  for (let gy = 0; gy < grid; gy++) {
    for (let gx = 0; gx < grid; gx++) {
      let k = 0;
      for (let py = 0; py < spec.patch; py++) {
        const row = (gy * spec.patch + py) * img.width + gx * spec.patch;
        for (let px = 0; px < spec.patch; px++) {
          patch[k++] = img.data[row + px];
        }
      }
      for (let c = 0; c < spec.channels; c++) {
        let acc = proj.bias[c];
        const base = c * patchDim;
        for (let p = 0; p < patchDim; p++) {
          acc += proj.weight[base + p] * patch[p];
        }
        out[c * grid * grid + gy * grid + gx] = acc;
      }
    }
  }
  return out;
}
