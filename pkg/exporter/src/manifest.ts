/*
 Key=value manifest parsing and serialization.

 Repeated "image" keys list the inputs in order; relative paths resolve
 against the manifest's own directory. The effective manifest is persisted
 next to the output container so every export is auditable.
*/
import { isAbsolute, resolve } from 'path';

export class ManifestError extends Error {}

export interface ExportManifest {
  encoder: string;
  resolution: number;
  patch: number;
  channels: number;
  seed: number;
  normalize: string;
  weights?: string;
  output: string;
  images: string[];
}

export const DEFAULTS = {
  encoder: 'vit-b16',
  resolution: 224,
  patch: 16,
  channels: 16,
  seed: 0,
  normalize: 'clip-mean-std',
  output: 'features.had1',
};

function parseInt10(key: string, value: string, min = 1): number {
  const n = Number(value);
  if (!Number.isInteger(n) || n < min) {
    throw new ManifestError(`${key} must be an integer >= ${min}, got ${JSON.stringify(value)}`);
  }
  return n;
}

export function parseManifest(text: string, baseDir = '.'): ExportManifest {
  const m: ExportManifest = { ...DEFAULTS, images: [] };
  const resolvePath = (p: string) => (isAbsolute(p) ? p : resolve(baseDir, p));
  for (const [lineno, raw] of text.split('\n').entries()) {
    const line = raw.split('#', 1)[0].trim();
    if (!line) continue;
    const eq = line.indexOf('=');
    if (eq < 0) {
      throw new ManifestError(`line ${lineno + 1}: expected key = value, got ${JSON.stringify(raw)}`);
    }
    const key = line.slice(0, eq).trim();
    const value = line.slice(eq + 1).trim();
    switch (key) {
      case 'encoder':
        m.encoder = value;
        break;
      case 'resolution':
        m.resolution = parseInt10(key, value);
        break;
      case 'patch':
        m.patch = parseInt10(key, value);
        break;
      case 'channels':
        m.channels = parseInt10(key, value);
        break;
      case 'seed':
        m.seed = parseInt10(key, value, 0);
        break;
      case 'normalize':
        m.normalize = value;
        break;
      case 'weights':
        m.weights = resolvePath(value);
        break;
      case 'output':
        m.output = resolvePath(value);
        break;
      case 'image':
        m.images.push(resolvePath(value));
        break;
      default:
        throw new ManifestError(`line ${lineno + 1}: unknown key ${JSON.stringify(key)}`);
    }
  }
  if (m.resolution % m.patch !== 0) {
    throw new ManifestError(
      `resolution ${m.resolution} is not divisible by patch ${m.patch}`,
    );
  }
  if (m.images.length === 0) {
    throw new ManifestError('manifest lists no image = <path> lines');
  }
  return m;
}

export function manifestText(m: ExportManifest): string {
  const lines = [
    '# export manifest (key = value)',
    `encoder = ${m.encoder}`,
    `resolution = ${m.resolution}`,
    `patch = ${m.patch}`,
    `channels = ${m.channels}`,
    `seed = ${m.seed}`,
    `normalize = ${m.normalize}`,
  ];
  if (m.weights) {
    lines.push(`weights = ${m.weights}`);
  }
  lines.push(`output = ${m.output}`);
  for (const img of m.images) {
    lines.push(`image = ${img}`);
  }
  return lines.join('\n') + '\n';
}
