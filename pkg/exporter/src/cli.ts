#!/usr/bin/env node
/*
 Command-line entry: freqad-export <manifest> [--output path] [--seed n]

 Exit codes: 0 success, 2 bad manifest or arguments, 3 image or file
 problems, 4 missing or malformed encoder weights.
*/
import { readFileSync } from 'fs';
import { dirname, isAbsolute, resolve } from 'path';

import { parseManifest, ManifestError } from './manifest.js';
import { runExport } from './export.js';
import { ImageReadError } from './pgm.js';
import { ContainerError } from './container.js';
import { MissingWeightsError, ShapeMismatchError } from './encoder.js';

const USAGE = `usage: freqad-export <manifest.txt> [--output <path>] [--seed <n>]

Reads a key = value manifest listing input images and encoder settings,
encodes every image, and writes a single feature container plus a copy
of the effective manifest.`;

function fail(code: number, message: string): never {
  console.error(message);
  process.exit(code);
}

export function main(argv: string[]): void {
  let manifestPath: string | undefined;
  let outputOverride: string | undefined;
  let seedOverride: number | undefined;

  for (let i = 0; i < argv.length; i += 1) {
    const arg = argv[i];
    if (arg === '--help' || arg === '-h') {
      console.log(USAGE);
      process.exit(0);
    } else if (arg === '--output') {
      outputOverride = argv[++i];
      if (outputOverride === undefined) fail(2, '--output needs a path');
    } else if (arg === '--seed') {
      const v = argv[++i];
      if (v === undefined || !Number.isInteger(Number(v)) || Number(v) < 0) {
        fail(2, '--seed needs a nonnegative integer');
      }
      seedOverride = Number(v);
    } else if (arg.startsWith('-')) {
      fail(2, `unknown flag ${arg}\n\n${USAGE}`);
    } else if (manifestPath === undefined) {
      manifestPath = arg;
    } else {
      fail(2, `unexpected argument ${arg}\n\n${USAGE}`);
    }
  }
  if (manifestPath === undefined) {
    fail(2, USAGE);
  }

  let text: string;
  try {
    text = readFileSync(manifestPath, 'utf-8');
  } catch (err) {
    fail(3, `cannot read manifest ${manifestPath}: ${(err as Error).message}`);
  }

  try {
    const manifest = parseManifest(text, dirname(resolve(manifestPath)));
    if (outputOverride !== undefined) {
      manifest.output = isAbsolute(outputOverride)
        ? outputOverride
        : resolve(process.cwd(), outputOverride);
    }
    if (seedOverride !== undefined) {
      manifest.seed = seedOverride;
    }
    const result = runExport(manifest);
    console.log(`wrote ${result.records.length} records to ${result.output}`);
    console.log(`manifest copy at ${result.manifestPath}`);
  } catch (err) {
    if (err instanceof ManifestError) {
      fail(2, `manifest error: ${err.message}`);
    } else if (err instanceof MissingWeightsError || err instanceof ShapeMismatchError) {
      fail(4, `encoder error: ${err.message}`);
    } else if (err instanceof ImageReadError || err instanceof ContainerError) {
      fail(3, `export error: ${err.message}`);
    } else if (err instanceof Error && 'code' in err) {
      fail(3, `export error: ${err.message}`);
    }
    throw err;
  }
}

main(process.argv.slice(2));
