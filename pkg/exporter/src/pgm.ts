/*
 Binary PNM decoding: P5 grayscale and P6 RGB, 8-bit only.
 Values come out as Float64Array scaled to [0, 1], channel-interleaved.
*/

export interface RawImage {
  width: number;
  height: number;
  channels: number; // 1 for P5, 3 for P6
  data: Float64Array; // row-major, [0, 1]
}

export class ImageReadError extends Error {}

function isSpace(b: number): boolean {
  return b === 0x20 || b === 0x09 || b === 0x0a || b === 0x0d || b === 0x0c || b === 0x0b;
}

/** Read the next whitespace-delimited header token, skipping # comments. */
function nextToken(bytes: Uint8Array, pos: number, source: string): [string, number] {
  while (pos < bytes.length) {
    if (isSpace(bytes[pos])) {
      pos++;
    } else if (bytes[pos] === 0x23) {
      while (pos < bytes.length && bytes[pos] !== 0x0a) pos++;
    } else {
      break;
    }
  }
  const start = pos;
  while (pos < bytes.length && !isSpace(bytes[pos])) pos++;
  if (start === pos) {
    throw new ImageReadError(`${source}: truncated header`);
  }
  return [Buffer.from(bytes.subarray(start, pos)).toString('ascii'), pos];
}

export function decodePnm(bytes: Uint8Array, source = 'image'): RawImage {
  let pos = 0;
  let magic: string;
  [magic, pos] = nextToken(bytes, pos, source);
  if (magic !== 'P5' && magic !== 'P6') {
    throw new ImageReadError(`${source}: not a binary PGM/PPM (magic ${JSON.stringify(magic)})`);
  }
  const channels = magic === 'P5' ? 1 : 3;
  let tok: string;
  [tok, pos] = nextToken(bytes, pos, source);
  const width = Number(tok);
  [tok, pos] = nextToken(bytes, pos, source);
  const height = Number(tok);
  [tok, pos] = nextToken(bytes, pos, source);
  const maxval = Number(tok);
  if (!Number.isInteger(width) || !Number.isInteger(height) || width < 1 || height < 1) {
    throw new ImageReadError(`${source}: bad dimensions ${width}x${height}`);
  }
  if (maxval !== 255) {
    throw new ImageReadError(`${source}: only 8-bit images supported (maxval ${maxval})`);
  }
  pos++; // exactly one whitespace byte separates header and raster
  const count = width * height * channels;
  if (bytes.length - pos < count) {
    throw new ImageReadError(
      `${source}: raster truncated (${bytes.length - pos} of ${count} bytes)`,
    );
  }
  const data = new Float64Array(count);
  for (let i = 0; i < count; i++) {
    data[i] = bytes[pos + i] / 255;
  }
  return { width, height, channels, data };
}
