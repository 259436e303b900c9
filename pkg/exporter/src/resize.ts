/*
 Grayscale conversion and bilinear resizing for encoder input.
 Resize uses half-pixel sample centers, the common library default.
*/
import { RawImage } from './pgm.js';

/** Rec. 601 luma; single-channel images pass through unchanged. */
export function toGrayscale(img: RawImage): RawImage {
  if (img.channels === 1) {
    return img;
  }
  const n = img.width * img.height;
  const out = new Float64Array(n);
  for (let i = 0; i < n; i++) {
    out[i] = 0.299 * img.data[3 * i] + 0.587 * img.data[3 * i + 1] + 0.114 * img.data[3 * i + 2];
  }
  return { width: img.width, height: img.height, channels: 1, data: out };
}

export function resizeBilinear(img: RawImage, outW: number, outH: number): RawImage {
  if (img.channels !== 1) {
    throw new Error('resizeBilinear expects a grayscale image');
  }
  if (img.width === outW && img.height === outH) {
    return img;
  }
  const out = new Float64Array(outW * outH);
  const scaleX = img.width / outW;
  const scaleY = img.height / outH;
  for (let oy = 0; oy < outH; oy++) {
    const sy = Math.min(Math.max((oy + 0.5) * scaleY - 0.5, 0), img.height - 1);
    const y0 = Math.floor(sy);
    const y1 = Math.min(y0 + 1, img.height - 1);
    const fy = sy - y0;
    for (let ox = 0; ox < outW; ox++) {
      const sx = Math.min(Math.max((ox + 0.5) * scaleX - 0.5, 0), img.width - 1);
      const x0 = Math.floor(sx);
      const x1 = Math.min(x0 + 1, img.width - 1);
      const fx = sx - x0;
      const top = img.data[y0 * img.width + x0] * (1 - fx) + img.data[y0 * img.width + x1] * fx;
      const bottom = img.data[y1 * img.width + x0] * (1 - fx) + img.data[y1 * img.width + x1] * fx;
      out[oy * outW + ox] = top * (1 - fy) + bottom * fy;
    }
  }
  return { width: outW, height: outH, channels: 1, data: out };
}

// Grayscale standardization constants, the mean/std commonly used for
// CLIP-style preprocessing averaged across RGB.
export const NORM_MEAN = 0.44916763;
export const NORM_STD = 0.26856974;

export function standardize(img: RawImage): RawImage {
  const out = new Float64Array(img.data.length);
  for (let i = 0; i < img.data.length; i++) {
    out[i] = (img.data[i] - NORM_MEAN) / NORM_STD;
  }
  return { ...img, data: out };
}
