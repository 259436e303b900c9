/*
 HAD1 container codec, little-endian throughout.

 Layout: "HAD1", u32 record count, then per record:
 u16 name length, utf-8 name, u8 dtype tag (0 f32, 1 f64, 2 u8),
 u8 ndim, u32 per dimension, raw payload.
*/

export type Dtype = 'f32' | 'f64' | 'u8';

export interface ContainerRecord {
  name: string;
  dtype: Dtype;
  shape: number[];
  data: Float32Array | Float64Array | Uint8Array;
}

export class ContainerError extends Error {}

const MAGIC = 'HAD1';
const TAG: Record<Dtype, number> = { f32: 0, f64: 1, u8: 2 };
const ITEM: Record<Dtype, number> = { f32: 4, f64: 8, u8: 1 };

function elementCount(shape: number[]): number {
  return shape.reduce((a, b) => a * b, 1);
}

export function writeContainer(records: ContainerRecord[]): Uint8Array {
  const seen = new Set<string>();
  const chunks: Uint8Array[] = [];
  const head = new Uint8Array(8);
  head.set(Buffer.from(MAGIC, 'ascii'));
  new DataView(head.buffer).setUint32(4, records.length, true);
  chunks.push(head);
  for (const rec of records) {
    if (seen.has(rec.name)) {
      throw new ContainerError(`duplicate record name ${JSON.stringify(rec.name)}`);
    }
    seen.add(rec.name);
    if (rec.data.length !== elementCount(rec.shape)) {
      throw new ContainerError(
        `record ${rec.name}: ${rec.data.length} values for shape [${rec.shape}]`,
      );
    }
    const name = Buffer.from(rec.name, 'utf-8');
    const header = new Uint8Array(2 + name.length + 2 + 4 * rec.shape.length);
    const view = new DataView(header.buffer);
    view.setUint16(0, name.length, true);
    header.set(name, 2);
    header[2 + name.length] = TAG[rec.dtype];
    header[3 + name.length] = rec.shape.length;
    rec.shape.forEach((dim, i) => view.setUint32(4 + name.length + 4 * i, dim, true));
    chunks.push(header);

    const payload = new Uint8Array(rec.data.length * ITEM[rec.dtype]);
    const pv = new DataView(payload.buffer);
    if (rec.dtype === 'f32') {
      rec.data.forEach((v, i) => pv.setFloat32(4 * i, v, true));
    } else if (rec.dtype === 'f64') {
      rec.data.forEach((v, i) => pv.setFloat64(8 * i, v, true));
    } else {
      payload.set(rec.data as Uint8Array);
    }
    chunks.push(payload);
  }
  return Buffer.concat(chunks);
}

export function readContainer(bytes: Uint8Array): ContainerRecord[] {
  let pos = 0;
  const need = (n: number, what: string): Uint8Array => {
    if (pos + n > bytes.length) {
      throw new ContainerError(`container truncated inside ${what} at offset ${pos}`);
    }
    const out = bytes.subarray(pos, pos + n);
    pos += n;
    return out;
  };
  const magic = Buffer.from(need(4, 'magic')).toString('ascii');
  if (magic !== MAGIC) {
    throw new ContainerError(`bad magic ${JSON.stringify(magic)}`);
  }
  const countView = need(4, 'record count');
  const count = new DataView(countView.buffer, countView.byteOffset).getUint32(0, true);
  const records: ContainerRecord[] = [];
  for (let r = 0; r < count; r++) {
    const lenView = need(2, 'name length');
    const nameLen = new DataView(lenView.buffer, lenView.byteOffset).getUint16(0, true);
    const name = Buffer.from(need(nameLen, 'name')).toString('utf-8');
    const meta = need(2, 'dtype/ndim');
    const tag = meta[0];
    const ndim = meta[1];
    const dtype = (Object.keys(TAG) as Dtype[]).find((d) => TAG[d] === tag);
    if (!dtype) {
      throw new ContainerError(`unknown dtype tag ${tag} in record ${name}`);
    }
    const shape: number[] = [];
    for (let i = 0; i < ndim; i++) {
      const dimView = need(4, 'dims');
      shape.push(new DataView(dimView.buffer, dimView.byteOffset).getUint32(0, true));
    }
    const n = elementCount(shape);
    const payload = need(n * ITEM[dtype], `payload of ${name}`);
    const pv = new DataView(payload.buffer, payload.byteOffset);
    let data: Float32Array | Float64Array | Uint8Array;
    if (dtype === 'f32') {
      data = new Float32Array(n);
      for (let i = 0; i < n; i++) data[i] = pv.getFloat32(4 * i, true);
    } else if (dtype === 'f64') {
      data = new Float64Array(n);
      for (let i = 0; i < n; i++) data[i] = pv.getFloat64(8 * i, true);
    } else {
      data = new Uint8Array(payload);
    }
    records.push({ name, dtype, shape, data });
  }
  return records;
}
