// Run-length mask codec matching the server wire format: runs alternate
// background/foreground over x-fastest order, starting with background.

export interface WireMask {
  dims: number[]; // [nx, ny] or [nx, ny, nz]
  rle: number[];
}

export function rleEncode(flat: Uint8Array): number[] {
  if (flat.length === 0) {
    return [0];
  }
  const runs: number[] = [];
  let value = flat[0] !== 0 ? 1 : 0;
  if (value === 1) {
    runs.push(0);
  }
  let run = 0;
  for (let i = 0; i < flat.length; i++) {
    const v = flat[i] !== 0 ? 1 : 0;
    if (v === value) {
      run += 1;
    } else {
      runs.push(run);
      value = v;
      run = 1;
    }
  }
  runs.push(run);
  return runs;
}

export function rleDecode(runs: number[], size: number): Uint8Array {
  let total = 0;
  for (const r of runs) {
    if (r < 0) {
      throw new Error("negative run length");
    }
    total += r;
  }
  if (total !== size) {
    throw new Error(`rle covers ${total} voxels, expected ${size}`);
  }
  const out = new Uint8Array(size);
  let pos = 0;
  let value = 0;
  for (const r of runs) {
    if (value === 1) {
      out.fill(1, pos, pos + r);
    }
    pos += r;
    value ^= 1;
  }
  return out;
}

export function maskSize(dims: number[]): number {
  return dims.reduce((a, b) => a * b, 1);
}

export function decodeWireMask(mask: WireMask): Uint8Array {
  return rleDecode(mask.rle, maskSize(mask.dims));
}

export function sameRle(a: WireMask, b: WireMask): boolean {
  return (
    a.dims.length === b.dims.length &&
    a.dims.every((d, i) => d === b.dims[i]) &&
    a.rle.length === b.rle.length &&
    a.rle.every((r, i) => r === b.rle[i])
  );
}
