// REST client for the annotation server.  The UI never computes masks;
// every action is an explicit server call.

import { WireMask } from "./rle";

export interface VolumeMeta {
  dims: number[]; // [nx, ny, nz]
  spacing: number[];
  dtype: string;
  intensity_kind: string;
}

export interface SessionInfo {
  session_id: string;
  state: string;
  dims: number[];
  spacing: number[];
  preprocessed: string | null;
  intensity_kind: string;
  roi: [number, number] | null;
  box: { slice_index: number; x_min: number; y_min: number; x_max: number; y_max: number } | null;
  refined_slices: number[];
  model: string;
}

export interface ResultPayload {
  session_id: string;
  mask: WireMask;
  provenance: Record<string, unknown>;
}

const ENVELOPE_MAGIC = [0x50, 0x53, 0x45, 0x47]; // "PSEG"

export function packEnvelope(meta: VolumeMeta, payload: ArrayBuffer): Uint8Array<ArrayBuffer> {
  const metaBytes = new TextEncoder().encode(JSON.stringify(meta));
  const out = new Uint8Array(8 + metaBytes.length + payload.byteLength);
  out.set(ENVELOPE_MAGIC, 0);
  new DataView(out.buffer).setUint32(4, metaBytes.length, true);
  out.set(metaBytes, 8);
  out.set(new Uint8Array(payload), 8 + metaBytes.length);
  return out;
}

export class ApiError extends Error {
  constructor(public status: number, public code: string, detail: string) {
    super(`${status} ${code}: ${detail}`);
  }
}

async function raise(resp: Response): Promise<never> {
  let code = "unknown";
  let detail = resp.statusText;
  try {
    const body = await resp.json();
    code = body.detail?.error ?? code;
    detail = body.detail?.detail ?? detail;
  } catch {
    // non-JSON error body
  }
  throw new ApiError(resp.status, code, detail);
}

export class AnnotationClient {
  constructor(private baseUrl: string) {}

  private async json<T>(resp: Response): Promise<T> {
    if (!resp.ok) {
      await raise(resp);
    }
    return (await resp.json()) as T;
  }

  async createSession(meta: VolumeMeta, payload: ArrayBuffer): Promise<{ session_id: string; dims: number[] }> {
    return this.uploadEnvelope(packEnvelope(meta, payload));
  }

  async uploadEnvelope(envelope: Uint8Array<ArrayBuffer>): Promise<{ session_id: string; dims: number[] }> {
    const resp = await fetch(`${this.baseUrl}/sessions`, {
      method: "POST",
      headers: { "Content-Type": "application/octet-stream" },
      body: new Blob([envelope]),
    });
    return this.json(resp);
  }

  async preprocess(sessionId: string, options: { preset?: string; percentile?: boolean }) {
    const resp = await fetch(`${this.baseUrl}/sessions/${sessionId}/preprocess`, {
      method: "POST",
      headers: { "Content-Type": "application/json" },
      body: JSON.stringify({ preset: options.preset ?? null, percentile: options.percentile ?? false }),
    });
    return this.json<{ preprocessed: string }>(resp);
  }

  async setRoi(
    sessionId: string,
    startSlice: number,
    endSlice: number,
    box: { sliceIndex: number; xMin: number; yMin: number; xMax: number; yMax: number },
  ) {
    const resp = await fetch(`${this.baseUrl}/sessions/${sessionId}/roi`, {
      method: "POST",
      headers: { "Content-Type": "application/json" },
      body: JSON.stringify({
        start_slice: startSlice,
        end_slice: endSlice,
        box: {
          slice_index: box.sliceIndex,
          x_min: box.xMin,
          y_min: box.yMin,
          x_max: box.xMax,
          y_max: box.yMax,
        },
      }),
    });
    return this.json<{ roi: [number, number] }>(resp);
  }

  async segmentMiddle(sessionId: string) {
    const resp = await fetch(`${this.baseUrl}/sessions/${sessionId}/segment-middle`, { method: "POST" });
    return this.json<{ slice_index: number; mask: WireMask; empty: boolean }>(resp);
  }

  async refine(sessionId: string, sliceIndex: number, mask: WireMask) {
    const resp = await fetch(`${this.baseUrl}/sessions/${sessionId}/refine`, {
      method: "POST",
      headers: { "Content-Type": "application/json" },
      body: JSON.stringify({ slice_index: sliceIndex, mask }),
    });
    return this.json<{ refined_slices: number[] }>(resp);
  }

  async propagate(sessionId: string) {
    const resp = await fetch(`${this.baseUrl}/sessions/${sessionId}/propagate`, { method: "POST" });
    return this.json<ResultPayload>(resp);
  }

  async result(sessionId: string) {
    const resp = await fetch(`${this.baseUrl}/sessions/${sessionId}/result`);
    return this.json<ResultPayload>(resp);
  }

  async session(sessionId: string) {
    const resp = await fetch(`${this.baseUrl}/sessions/${sessionId}`);
    return this.json<SessionInfo>(resp);
  }

  async slicePixels(sessionId: string, index: number): Promise<{ width: number; height: number; pixels: Float32Array }> {
    const resp = await fetch(`${this.baseUrl}/sessions/${sessionId}/slice/${index}`);
    if (!resp.ok) {
      await raise(resp);
    }
    const dims = (resp.headers.get("X-Dims") ?? "").split(",").map(Number);
    const buffer = await resp.arrayBuffer();
    return { width: dims[0], height: dims[1], pixels: new Float32Array(buffer) };
  }

  async health() {
    const resp = await fetch(`${this.baseUrl}/healthz`);
    return this.json<{ ok: boolean }>(resp);
  }
}
