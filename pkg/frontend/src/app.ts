// Annotation workbench wiring: upload, preprocessing, prompting, slice
// scrubbing, brush refinement, propagation, and result download.

import { AnnotationClient, VolumeMeta } from "./api";
import { decodeWireMask, rleEncode, WireMask } from "./rle";
import {
  applyServerSession,
  boxToolAllowed,
  brushAllowed,
  clampSlice,
  clearDirty,
  initialState,
  markDirty,
  propagateAllowed,
  Tool,
  ViewerState,
} from "./state";
import { applyStroke, strokePath } from "./tools";
import { picksToRange, screenRectToBox, screenToVoxel, ViewTransform } from "./transform";
import { drawBoxOutline, renderSlice } from "./viewer";

const $ = (id: string) => document.getElementById(id)!;

const state: ViewerState = initialState();
const transform: ViewTransform = { zoom: 8, panX: 0, panY: 0 };
let client = new AnnotationClient(localStorage.getItem("promptseg.server") ?? "http://127.0.0.1:8080");

let sliceCache = new Map<number, Float32Array>();
let maskBySlice = new Map<number, Uint8Array>(); // local overlay; may hold unpushed edits
let pendingBox: { sliceIndex: number; xMin: number; yMin: number; xMax: number; yMax: number } | null = null;
let rangePick: number | null = null;
let dragStart: [number, number] | null = null;
let lastDrag: [number, number] | null = null;

function status(text: string) {
  $("status").textContent = text;
}

function setTool(tool: Tool) {
  if (tool === "box" && !boxToolAllowed(state)) {
    status("box prompts are only available before propagation");
    return;
  }
  state.activeTool = tool;
  document.querySelectorAll("[data-tool]").forEach((el) => {
    el.classList.toggle("active", el.getAttribute("data-tool") === tool);
  });
}

function canvas(): HTMLCanvasElement {
  return $("viewport") as HTMLCanvasElement;
}

async function refreshSlice(index: number) {
  if (!state.sessionId) return;
  if (!sliceCache.has(index)) {
    const { pixels } = await client.slicePixels(state.sessionId, index);
    sliceCache.set(index, pixels);
  }
  redraw();
}

function redraw() {
  if (!state.sessionId) return;
  const [nx, ny] = state.dims;
  const pixels = sliceCache.get(state.currentSlice);
  if (!pixels) return;
  const ctx = canvas().getContext("2d")!;
  renderSlice(
    ctx, pixels, nx, ny, state.windowCenter, state.windowWidth, transform,
    maskBySlice.get(state.currentSlice) ?? null, state.overlayOpacity,
  );
  if (pendingBox && pendingBox.sliceIndex === state.currentSlice) {
    drawBoxOutline(ctx, transform, pendingBox);
  }
  $("slice-label").textContent =
    `slice ${state.currentSlice + 1}/${state.dims[2]}` +
    (state.dirtySlices.has(state.currentSlice) ? " (edited)" : "");
}

function storeMask3d(mask: WireMask) {
  const [nx, ny, nz] = mask.dims;
  const flat = decodeWireMask(mask);
  maskBySlice = new Map();
  for (let z = 0; z < nz; z++) {
    maskBySlice.set(z, flat.subarray(z * nx * ny, (z + 1) * nx * ny));
  }
  clearDirty(state);
}

async function syncSession() {
  if (!state.sessionId) return;
  applyServerSession(state, await client.session(state.sessionId));
  $("workflow").textContent = state.workflow;
  ($("propagate") as HTMLButtonElement).disabled = !propagateAllowed(state);
  redraw();
}

async function onUpload(files: FileList) {
  let meta: VolumeMeta | null = null;
  let payload: ArrayBuffer | null = null;
  for (const file of Array.from(files)) {
    if (file.name.endsWith(".json")) {
      meta = JSON.parse(await file.text());
    } else {
      payload = await file.arrayBuffer();
    }
  }
  if (!meta || !payload) {
    status("pick the volume sidecar pair: one .json and one .raw");
    return;
  }
  const created = await client.createSession(meta, payload);
  state.sessionId = created.session_id;
  sliceCache = new Map();
  maskBySlice = new Map();
  pendingBox = null;
  await syncSession();
  if (meta.intensity_kind !== "normalized_0_255") {
    const preset = ($("preset") as HTMLSelectElement).value;
    await (preset === "percentile"
      ? client.preprocess(state.sessionId, { percentile: true })
      : client.preprocess(state.sessionId, { preset }));
    status(`preprocessed with ${preset}`);
  }
  await refreshSlice(state.currentSlice);
  status(`session ${state.sessionId} ready; draw a box on the key slice`);
}

function pointerVoxel(ev: PointerEvent): [number, number] {
  const rect = canvas().getBoundingClientRect();
  return screenToVoxel(transform, ev.clientX - rect.left, ev.clientY - rect.top);
}

async function onPointerDown(ev: PointerEvent) {
  if (!state.sessionId) return;
  const rect = canvas().getBoundingClientRect();
  const sx = ev.clientX - rect.left;
  const sy = ev.clientY - rect.top;
  if (state.activeTool === "box") {
    dragStart = [sx, sy];
  } else if (state.activeTool === "range_pick") {
    if (rangePick === null) {
      rangePick = state.currentSlice;
      status(`range start: slice ${rangePick}; scrub and click the other end`);
    } else {
      const { top, bottom, swapped } = picksToRange(rangePick, state.currentSlice);
      ($("range-top") as HTMLInputElement).value = String(top);
      ($("range-bottom") as HTMLInputElement).value = String(bottom);
      status(swapped ? `range ${top}:${bottom} (picks swapped)` : `range ${top}:${bottom}`);
      rangePick = null;
    }
  } else if (brushAllowed(state)) {
    lastDrag = pointerVoxel(ev);
    paintAt(lastDrag, lastDrag);
  }
}

function paintAt(from: [number, number], to: [number, number]) {
  const [nx, ny] = state.dims;
  const mask = maskBySlice.get(state.currentSlice) ?? new Uint8Array(nx * ny);
  applyStroke(mask, nx, ny, {
    points: strokePath(from, to),
    radius: Number(($("brush-size") as HTMLInputElement).value),
    erase: state.activeTool === "brush_erase",
  });
  maskBySlice.set(state.currentSlice, mask);
  markDirty(state, state.currentSlice);
  redraw();
}

async function onPointerMove(ev: PointerEvent) {
  if (!state.sessionId) return;
  const rect = canvas().getBoundingClientRect();
  if (dragStart && state.activeTool === "box") {
    const [nx, ny] = state.dims;
    pendingBox = screenRectToBox(
      transform,
      { x0: dragStart[0], y0: dragStart[1], x1: ev.clientX - rect.left, y1: ev.clientY - rect.top },
      state.currentSlice, nx, ny,
    );
    redraw();
  } else if (lastDrag && (state.activeTool === "brush_add" || state.activeTool === "brush_erase")) {
    const here = pointerVoxel(ev);
    paintAt(lastDrag, here);
    lastDrag = here;
  }
}

async function onPointerUp() {
  dragStart = null;
  if (lastDrag) {
    lastDrag = null;
    await pushRefinement();
  }
}

async function pushRefinement() {
  if (!state.sessionId || !brushAllowed(state)) return;
  const [nx, ny] = state.dims;
  const mask = maskBySlice.get(state.currentSlice);
  if (!mask) return;
  await client.refine(state.sessionId, state.currentSlice, {
    dims: [nx, ny],
    rle: rleEncode(mask),
  });
  status(`slice ${state.currentSlice} refinement stored (propagate to refresh)`);
}

async function onSetRoi() {
  if (!state.sessionId || !pendingBox) {
    status("draw a box first");
    return;
  }
  const top = Number(($("range-top") as HTMLInputElement).value);
  const bottom = Number(($("range-bottom") as HTMLInputElement).value);
  const { top: t, bottom: b } = picksToRange(top, bottom);
  await client.setRoi(state.sessionId, t, b, pendingBox);
  const middle = await client.segmentMiddle(state.sessionId);
  const [nx] = state.dims;
  maskBySlice.set(middle.slice_index, decodeWireMask({ ...middle.mask, dims: middle.mask.dims.slice(0, 2) }));
  void nx;
  await syncSession();
  status(middle.empty ? "middle slice came back empty; brush it in" : "middle slice segmented; refine or propagate");
}

async function onPropagate() {
  if (!state.sessionId || !propagateAllowed(state)) return;
  state.inFlight = true;
  ($("propagate") as HTMLButtonElement).disabled = true;
  status("propagating…");
  try {
    const result = await client.propagate(state.sessionId);
    storeMask3d(result.mask);
    await syncSession();
    status(`propagated; checkpoint ${String((result.provenance as any).checkpoint)}`);
  } catch (err) {
    status(String(err));
  } finally {
    state.inFlight = false;
    ($("propagate") as HTMLButtonElement).disabled = !propagateAllowed(state);
  }
}

async function onScrub(delta: number) {
  state.currentSlice = clampSlice(state, state.currentSlice + delta);
  await refreshSlice(state.currentSlice);
}

export function boot() {
  $("upload").addEventListener("change", (ev) => {
    const files = (ev.target as HTMLInputElement).files;
    if (files) void onUpload(files);
  });
  document.querySelectorAll("[data-tool]").forEach((el) =>
    el.addEventListener("click", () => setTool(el.getAttribute("data-tool") as Tool)),
  );
  $("set-roi").addEventListener("click", () => void onSetRoi());
  $("propagate").addEventListener("click", () => void onPropagate());
  $("prev-slice").addEventListener("click", () => void onScrub(-1));
  $("next-slice").addEventListener("click", () => void onScrub(+1));
  canvas().addEventListener("pointerdown", (ev) => void onPointerDown(ev));
  canvas().addEventListener("pointermove", (ev) => void onPointerMove(ev));
  window.addEventListener("pointerup", () => void onPointerUp());
  canvas().addEventListener(
    "wheel",
    (ev) => {
      ev.preventDefault();
      void onScrub(ev.deltaY > 0 ? 1 : -1);
    },
    { passive: false },
  );
  $("server-url").addEventListener("change", (ev) => {
    const url = (ev.target as HTMLInputElement).value;
    localStorage.setItem("promptseg.server", url);
    client = new AnnotationClient(url);
  });
  ($("server-url") as HTMLInputElement).value =
    localStorage.getItem("promptseg.server") ?? "http://127.0.0.1:8080";
  setTool("box");
  status("upload a volume (.json + .raw sidecar pair) to begin");
}

boot();
