// Viewer state and its workflow rules.  The state is a pure mirror of the
// server session (refresh-safe): everything here can be rebuilt from
// GET /sessions/{id}.

import { SessionInfo } from "./api";

export type Tool = "box" | "brush_add" | "brush_erase" | "range_pick";

export interface ViewerState {
  sessionId: string | null;
  dims: number[]; // [nx, ny, nz]
  currentSlice: number;
  windowCenter: number; // display mapping only, independent of server preprocessing
  windowWidth: number;
  overlayOpacity: number;
  activeTool: Tool;
  workflow: string; // created | roi_set | middle_done | propagated
  inFlight: boolean;
  dirtySlices: Set<number>;
  roi: [number, number] | null;
  refinedSlices: number[];
}

export function initialState(): ViewerState {
  return {
    sessionId: null,
    dims: [0, 0, 0],
    currentSlice: 0,
    windowCenter: 127.5,
    windowWidth: 255,
    overlayOpacity: 0.45,
    activeTool: "box",
    workflow: "created",
    inFlight: false,
    dirtySlices: new Set(),
    roi: null,
    refinedSlices: [],
  };
}

/** The box tool only applies before the first propagation (re-prompting
 *  requires a fresh session in this workflow). */
export function boxToolAllowed(state: ViewerState): boolean {
  return state.workflow === "created" || state.workflow === "roi_set";
}

export function brushAllowed(state: ViewerState): boolean {
  return state.workflow === "middle_done" || state.workflow === "propagated";
}

export function propagateAllowed(state: ViewerState): boolean {
  return (state.workflow === "middle_done" || state.workflow === "propagated") && !state.inFlight;
}

export function clampSlice(state: ViewerState, index: number): number {
  const nz = state.dims[2];
  return Math.max(0, Math.min(nz > 0 ? nz - 1 : 0, index));
}

export function markDirty(state: ViewerState, slice: number): void {
  state.dirtySlices.add(slice);
}

/** A completed propagation refreshes every slice. */
export function clearDirty(state: ViewerState): void {
  state.dirtySlices.clear();
}

/** Rebuild local state from the server's session document. */
export function applyServerSession(state: ViewerState, info: SessionInfo): ViewerState {
  state.sessionId = info.session_id;
  state.dims = info.dims;
  state.workflow = info.state;
  state.roi = info.roi;
  state.refinedSlices = info.refined_slices;
  state.currentSlice = clampSlice(state, info.box ? info.box.slice_index : Math.floor(info.dims[2] / 2));
  if (!boxToolAllowed(state) && state.activeTool === "box") {
    state.activeTool = "brush_add";
  }
  return state;
}
