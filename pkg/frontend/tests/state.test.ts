import { describe, expect, it } from "vitest";

import { SessionInfo } from "../src/api";
import {
  applyServerSession,
  boxToolAllowed,
  brushAllowed,
  clampSlice,
  clearDirty,
  initialState,
  markDirty,
  propagateAllowed,
} from "../src/state";
import { applyStroke, strokePath } from "../src/tools";

function serverInfo(overrides: Partial<SessionInfo> = {}): SessionInfo {
  return {
    session_id: "s1",
    state: "middle_done",
    dims: [32, 32, 8],
    spacing: [1, 1, 1],
    preprocessed: "abdomen",
    intensity_kind: "normalized_0_255",
    roi: [1, 6],
    box: { slice_index: 4, x_min: 3, y_min: 4, x_max: 13, y_max: 12 },
    refined_slices: [],
    model: "default",
    ...overrides,
  };
}

describe("viewer state", () => {
  it("permits the box tool only before propagation", () => {
    const s = initialState();
    expect(boxToolAllowed(s)).toBe(true);
    s.workflow = "roi_set";
    expect(boxToolAllowed(s)).toBe(true);
    s.workflow = "middle_done";
    expect(boxToolAllowed(s)).toBe(false);
    s.workflow = "propagated";
    expect(boxToolAllowed(s)).toBe(false);
  });

  it("permits brushing only once a draft exists", () => {
    const s = initialState();
    expect(brushAllowed(s)).toBe(false);
    s.workflow = "middle_done";
    expect(brushAllowed(s)).toBe(true);
  });

  it("mirrors the in-flight lock in the propagate button", () => {
    const s = initialState();
    s.workflow = "middle_done";
    expect(propagateAllowed(s)).toBe(true);
    s.inFlight = true;
    expect(propagateAllowed(s)).toBe(false);
  });

  it("tracks dirty slices until a propagation refreshes them", () => {
    const s = initialState();
    markDirty(s, 3);
    markDirty(s, 5);
    expect([...s.dirtySlices].sort()).toEqual([3, 5]);
    clearDirty(s);
    expect(s.dirtySlices.size).toBe(0);
  });

  it("is reconstructible from the server session alone", () => {
    const s = applyServerSession(initialState(), serverInfo());
    expect(s.sessionId).toBe("s1");
    expect(s.workflow).toBe("middle_done");
    expect(s.dims).toEqual([32, 32, 8]);
    expect(s.roi).toEqual([1, 6]);
    expect(s.currentSlice).toBe(4); // lands on the prompt slice
    expect(s.activeTool).not.toBe("box"); // box no longer legal in this state
  });

  it("clamps slice scrubbing to the volume", () => {
    const s = applyServerSession(initialState(), serverInfo());
    expect(clampSlice(s, -3)).toBe(0);
    expect(clampSlice(s, 99)).toBe(7);
  });
});

describe("brush tool", () => {
  it("paints and erases circles", () => {
    const mask = new Uint8Array(16 * 16);
    applyStroke(mask, 16, 16, { points: [[8, 8]], radius: 2, erase: false });
    expect(mask[8 * 16 + 8]).toBe(1);
    expect(mask[8 * 16 + 10]).toBe(1);
    expect(mask[8 * 16 + 11]).toBe(0); // outside the radius
    applyStroke(mask, 16, 16, { points: [[8, 8]], radius: 2, erase: true });
    expect(mask.reduce((a, b) => a + b, 0)).toBe(0);
  });

  it("interpolates drags without gaps", () => {
    const path = strokePath([0, 0], [10, 0]);
    expect(path.length).toBeGreaterThan(10);
    const mask = new Uint8Array(16 * 16);
    applyStroke(mask, 16, 16, { points: path, radius: 1, erase: false });
    for (let x = 0; x <= 10; x++) {
      expect(mask[x]).toBe(1);
    }
  });

  it("clips strokes at the image border", () => {
    const mask = new Uint8Array(8 * 8);
    applyStroke(mask, 8, 8, { points: [[0, 0]], radius: 3, erase: false });
    expect(mask[0]).toBe(1); // no out-of-bounds write crashed
  });
});
