// Zoom/pan mapping between voxel coordinates and canvas pixels.
// Screen = voxel * zoom + pan; all tools convert through this one place.

export interface ViewTransform {
  zoom: number;
  panX: number;
  panY: number;
}

export interface ScreenRect {
  x0: number;
  y0: number;
  x1: number;
  y1: number;
}

export interface Box2D {
  sliceIndex: number;
  xMin: number;
  yMin: number;
  xMax: number;
  yMax: number;
}

export function voxelToScreen(t: ViewTransform, vx: number, vy: number): [number, number] {
  return [vx * t.zoom + t.panX, vy * t.zoom + t.panY];
}

export function screenToVoxel(t: ViewTransform, sx: number, sy: number): [number, number] {
  return [(sx - t.panX) / t.zoom, (sy - t.panY) / t.zoom];
}

export function roundTripIdentity(t: ViewTransform, vx: number, vy: number): boolean {
  const [sx, sy] = voxelToScreen(t, vx, vy);
  const [bx, by] = screenToVoxel(t, sx, sy);
  return Math.round(bx) === vx && Math.round(by) === vy;
}

const MIN_RECT_PX = 2;

/** Map a dragged screen rectangle to a half-open voxel box on a slice.
 *  Degenerate rectangles (under 2px a side) are rejected; coordinates are
 *  rounded to the nearest voxel and clamped to the image bounds. */
export function screenRectToBox(
  t: ViewTransform,
  rect: ScreenRect,
  sliceIndex: number,
  width: number,
  height: number,
): Box2D | null {
  const x0 = Math.min(rect.x0, rect.x1);
  const x1 = Math.max(rect.x0, rect.x1);
  const y0 = Math.min(rect.y0, rect.y1);
  const y1 = Math.max(rect.y0, rect.y1);
  if (x1 - x0 < MIN_RECT_PX || y1 - y0 < MIN_RECT_PX) {
    return null;
  }
  const [vx0, vy0] = screenToVoxel(t, x0, y0);
  const [vx1, vy1] = screenToVoxel(t, x1, y1);
  const xMin = Math.max(0, Math.min(width - 1, Math.round(vx0)));
  const yMin = Math.max(0, Math.min(height - 1, Math.round(vy0)));
  const xMax = Math.max(xMin + 1, Math.min(width, Math.round(vx1)));
  const yMax = Math.max(yMin + 1, Math.min(height, Math.round(vy1)));
  return { sliceIndex, xMin, yMin, xMax, yMax };
}

/** Two slice picks define an inclusive range; out-of-order picks swap. */
export function picksToRange(first: number, second: number): { top: number; bottom: number; swapped: boolean } {
  if (second < first) {
    return { top: second, bottom: first, swapped: true };
  }
  return { top: first, bottom: second, swapped: false };
}
