// Mask-editing tools.  Brush strokes edit a local per-slice mask that is
// queued for POST /refine; the box and range tools produce prompt payloads.

export interface BrushStroke {
  points: Array<[number, number]>; // voxel coordinates along the drag
  radius: number; // voxels
  erase: boolean;
}

/** Apply a stroke to a (height x width) mask in place. */
export function applyStroke(
  mask: Uint8Array,
  width: number,
  height: number,
  stroke: BrushStroke,
): Uint8Array {
  const r = Math.max(0.5, stroke.radius);
  const r2 = r * r;
  const value = stroke.erase ? 0 : 1;
  for (const [cx, cy] of stroke.points) {
    const x0 = Math.max(0, Math.floor(cx - r));
    const x1 = Math.min(width - 1, Math.ceil(cx + r));
    const y0 = Math.max(0, Math.floor(cy - r));
    const y1 = Math.min(height - 1, Math.ceil(cy + r));
    for (let y = y0; y <= y1; y++) {
      for (let x = x0; x <= x1; x++) {
        const dx = x - cx;
        const dy = y - cy;
        if (dx * dx + dy * dy <= r2) {
          mask[y * width + x] = value;
        }
      }
    }
  }
  return mask;
}

/** Interpolate drag events into a dense point list so fast drags leave no
 *  gaps. */
export function strokePath(
  from: [number, number],
  to: [number, number],
  stepVoxels = 0.75,
): Array<[number, number]> {
  const dx = to[0] - from[0];
  const dy = to[1] - from[1];
  const dist = Math.hypot(dx, dy);
  const n = Math.max(1, Math.ceil(dist / stepVoxels));
  const points: Array<[number, number]> = [];
  for (let i = 0; i <= n; i++) {
    points.push([from[0] + (dx * i) / n, from[1] + (dy * i) / n]);
  }
  return points;
}
