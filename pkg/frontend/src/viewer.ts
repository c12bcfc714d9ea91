// Canvas slice rendering: grayscale window/level mapping plus an RLE mask
// overlay.  Display windowing is purely visual and never touches the
// server-side normalization.

import { ViewTransform } from "./transform";

export function renderSlice(
  ctx: CanvasRenderingContext2D,
  pixels: Float32Array,
  width: number,
  height: number,
  windowCenter: number,
  windowWidth: number,
  transform: ViewTransform,
  overlay: Uint8Array | null,
  overlayOpacity: number,
): void {
  const image = ctx.createImageData(width, height);
  const lo = windowCenter - windowWidth / 2;
  const scale = 255 / Math.max(1e-6, windowWidth);
  for (let i = 0; i < width * height; i++) {
    const g = Math.max(0, Math.min(255, (pixels[i] - lo) * scale));
    const o = i * 4;
    image.data[o] = g;
    image.data[o + 1] = g;
    image.data[o + 2] = g;
    image.data[o + 3] = 255;
    if (overlay && overlay[i]) {
      const a = overlayOpacity;
      image.data[o] = g * (1 - a) + 255 * a;
      image.data[o + 1] = g * (1 - a) + 80 * a;
      image.data[o + 2] = g * (1 - a) + 160 * a;
    }
  }
  const off = new OffscreenCanvas(width, height);
  const offCtx = off.getContext("2d")!;
  offCtx.putImageData(image, 0, 0);
  ctx.save();
  ctx.imageSmoothingEnabled = false;
  ctx.clearRect(0, 0, ctx.canvas.width, ctx.canvas.height);
  ctx.setTransform(transform.zoom, 0, 0, transform.zoom, transform.panX, transform.panY);
  ctx.drawImage(off, 0, 0);
  ctx.restore();
}

export function drawBoxOutline(
  ctx: CanvasRenderingContext2D,
  transform: ViewTransform,
  box: { xMin: number; yMin: number; xMax: number; yMax: number },
  color = "#3b82f6",
): void {
  ctx.save();
  ctx.strokeStyle = color;
  ctx.lineWidth = 2;
  ctx.setLineDash([6, 3]);
  const x = box.xMin * transform.zoom + transform.panX;
  const y = box.yMin * transform.zoom + transform.panY;
  ctx.strokeRect(x, y, (box.xMax - box.xMin) * transform.zoom, (box.yMax - box.yMin) * transform.zoom);
  ctx.restore();
}
