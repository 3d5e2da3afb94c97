// Canvas rasterizer: nearest-neighbor integer upscale of the 80x45 BEV grid.
// The road flows left to right (ahead is +x); the ego sits in column 25.

import { FRAME_LAT, FRAME_LONG } from "./protocol.js";
import { FrameView } from "./client.js";

// quantized palette from the simulator: background, markings, traffic, ego
const COLORS: Record<number, [number, number, number]> = {
  0: [24, 26, 31],
  64: [95, 98, 105],
  128: [66, 135, 245],
  255: [255, 196, 0],
};

function colorOf(value: number): [number, number, number] {
  const exact = COLORS[value];
  if (exact) {
    return exact;
  }
  const gray = Math.min(value, 255);
  return [gray, gray, gray];
}

export function canvasSize(scale: number): { width: number; height: number } {
  return { width: FRAME_LONG * scale, height: FRAME_LAT * scale };
}

export function drawFrame(ctx: CanvasRenderingContext2D, frame: FrameView, scale: number): void {
  const { width, height } = canvasSize(scale);
  const image = ctx.createImageData(width, height);
  const data = image.data;
  for (let i = 0; i < FRAME_LONG; i++) {
    for (let j = 0; j < FRAME_LAT; j++) {
      const [r, g, b] = colorOf(frame.grid[i * FRAME_LAT + j]);
      for (let dy = 0; dy < scale; dy++) {
        const row = j * scale + dy;
        let offset = (row * width + i * scale) * 4;
        for (let dx = 0; dx < scale; dx++) {
          data[offset] = r;
          data[offset + 1] = g;
          data[offset + 2] = b;
          data[offset + 3] = 255;
          offset += 4;
        }
      }
    }
  }
  ctx.putImageData(image, 0, 0);
}

export function drawDeadlineBar(
  ctx: CanvasRenderingContext2D,
  frame: FrameView,
  scale: number,
  now: number
): void {
  if (frame.tickMs === null) {
    return;
  }
  const { width, height } = canvasSize(scale);
  const elapsed = now - frame.receivedAt;
  const remaining = Math.max(1 - elapsed / frame.tickMs, 0);
  ctx.fillStyle = "rgba(0, 0, 0, 0.55)";
  ctx.fillRect(0, height - 8, width, 8);
  ctx.fillStyle = remaining > 0.25 ? "#7bd88f" : "#ff6e6e";
  ctx.fillRect(0, height - 8, width * remaining, 8);
}
