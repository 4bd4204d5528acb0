// Strip charts drawn straight onto a 2D context from ring buffers.

import { RingBuffer } from "./ring.js";

export interface ChartBox {
  x: number;
  y: number;
  w: number;
  h: number;
}

export function drawStrip(ctx: CanvasRenderingContext2D, box: ChartBox,
                          ring: RingBuffer, label: string, color: string): void {
  ctx.strokeStyle = "#444";
  ctx.strokeRect(box.x, box.y, box.w, box.h);
  ctx.fillStyle = "#888";
  ctx.font = "11px sans-serif";
  const values = ring.values();
  const latest = values.length ? values[values.length - 1] : null;
  ctx.fillText(latest === null ? label : `${label} ${latest.toPrecision(3)}`,
               box.x + 4, box.y + 12);
  if (values.length < 2) return;   // empty chart is fine, just no polyline
  let lo = Math.min(...values);
  let hi = Math.max(...values);
  if (hi - lo < 1e-9) {
    hi = lo + 1e-9;
  }
  ctx.strokeStyle = color;
  ctx.beginPath();
  const n = ring.capacity;
  values.forEach((v, i) => {
    const px = box.x + (box.w * (i + (n - values.length))) / n;
    const py = box.y + box.h - ((v - lo) / (hi - lo)) * (box.h - 16) - 2;
    if (i === 0) ctx.moveTo(px, py);
    else ctx.lineTo(px, py);
  });
  ctx.stroke();
}
