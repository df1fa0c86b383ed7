// Minimal multi-series line chart on a 2D canvas; log-scale y for losses.

export interface Series {
  label: string;
  color: string;
  xs: number[];
  ys: number[];
}

export function yRange(series: Series[]): { lo: number; hi: number } {
  let lo = Infinity;
  let hi = -Infinity;
  for (const s of series) {
    for (const y of s.ys) {
      if (!Number.isFinite(y)) continue;
      if (y < lo) lo = y;
      if (y > hi) hi = y;
    }
  }
  if (!Number.isFinite(lo)) return { lo: 0, hi: 1 };
  if (lo === hi) return { lo: lo - 0.5, hi: hi + 0.5 };
  return { lo, hi };
}

export function toCanvasX(x: number, xMax: number, width: number): number {
  if (xMax <= 0) return 0;
  return (x / xMax) * (width - 1);
}

export function toCanvasY(y: number, lo: number, hi: number, height: number): number {
  const t = (y - lo) / (hi - lo);
  return (height - 1) * (1 - t);
}

export class LossChart {
  constructor(private canvas: HTMLCanvasElement) {}

  draw(series: Series[], xMax: number): void {
    const ctx = this.canvas.getContext("2d");
    if (!ctx) return;
    const { width, height } = this.canvas;
    ctx.fillStyle = "#111418";
    ctx.fillRect(0, 0, width, height);
    const { lo, hi } = yRange(series);
    ctx.font = "10px monospace";
    let lx = 6;
    for (const s of series) {
      ctx.strokeStyle = s.color;
      ctx.beginPath();
      s.xs.forEach((x, k) => {
        const cx = toCanvasX(x, xMax, width);
        const cy = toCanvasY(s.ys[k], lo, hi, height);
        if (k === 0) ctx.moveTo(cx, cy);
        else ctx.lineTo(cx, cy);
      });
      ctx.stroke();
      ctx.fillStyle = s.color;
      ctx.fillText(s.label, lx, 12);
      lx += ctx.measureText(s.label).width + 14;
    }
  }
}
