// Server-rendered viewport: shows /v1/render PNGs, captures rectangle drags
// and point picks in image pixel coordinates, draws overlays. All geometry
// (projection, picking depth) happens server-side.

import { ApiClient } from "./api.js";
import { EditDraft, normalizeRect } from "./draft.js";
import type { PointPair } from "./types.js";

export type Tool = "mask" | "points" | "none";

const HANDLE_COLOR = "#3b6cff"; // handle points
const TARGET_COLOR = "#ff3b3b"; // target points

export class Viewport {
  camera = 0;
  layer: "rgb" | "mask" = "rgb";
  tool: Tool = "none";
  renderWidth = 256;
  private image = new Image();
  private dragStart: { u: number; v: number } | null = null;
  private dragNow: { u: number; v: number } | null = null;
  private projected: PointPair[] = [];
  onRectDone: ((camera: number, rect: ReturnType<typeof normalizeRect>) => void) | null = null;
  onPick: ((camera: number, u: number, v: number) => void) | null = null;

  constructor(
    private canvas: HTMLCanvasElement,
    private api: ApiClient,
    private draft: EditDraft,
  ) {
    canvas.addEventListener("mousedown", (e) => this.mouseDown(e));
    canvas.addEventListener("mousemove", (e) => this.mouseMove(e));
    canvas.addEventListener("mouseup", (e) => this.mouseUp(e));
    this.image.onload = () => this.paint();
  }

  private toImageCoords(e: MouseEvent): { u: number; v: number } {
    const box = this.canvas.getBoundingClientRect();
    const u = ((e.clientX - box.left) / box.width) * this.renderWidth;
    const v = ((e.clientY - box.top) / box.height) * this.renderWidth;
    return { u, v };
  }

  private mouseDown(e: MouseEvent): void {
    if (this.tool !== "mask") return;
    this.dragStart = this.toImageCoords(e);
    this.dragNow = this.dragStart;
  }

  private mouseMove(e: MouseEvent): void {
    if (this.tool !== "mask" || this.dragStart === null) return;
    this.dragNow = this.toImageCoords(e);
    this.paint();
  }

  private mouseUp(e: MouseEvent): void {
    const at = this.toImageCoords(e);
    if (this.tool === "mask" && this.dragStart !== null) {
      const rect = normalizeRect(this.dragStart, at);
      this.dragStart = this.dragNow = null;
      if (rect.u1 - rect.u0 > 1 && rect.v1 - rect.v0 > 1) {
        this.onRectDone?.(this.camera, rect);
      }
      this.paint();
      return;
    }
    if (this.tool === "points") {
      this.onPick?.(this.camera, at.u, at.v);
    }
  }

  /** Re-fetch the render and the server-side projections of control pairs. */
  async refresh(bust = 0): Promise<void> {
    this.image.src = this.api.renderUrl(this.camera, this.renderWidth, this.layer, bust);
    try {
      this.projected = await this.api.getPoints(this.camera);
    } catch {
      this.projected = [];
    }
    this.paint();
  }

  async setCamera(index: number): Promise<void> {
    this.camera = index;
    await this.refresh();
  }

  async setLayer(layer: "rgb" | "mask"): Promise<void> {
    // pure view change; never touches server state
    this.layer = layer;
    await this.refresh();
  }

  private scale(): number {
    return this.canvas.width / this.renderWidth;
  }

  paint(): void {
    const ctx = this.canvas.getContext("2d");
    if (!ctx) return;
    ctx.imageSmoothingEnabled = false;
    ctx.fillStyle = "#000";
    ctx.fillRect(0, 0, this.canvas.width, this.canvas.height);
    if (this.image.complete && this.image.naturalWidth > 0) {
      ctx.drawImage(this.image, 0, 0, this.canvas.width, this.canvas.height);
    }
    const k = this.scale();

    // committed rectangles for this camera, plus the live drag
    ctx.lineWidth = 2;
    for (const r of this.draft.rects) {
      if (r.camera !== this.camera) continue;
      ctx.strokeStyle = r.acked ? "#7fdc7f" : "#dcd87f";
      ctx.strokeRect(r.rect.u0 * k, r.rect.v0 * k,
                     (r.rect.u1 - r.rect.u0) * k, (r.rect.v1 - r.rect.v0) * k);
    }
    if (this.dragStart && this.dragNow) {
      const r = normalizeRect(this.dragStart, this.dragNow);
      ctx.strokeStyle = "#dcd87f";
      ctx.setLineDash([5, 3]);
      ctx.strokeRect(r.u0 * k, r.v0 * k, (r.u1 - r.u0) * k, (r.v1 - r.v0) * k);
      ctx.setLineDash([]);
    }

    // control pairs projected by the server for this camera
    for (const pair of this.projected) {
      if (!pair.handle_px || !pair.target_px) continue;
      const [hu, hv] = pair.handle_px;
      const [tu, tv] = pair.target_px;
      ctx.strokeStyle = "#ffffff88";
      ctx.beginPath();
      ctx.moveTo(hu * k, hv * k);
      ctx.lineTo(tu * k, tv * k);
      ctx.stroke();
      ctx.fillStyle = HANDLE_COLOR;
      ctx.beginPath();
      ctx.arc(hu * k, hv * k, 4, 0, Math.PI * 2);
      ctx.fill();
      ctx.fillStyle = TARGET_COLOR;
      ctx.beginPath();
      ctx.arc(tu * k, tv * k, 4, 0, Math.PI * 2);
      ctx.fill();
    }

    // pending first click of a pair
    const armed = this.draft.pendingHandle;
    if (armed && armed.camera === this.camera) {
      ctx.strokeStyle = HANDLE_COLOR;
      ctx.beginPath();
      ctx.arc(armed.u * k, armed.v * k, 6, 0, Math.PI * 2);
      ctx.stroke();
    }
  }
}
