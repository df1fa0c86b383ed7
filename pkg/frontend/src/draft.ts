// Local edit draft mirroring the server draft. Anything not yet acknowledged
// by the server is flagged pending; cancel drops local state without any
// server call.

import type { PointPair, Rect } from "./types.js";

export interface ViewRect {
  camera: number;
  rect: Rect;
  acked: boolean;
}

export function normalizeRect(a: { u: number; v: number }, b: { u: number; v: number }): Rect {
  return {
    u0: Math.min(a.u, b.u),
    v0: Math.min(a.v, b.v),
    u1: Math.max(a.u, b.u),
    v1: Math.max(a.v, b.v),
  };
}

export class EditDraft {
  rects: ViewRect[] = [];
  pairs: PointPair[] = [];
  pairsAcked = false;
  maskedCount: number | null = null;
  pendingHandle: { camera: number; u: number; v: number } | null = null;

  addRect(camera: number, rect: Rect): void {
    // one rectangle per camera; a new drag replaces the old one
    this.rects = this.rects.filter((r) => r.camera !== camera);
    this.rects.push({ camera, rect, acked: false });
    this.maskedCount = null;
  }

  ackMask(maskedCount: number): void {
    for (const r of this.rects) r.acked = true;
    this.maskedCount = maskedCount;
  }

  cancelRects(): void {
    this.rects = [];
    this.maskedCount = null;
  }

  hasPending(): boolean {
    return this.rects.some((r) => !r.acked) || (this.pairs.length > 0 && !this.pairsAcked);
  }

  /** First click arms the handle; second click completes the pair. */
  clickPick(camera: number, u: number, v: number):
    | { kind: "handle-armed" }
    | { kind: "pair"; handle: { camera: number; u: number; v: number }; target: { u: number; v: number } } {
    if (this.pendingHandle === null || this.pendingHandle.camera !== camera) {
      this.pendingHandle = { camera, u, v };
      return { kind: "handle-armed" };
    }
    const handle = this.pendingHandle;
    this.pendingHandle = null;
    return { kind: "pair", handle, target: { u, v } };
  }

  setPairs(pairs: PointPair[]): void {
    this.pairs = pairs;
    this.pairsAcked = true;
  }

  deletePair(index: number): void {
    this.pairs.splice(index, 1);
    this.pairsAcked = false;
  }

  complete(): boolean {
    return this.maskedCount !== null && this.maskedCount > 0 && this.pairs.length > 0;
  }
}
