export interface SceneSummary {
  primitives: number;
  aabb: number[][];
  cameras: number;
}

export interface Rect {
  u0: number;
  v0: number;
  u1: number;
  v1: number;
}

export interface PointPair {
  handle: number[];
  target: number[];
  handle_px?: number[] | null;
  target_px?: number[] | null;
}

export interface Losses {
  lat: number;
  img: number;
  src: number;
  rr: number;
  total: number;
}

export interface ProgressEvent {
  id: number;
  iteration: number;
  s: number;
  stage: number;
  status: string;
  t: number | null;
  losses: Losses | null;
  preview: string;
  final?: Record<string, number>;
}

export interface RunStatus {
  status: string;
  iteration?: number;
  stage?: number;
  round: number;
  s?: number;
  primitives?: number;
  pause_reason?: string | null;
}

export interface ApiError {
  error: { code: string; message: string };
}
