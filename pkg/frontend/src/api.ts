// Thin client over the /v1 HTTP schema. Every number shown in the UI comes
// from one of these responses; nothing is computed locally.

import type { PointPair, Rect, RunStatus, SceneSummary } from "./types.js";

export type FetchLike = (url: string, init?: RequestInit) => Promise<Response>;

export class ApiHttpError extends Error {
  constructor(public status: number, public code: string, message: string) {
    super(message);
  }
}

async function parseError(resp: Response): Promise<ApiHttpError> {
  let code = "unknown";
  let message = resp.statusText;
  try {
    const body = await resp.json();
    code = body.error?.code ?? code;
    message = body.error?.message ?? message;
  } catch {
    // non-JSON error body
  }
  return new ApiHttpError(resp.status, code, message);
}

export class ApiClient {
  constructor(
    private base: string = "",
    private fetchFn: FetchLike = (u, i) => fetch(u, i),
  ) {}

  private async json<T>(url: string, init?: RequestInit): Promise<T> {
    const resp = await this.fetchFn(this.base + url, init);
    if (!resp.ok) throw await parseError(resp);
    return (await resp.json()) as T;
  }

  private post<T>(url: string, body?: unknown): Promise<T> {
    return this.json<T>(url, {
      method: "POST",
      headers: { "Content-Type": "application/json" },
      body: JSON.stringify(body ?? {}),
    });
  }

  loadScene(scenePath: string, camerasPath: string): Promise<SceneSummary> {
    return this.post("/v1/scene", {
      scene_path: scenePath,
      cameras_path: camerasPath,
    });
  }

  renderUrl(camera: number, width: number, layer: "rgb" | "mask", bust = 0): string {
    return `${this.base}/v1/render?camera=${camera}&width=${width}&layer=${layer}&iter=${bust}`;
  }

  async maskFrustum(
    views: { camera: number; rect: Rect }[],
    width?: number,
  ): Promise<number> {
    const body = {
      views: views.map((v) => ({
        camera: v.camera,
        rect: [v.rect.u0, v.rect.v0, v.rect.u1, v.rect.v1],
      })),
      ...(width ? { width } : {}),
    };
    const reply = await this.post<{ masked_count: number }>("/v1/mask/frustum", body);
    return reply.masked_count;
  }

  async setPointPairByPixels(
    camera: number,
    width: number,
    handle: { u: number; v: number },
    target: { u: number; v: number },
  ): Promise<PointPair[]> {
    const reply = await this.post<{ pairs: PointPair[] }>("/v1/points", {
      pairs: [
        {
          handle_px: { camera, width, u: handle.u, v: handle.v },
          target_px: { camera, width, u: target.u, v: target.v },
        },
      ],
    });
    return reply.pairs;
  }

  async getPoints(camera: number): Promise<PointPair[]> {
    const reply = await this.json<{ pairs: PointPair[] }>(
      `/v1/points?camera=${camera}`,
    );
    return reply.pairs;
  }

  startRun(iterations?: number): Promise<RunStatus> {
    return this.post("/v1/edit/start", iterations ? { iterations } : {});
  }

  pauseRun(): Promise<RunStatus> {
    return this.post("/v1/edit/pause");
  }

  resumeRun(): Promise<RunStatus> {
    return this.post("/v1/edit/resume");
  }

  commitRun(): Promise<{ round: number }> {
    return this.post("/v1/edit/commit");
  }

  status(): Promise<RunStatus> {
    return this.json("/v1/edit/status");
  }

  progressSocketUrl(lastEventId: number): string {
    const ws = this.base.replace(/^http/, "ws");
    return `${ws}/v1/edit/progress?last_event_id=${lastEventId}`;
  }
}
