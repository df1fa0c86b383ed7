import { describe, expect, it } from "vitest";

import { ApiClient, ApiHttpError } from "../src/api.js";

interface Call {
  url: string;
  init?: RequestInit;
}

function clientWith(status: number, body: unknown): { api: ApiClient; calls: Call[] } {
  const calls: Call[] = [];
  const fetchFn = async (url: string, init?: RequestInit) => {
    calls.push({ url, init });
    return new Response(JSON.stringify(body), {
      status,
      headers: { "Content-Type": "application/json" },
    });
  };
  return { api: new ApiClient("http://srv", fetchFn), calls };
}

describe("ApiClient", () => {
  it("posts frustum views in wire order [u0, v0, u1, v1]", async () => {
    const { api, calls } = clientWith(200, { masked_count: 9 });
    const count = await api.maskFrustum([
      { camera: 2, rect: { u0: 1, v0: 2, u1: 3, v1: 4 } },
    ]);
    expect(count).toBe(9);
    const sent = JSON.parse(calls[0].init!.body as string);
    expect(sent.views[0]).toEqual({ camera: 2, rect: [1, 2, 3, 4] });
  });

  it("sends pixel picks with camera and width for server-side lifting", async () => {
    const { api, calls } = clientWith(200, { pairs: [] });
    await api.setPointPairByPixels(1, 256, { u: 10, v: 20 }, { u: 30, v: 40 });
    const sent = JSON.parse(calls[0].init!.body as string);
    expect(sent.pairs[0].handle_px).toEqual({ camera: 1, width: 256, u: 10, v: 20 });
    expect(sent.pairs[0].target_px).toEqual({ camera: 1, width: 256, u: 30, v: 40 });
  });

  it("surfaces machine-readable error codes", async () => {
    const { api } = clientWith(409, { error: { code: "empty_mask", message: "retry" } });
    await expect(api.maskFrustum([])).rejects.toMatchObject({
      status: 409,
      code: "empty_mask",
    });
    const { api: api2 } = clientWith(409, { error: { code: "no_surface", message: "bg" } });
    try {
      await api2.setPointPairByPixels(0, 256, { u: 0, v: 0 }, { u: 1, v: 1 });
      throw new Error("unreachable");
    } catch (err) {
      expect(err).toBeInstanceOf(ApiHttpError);
      expect((err as ApiHttpError).code).toBe("no_surface");
    }
  });

  it("builds render and websocket urls from the base", () => {
    const { api } = clientWith(200, {});
    expect(api.renderUrl(3, 256, "mask", 7)).toBe(
      "http://srv/v1/render?camera=3&width=256&layer=mask&iter=7",
    );
    expect(api.progressSocketUrl(12)).toBe(
      "ws://srv/v1/edit/progress?last_event_id=12",
    );
  });

  it("render url building makes no request (layer toggle is read-only)", () => {
    const { api, calls } = clientWith(200, {});
    api.renderUrl(0, 256, "rgb");
    api.renderUrl(0, 256, "mask");
    expect(calls).toHaveLength(0);
  });
});
