// Application wiring: scene loading, mask/point tools, run console with the
// live loss chart and preview stream, multi-round commits.

import { ApiClient, ApiHttpError } from "./api.js";
import { LossChart, Series } from "./chart.js";
import { EditDraft } from "./draft.js";
import { ProgressLog, ProgressStream } from "./progress.js";
import type { ProgressEvent } from "./types.js";
import { Viewport } from "./viewport.js";

const SERIES_STYLE: [keyof NonNullable<ProgressEvent["losses"]>, string][] = [
  ["lat", "#6fa8ff"],
  ["img", "#ffd36f"],
  ["rr", "#ff7f6f"],
  ["total", "#9fff6f"],
];

function el<T extends HTMLElement>(id: string): T {
  const node = document.getElementById(id);
  if (!node) throw new Error(`missing #${id}`);
  return node as T;
}

export class App {
  api = new ApiClient("");
  draft = new EditDraft();
  log = new ProgressLog();
  stream: ProgressStream | null = null;
  viewport!: Viewport;
  chart!: LossChart;
  round = 0;
  totalIterations = 0;

  async start(): Promise<void> {
    this.viewport = new Viewport(el("viewport"), this.api, this.draft);
    this.chart = new LossChart(el("chart"));

    el("load").onclick = () => this.loadScene();
    el("tool-mask").onclick = () => (this.viewport.tool = "mask");
    el("tool-points").onclick = () => (this.viewport.tool = "points");
    el("layer-rgb").onclick = () => this.viewport.setLayer("rgb");
    el("layer-mask").onclick = () => this.viewport.setLayer("mask");
    el("cancel-rects").onclick = () => {
      // local only: no server mutation on cancel
      this.draft.cancelRects();
      this.viewport.paint();
    };
    el("cam-prev").onclick = () => this.switchCamera(-1);
    el("cam-next").onclick = () => this.switchCamera(1);
    el("run-start").onclick = () => this.startRun();
    el("run-pause").onclick = () => this.guard(() => this.api.pauseRun());
    el("run-resume").onclick = () => this.guard(() => this.api.resumeRun());
    el("run-commit").onclick = () => this.commit();

    this.viewport.onRectDone = (camera, rect) => {
      this.draft.addRect(camera, rect);
      this.submitMask();
    };
    this.viewport.onPick = (camera, u, v) => this.pick(camera, u, v);

    const status = await this.api.status();
    this.round = status.round;
    this.note(`ready (round ${this.round})`);
  }

  note(text: string): void {
    el("note").textContent = text;
  }

  private async guard<T>(fn: () => Promise<T>): Promise<T | undefined> {
    try {
      return await fn();
    } catch (err) {
      if (err instanceof ApiHttpError) {
        this.note(`${err.code}: ${err.message}`);
        return undefined;
      }
      throw err;
    }
  }

  async loadScene(): Promise<void> {
    const scenePath = (el<HTMLInputElement>("scene-path")).value;
    const camerasPath = (el<HTMLInputElement>("cameras-path")).value;
    const summary = await this.guard(() => this.api.loadScene(scenePath, camerasPath));
    if (!summary) return;
    this.note(`${summary.primitives} primitives, ${summary.cameras} cameras`);
    await this.viewport.refresh();
  }

  async switchCamera(step: number): Promise<void> {
    const status = await this.api.status();
    await this.viewport.setCamera(Math.max(0, this.viewport.camera + step));
    this.round = status.round;
  }

  async submitMask(): Promise<void> {
    const views = this.draft.rects.map((r) => ({ camera: r.camera, rect: r.rect }));
    const count = await this.guard(
      () => this.api.maskFrustum(views, this.viewport.renderWidth));
    if (count === undefined) return; // e.g. empty_mask 409: keep rects pending
    this.draft.ackMask(count);
    this.note(`mask: ${count} primitives (add views to refine)`);
    await this.viewport.setLayer("mask");
  }

  async pick(camera: number, u: number, v: number): Promise<void> {
    const result = this.draft.clickPick(camera, u, v);
    if (result.kind === "handle-armed") {
      this.note("handle set; click the target");
      this.viewport.paint();
      return;
    }
    const pairs = await this.guard(() =>
      this.api.setPointPairByPixels(camera, this.viewport.renderWidth,
                                    { u: result.handle.u, v: result.handle.v },
                                    { u: result.target.u, v: result.target.v }));
    if (!pairs) {
      this.note("no surface under that pixel; pick again");
      return;
    }
    this.draft.setPairs(pairs);
    this.note(`${pairs.length} control pair(s)`);
    await this.viewport.refresh();
  }

  async startRun(): Promise<void> {
    const iterations = parseInt((el<HTMLInputElement>("iterations")).value || "0", 10);
    const status = await this.guard(() => this.api.startRun(iterations || undefined));
    if (!status) return;
    this.totalIterations = iterations;
    this.log = new ProgressLog();
    this.stream?.stop();
    this.stream = new ProgressStream(
      (last) => this.api.progressSocketUrl(last),
      this.log,
      (e) => this.onProgress(e),
      (url) => new WebSocket(url) as unknown as import("./progress.js").SocketLike,
    );
    this.stream.start();
    this.note("running");
  }

  onProgress(event: ProgressEvent): void {
    el("iteration").textContent = String(event.iteration);
    el("stage").textContent = `stage ${event.stage}`;
    el("stage").className = event.stage === 1 ? "badge stage1" : "badge stage2";
    if (event.losses) {
      const events = this.log.ordered().filter((e) => e.losses);
      const series: Series[] = SERIES_STYLE.map(([key, color]) => ({
        label: key,
        color,
        xs: events.map((e) => e.iteration),
        ys: events.map((e) => Math.log10(Math.max(e.losses![key], 1e-12))),
      }));
      this.chart.draw(series, Math.max(this.totalIterations, event.iteration));
    }
    if (event.id % 5 === 0 || event.final) {
      this.viewport.refresh(event.iteration);
    }
    if (event.final) {
      this.note(`done: ${JSON.stringify(event.final)}`);
    }
  }

  async commit(): Promise<void> {
    const reply = await this.guard(() => this.api.commitRun());
    if (!reply) return;
    this.round = reply.round;
    this.note(`committed; round ${reply.round} baseline refreshed`);
    this.draft = new EditDraft();
    await this.viewport.refresh(Date.now());
  }
}

if (typeof document !== "undefined" && document.getElementById("viewport")) {
  const app = new App();
  app.start();
  (window as unknown as { app: App }).app = app;
}
