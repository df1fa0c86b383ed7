// Progress event log with reconnect-resume semantics: events are keyed by a
// server-assigned contiguous id, so the chart can always be rebuilt without
// gaps after a socket drop.

import type { ProgressEvent } from "./types.js";

export class ProgressLog {
  private events = new Map<number, ProgressEvent>();

  get lastEventId(): number {
    let max = -1;
    for (const id of this.events.keys()) if (id > max) max = id;
    return max;
  }

  add(event: ProgressEvent): void {
    this.events.set(event.id, event);
  }

  /** Events in id order. */
  ordered(): ProgressEvent[] {
    return [...this.events.values()].sort((a, b) => a.id - b.id);
  }

  /** True when ids form 0..n-1 with no holes. */
  contiguous(): boolean {
    const ids = this.ordered().map((e) => e.id);
    return ids.every((id, k) => id === k);
  }

  /** Iterations for the chart x-axis; strictly increasing by construction. */
  iterations(): number[] {
    return this.ordered().map((e) => e.iteration);
  }

  /** Number of stage flips observed (a healthy two-stage run has exactly 1). */
  stageTransitions(): number {
    const stages = this.ordered().map((e) => e.stage);
    let flips = 0;
    for (let k = 1; k < stages.length; k++) {
      if (stages[k] !== stages[k - 1]) flips += 1;
    }
    return flips;
  }

  terminal(): ProgressEvent | undefined {
    return this.ordered().find((e) => e.final !== undefined);
  }
}

export interface SocketLike {
  onmessage: ((ev: { data: string }) => void) | null;
  onclose: ((ev: unknown) => void) | null;
  onerror: ((ev: unknown) => void) | null;
  close(): void;
}

export type SocketFactory = (url: string) => SocketLike;

/** WebSocket wrapper that resumes from the last seen event id on drop. */
export class ProgressStream {
  private socket: SocketLike | null = null;
  private stopped = false;

  constructor(
    private urlFor: (lastEventId: number) => string,
    private log: ProgressLog,
    private onEvent: (e: ProgressEvent) => void,
    private makeSocket: SocketFactory,
    private reconnectDelayMs = 500,
  ) {}

  start(): void {
    this.stopped = false;
    this.connect();
  }

  private connect(): void {
    const socket = this.makeSocket(this.urlFor(this.log.lastEventId));
    this.socket = socket;
    socket.onmessage = (ev) => {
      const event = JSON.parse(ev.data) as ProgressEvent;
      this.log.add(event);
      this.onEvent(event);
    };
    socket.onclose = () => {
      if (this.stopped) return;
      if (this.log.terminal() !== undefined) return;
      setTimeout(() => this.connect(), this.reconnectDelayMs);
    };
    socket.onerror = () => socket.close();
  }

  stop(): void {
    this.stopped = true;
    this.socket?.close();
  }
}
