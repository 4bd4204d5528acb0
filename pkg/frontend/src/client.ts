// Reconnecting websocket client. Auto-reconnects with exponential backoff,
// validates every outbound message, drops (and counts) malformed frames.

import { ClientMessage, StateMessage, parseStateMessage, validateClientMessage } from "./protocol.js";

export type Status = "connecting" | "open" | "closed";

export interface SocketLike {
  send(data: string): void;
  close(): void;
  onopen: (() => void) | null;
  onclose: (() => void) | null;
  onerror: (() => void) | null;
  onmessage: ((ev: { data: unknown }) => void) | null;
}

export interface ClientOptions {
  socketFactory?: (url: string) => SocketLike;
  scheduler?: (fn: () => void, ms: number) => unknown;
  baseBackoffMs?: number;
  maxBackoffMs?: number;
}

export class ReconnectingClient {
  onState: ((msg: StateMessage) => void) | null = null;
  onStatus: ((status: Status) => void) | null = null;
  droppedFrames = 0;
  sendErrors = 0;

  private socket: SocketLike | null = null;
  private backoffMs: number;
  private readonly base: number;
  private readonly max: number;
  private readonly makeSocket: (url: string) => SocketLike;
  private readonly schedule: (fn: () => void, ms: number) => unknown;
  private stopped = false;

  constructor(readonly url: string, opts: ClientOptions = {}) {
    this.makeSocket = opts.socketFactory ??
      ((u) => new WebSocket(u) as unknown as SocketLike);
    this.schedule = opts.scheduler ?? ((fn, ms) => setTimeout(fn, ms));
    this.base = opts.baseBackoffMs ?? 500;
    this.max = opts.maxBackoffMs ?? 8000;
    this.backoffMs = this.base;
  }

  connect(): void {
    if (this.stopped) return;
    this.onStatus?.("connecting");
    const ws = this.makeSocket(this.url);
    this.socket = ws;
    ws.onopen = () => {
      this.backoffMs = this.base;
      this.onStatus?.("open");
    };
    ws.onmessage = (ev) => {
      const msg = parseStateMessage(String(ev.data));
      if (msg === null) {
        this.droppedFrames += 1;
        return;
      }
      this.onState?.(msg);
    };
    const retry = () => {
      if (this.stopped) return;
      this.onStatus?.("closed");
      this.socket = null;
      const delay = this.backoffMs;
      this.backoffMs = Math.min(this.backoffMs * 2, this.max);
      this.schedule(() => this.connect(), delay);
    };
    ws.onclose = retry;
    ws.onerror = () => { /* onclose follows and handles the retry */ };
  }

  get currentBackoffMs(): number {
    return this.backoffMs;
  }

  send(msg: ClientMessage): boolean {
    const problem = validateClientMessage(msg);
    if (problem !== null) {
      this.sendErrors += 1;
      return false;
    }
    if (this.socket === null) {
      this.sendErrors += 1;
      return false;
    }
    try {
      this.socket.send(JSON.stringify(msg));
      return true;
    } catch {
      this.sendErrors += 1;
      return false;
    }
  }

  stop(): void {
    this.stopped = true;
    this.socket?.close();
  }
}
