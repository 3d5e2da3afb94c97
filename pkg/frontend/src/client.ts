// Session driver: owns the socket, the tick/latch logic, and the counters.
// Transport is injected so the same message layer runs in the browser
// (native WebSocket) and under node test drivers.

import {
  EndMessage,
  FrameMessage,
  PROTOCOL_VERSION,
  decodeGrid,
  encodeAbort,
  encodeHello,
  encodeKey,
  mapKeyboardKey,
  parseServerMessage,
} from "./protocol.js";

export interface WebSocketLike {
  send(data: string): void;
  close(): void;
  addEventListener(type: "open" | "message" | "close" | "error", cb: (event: any) => void): void;
}

export type WebSocketFactory = (url: string) => WebSocketLike;

export type ConnectionStatus = "connecting" | "connected" | "closed" | "error";

export interface FrameView {
  step: number;
  grid: Uint8Array;
  hud: FrameMessage["hud"];
  tickMs: number | null;
  receivedAt: number;
}

export interface SessionCounters {
  framesReceived: number;
  framesDropped: number; // malformed grids, skipped
  framesReplaced: number; // arrived before the previous one was consumed
  keysSent: number;
  ticks: number;
}

export interface SessionClientOptions {
  factory: WebSocketFactory;
  version?: string;
  flushMarginMs?: number; // how long before the deadline the latched key is flushed
  onFrame?: (frame: FrameView) => void;
  onEnd?: (end: EndMessage) => void;
  onStatus?: (status: ConnectionStatus) => void;
  now?: () => number;
  setTimer?: (cb: () => void, ms: number) => unknown;
  clearTimer?: (handle: unknown) => void;
}

export class SessionClient {
  readonly counters: SessionCounters = {
    framesReceived: 0,
    framesDropped: 0,
    framesReplaced: 0,
    keysSent: 0,
    ticks: 0,
  };
  status: ConnectionStatus = "connecting";
  latest: FrameView | null = null;
  ended: EndMessage | null = null;

  private socket: WebSocketLike | null = null;
  private pendingKey: string | null = null;
  private flushedThisTick = false;
  private flushHandle: unknown = null;
  private consumed = true;

  private readonly version: string;
  private readonly flushMarginMs: number;
  private readonly now: () => number;
  private readonly setTimer: (cb: () => void, ms: number) => unknown;
  private readonly clearTimer: (handle: unknown) => void;

  constructor(private readonly url: string, private readonly opts: SessionClientOptions) {
    this.version = opts.version ?? PROTOCOL_VERSION;
    this.flushMarginMs = opts.flushMarginMs ?? 60;
    this.now = opts.now ?? (() => Date.now());
    this.setTimer = opts.setTimer ?? ((cb, ms) => setTimeout(cb, ms));
    this.clearTimer = opts.clearTimer ?? ((h) => clearTimeout(h as any));
  }

  connect(): void {
    this.setStatus("connecting");
    const socket = this.opts.factory(this.url);
    this.socket = socket;
    socket.addEventListener("open", () => {
      this.setStatus("connected");
      socket.send(encodeHello(this.version));
    });
    socket.addEventListener("message", (event) => {
      const data = typeof event.data === "string" ? event.data : String(event.data);
      this.handleMessage(data);
    });
    socket.addEventListener("close", () => {
      this.cancelFlush();
      if (this.status !== "error") {
        this.setStatus("closed");
      }
    });
    socket.addEventListener("error", () => {
      this.cancelFlush();
      this.setStatus("error");
    });
  }

  // Latch a raw keyboard key; unmapped keys are ignored. Later presses in
  // the same tick replace the pending one; only the final is sent.
  pressKey(rawKey: string): void {
    const mapped = mapKeyboardKey(rawKey);
    if (mapped === null || this.ended !== null) {
      return;
    }
    this.pendingKey = mapped;
    if (this.flushedThisTick) {
      // late press: it becomes next tick's pending key
      return;
    }
  }

  abort(): void {
    this.socket?.send(encodeAbort());
  }

  close(): void {
    this.cancelFlush();
    this.socket?.close();
  }

  // Consume the newest frame for rendering (latest-frame-wins mailbox).
  takeFrame(): FrameView | null {
    if (this.latest !== null && !this.consumed) {
      this.consumed = true;
      return this.latest;
    }
    return null;
  }

  private handleMessage(data: string): void {
    const msg = parseServerMessage(data);
    if (msg === null) {
      this.counters.framesDropped += 1;
      return;
    }
    if (msg.type === "end") {
      this.ended = msg;
      this.cancelFlush();
      this.opts.onEnd?.(msg);
      return;
    }
    const grid = decodeGrid(msg.grid);
    if (grid === null) {
      this.counters.framesDropped += 1;
      return;
    }
    if (!this.consumed) {
      this.counters.framesReplaced += 1;
    }
    this.counters.framesReceived += 1;
    this.counters.ticks += 1;
    this.latest = {
      step: msg.step,
      grid,
      hud: msg.hud,
      tickMs: msg.tick_ms,
      receivedAt: this.now(),
    };
    this.consumed = false;
    this.startTick(msg.tick_ms);
    this.opts.onFrame?.(this.latest);
  }

  private startTick(tickMs: number | null): void {
    this.cancelFlush();
    this.flushedThisTick = false;
    const wait = tickMs !== null ? Math.max(tickMs - this.flushMarginMs, 0) : 0;
    this.flushHandle = this.setTimer(() => this.flushKey(), wait);
  }

  private flushKey(): void {
    this.flushHandle = null;
    this.flushedThisTick = true;
    if (this.pendingKey !== null && this.ended === null) {
      this.socket?.send(encodeKey(this.pendingKey));
      this.counters.keysSent += 1;
      this.pendingKey = null;
    }
  }

  private cancelFlush(): void {
    if (this.flushHandle !== null) {
      this.clearTimer(this.flushHandle);
      this.flushHandle = null;
    }
  }

  private setStatus(status: ConnectionStatus): void {
    this.status = status;
    this.opts.onStatus?.(status);
  }
}
