// Wire protocol spoken with the demo session server: JSON text messages
// over a WebSocket, one frame per 0.5 s tick, at most one key back per tick.

export const PROTOCOL_VERSION = "cockpit-1";

export const FRAME_LONG = 80; // px along the road, 1 m/px
export const FRAME_LAT = 45; // px across the road, 0.5 m/px

export interface Hud {
  speed_kmh: number;
  lane: number;
  step: number;
  reward_total: number;
}

export interface FrameMessage {
  type: "frame";
  session: number;
  step: number;
  grid: string; // base64 of 80x45 uint8 intensities
  hud: Hud;
  tick_ms: number | null; // server deadline for the next action, epoch-free ms
}

export interface EndMessage {
  type: "end";
  outcome: "success" | "collision" | "missed_exit" | "running";
  totals: { steps: number; reward: number };
}

export type ServerMessage = FrameMessage | EndMessage;

export interface HelloMessage {
  type: "hello";
  version: string;
}

export interface KeyMessage {
  type: "key";
  key: string;
}

export interface AbortMessage {
  type: "abort";
}

export type ClientMessage = HelloMessage | KeyMessage | AbortMessage;

// W-S-A-D plus space; every other key is ignored by the cockpit.
const KEY_TO_ACTION: Record<string, string> = {
  w: "w",
  s: "s",
  a: "a",
  d: "d",
  " ": "space",
  spacebar: "space",
  space: "space",
};

export const ACTION_NAMES: Record<string, string> = {
  w: "accelerate",
  s: "brake",
  a: "lane left",
  d: "lane right",
  space: "maintain",
};

export function mapKeyboardKey(key: string): string | null {
  return KEY_TO_ACTION[key.toLowerCase()] ?? null;
}

export function parseServerMessage(data: string): ServerMessage | null {
  let parsed: unknown;
  try {
    parsed = JSON.parse(data);
  } catch {
    return null;
  }
  const msg = parsed as { type?: string };
  if (msg.type === "frame" || msg.type === "end") {
    return parsed as ServerMessage;
  }
  return null;
}

export function decodeGrid(grid: string): Uint8Array | null {
  let raw: string;
  try {
    raw = typeof atob === "function" ? atob(grid) : Buffer.from(grid, "base64").toString("latin1");
  } catch {
    return null;
  }
  if (raw.length !== FRAME_LONG * FRAME_LAT) {
    return null;
  }
  const out = new Uint8Array(raw.length);
  for (let i = 0; i < raw.length; i++) {
    out[i] = raw.charCodeAt(i) & 0xff;
  }
  return out;
}

export function encodeHello(version: string = PROTOCOL_VERSION): string {
  return JSON.stringify({ type: "hello", version });
}

export function encodeKey(key: string): string {
  return JSON.stringify({ type: "key", key });
}

export function encodeAbort(): string {
  return JSON.stringify({ type: "abort" });
}
