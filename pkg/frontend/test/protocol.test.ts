import { describe, expect, it } from "vitest";

import {
  decodeGrid,
  encodeAbort,
  encodeHello,
  encodeKey,
  mapKeyboardKey,
  parseServerMessage,
} from "../src/protocol.js";

describe("key mapping", () => {
  it("maps W-S-A-D and space to the five actions", () => {
    expect(mapKeyboardKey("w")).toBe("w");
    expect(mapKeyboardKey("W")).toBe("w");
    expect(mapKeyboardKey("s")).toBe("s");
    expect(mapKeyboardKey("a")).toBe("a");
    expect(mapKeyboardKey("d")).toBe("d");
    expect(mapKeyboardKey(" ")).toBe("space");
  });

  it("ignores unmapped keys", () => {
    expect(mapKeyboardKey("x")).toBeNull();
    expect(mapKeyboardKey("Escape")).toBeNull();
    expect(mapKeyboardKey("ArrowUp")).toBeNull();
  });
});

describe("messages", () => {
  it("encodes client messages as JSON text", () => {
    expect(JSON.parse(encodeHello("v1"))).toEqual({ type: "hello", version: "v1" });
    expect(JSON.parse(encodeKey("d"))).toEqual({ type: "key", key: "d" });
    expect(JSON.parse(encodeAbort())).toEqual({ type: "abort" });
  });

  it("parses frame and end messages, rejects junk", () => {
    const frame = parseServerMessage(
      JSON.stringify({ type: "frame", session: 1, step: 0, grid: "", hud: {}, tick_ms: 500 })
    );
    expect(frame?.type).toBe("frame");
    const end = parseServerMessage(
      JSON.stringify({ type: "end", outcome: "success", totals: { steps: 3, reward: 1 } })
    );
    expect(end?.type).toBe("end");
    expect(parseServerMessage("not json")).toBeNull();
    expect(parseServerMessage(JSON.stringify({ type: "mystery" }))).toBeNull();
  });

  it("decodes 80x45 grids and rejects wrong sizes", () => {
    const good = Buffer.alloc(80 * 45, 7).toString("base64");
    const grid = decodeGrid(good);
    expect(grid).not.toBeNull();
    expect(grid!.length).toBe(3600);
    expect(grid![0]).toBe(7);
    expect(decodeGrid(Buffer.alloc(10).toString("base64"))).toBeNull();
    expect(decodeGrid("@@not-base64@@")).toBeNull();
  });
});
