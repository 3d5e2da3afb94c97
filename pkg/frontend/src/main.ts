// Browser bootstrap: connect to the session server from ?server=...,
// capture W/S/A/D/space, render frames + HUD, show the outcome banner.

import { SessionClient } from "./client.js";
import { canvasSize, drawDeadlineBar, drawFrame } from "./render.js";
import { ACTION_NAMES, mapKeyboardKey } from "./protocol.js";

function byId<T extends HTMLElement>(id: string): T {
  const el = document.getElementById(id);
  if (!el) {
    throw new Error(`missing element #${id}`);
  }
  return el as T;
}

function start(): void {
  const params = new URLSearchParams(window.location.search);
  const server = params.get("server") ?? "ws://127.0.0.1:8700";
  const scale = Math.max(parseInt(params.get("scale") ?? "10", 10), 1);

  const canvas = byId<HTMLCanvasElement>("bev");
  const { width, height } = canvasSize(scale);
  canvas.width = width;
  canvas.height = height;
  const ctx = canvas.getContext("2d")!;

  const statusEl = byId<HTMLSpanElement>("status");
  const hudEl = byId<HTMLDivElement>("hud");
  const bannerEl = byId<HTMLDivElement>("banner");
  const latencyEl = byId<HTMLSpanElement>("latency");
  const keyEl = byId<HTMLSpanElement>("lastkey");
  const reconnectBtn = byId<HTMLButtonElement>("reconnect");

  let client: SessionClient | null = null;

  function connect(): void {
    bannerEl.textContent = "";
    bannerEl.className = "banner";
    client = new SessionClient(server, {
      factory: (url) => new WebSocket(url),
      onStatus: (status) => {
        statusEl.textContent = status;
        statusEl.className = `status ${status}`;
        reconnectBtn.hidden = status === "connected" || status === "connecting";
      },
      onEnd: (end) => {
        bannerEl.textContent = `${end.outcome.toUpperCase()} after ${end.totals.steps} steps, reward ${end.totals.reward.toFixed(2)}`;
        bannerEl.className = `banner ${end.outcome}`;
      },
    });
    client.connect();
  }

  window.addEventListener("keydown", (event) => {
    const mapped = mapKeyboardKey(event.key);
    if (mapped !== null) {
      event.preventDefault();
      client?.pressKey(event.key);
      keyEl.textContent = ACTION_NAMES[mapped];
    }
  });

  reconnectBtn.addEventListener("click", connect);

  function renderLoop(): void {
    const c = client;
    if (c) {
      const frame = c.takeFrame() ?? c.latest;
      if (frame) {
        drawFrame(ctx, frame, scale);
        drawDeadlineBar(ctx, frame, scale, Date.now());
        hudEl.textContent =
          `speed ${frame.hud.speed_kmh.toFixed(1)} km/h | lane ${frame.hud.lane} | ` +
          `step ${frame.hud.step} | reward ${frame.hud.reward_total.toFixed(2)}`;
        latencyEl.textContent = `${Math.max(Date.now() - frame.receivedAt, 0)} ms ago, ` +
          `drops ${c.counters.framesDropped}`;
      }
    }
    requestAnimationFrame(renderLoop);
  }

  connect();
  requestAnimationFrame(renderLoop);
}

window.addEventListener("DOMContentLoaded", start);
