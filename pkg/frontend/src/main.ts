/** Operator console wiring: live view, segment panel, alerts, restart. */

import { StreamClient } from "./client";
import { decodeFrame } from "./messages";
import { SceneRenderer } from "./render";
import { applyMessage, createState, visiblePointCount } from "./state";

const state = createState();
const canvas = document.getElementById("view") as HTMLCanvasElement;
const renderer = new SceneRenderer(canvas);

const statusBanner = document.getElementById("status")!;
const alertBanner = document.getElementById("alert")!;
const restartButton = document.getElementById("restart") as HTMLButtonElement;
const segmentList = document.getElementById("segments")!;
const statsLine = document.getElementById("stats")!;
const canvasPreview = document.getElementById("canvas-preview") as HTMLImageElement;
const transcriptInput = document.getElementById("transcript") as HTMLInputElement;

const wsUrl = `${location.protocol === "https:" ? "wss" : "ws"}://${location.host}/stream`;

let dirty = true;
const client = new StreamClient({
  url: wsUrl,
  state,
  transportFactory: (url) => new WebSocket(url) as unknown as never,
  onChange: () => {
    dirty = true;
  },
  onStatus: (status) => {
    statusBanner.textContent =
      status === "online"
        ? "connected"
        : status === "connecting"
          ? "connecting…"
          : "offline — retrying";
    statusBanner.className = `banner ${status}`;
  },
});
client.connect();

restartButton.addEventListener("click", async () => {
  restartButton.disabled = true;
  const acknowledged = await client.requestRestart();
  if (!acknowledged) {
    statusBanner.textContent = "restart not acknowledged";
    restartButton.disabled = state.activeAlert === null;
  }
  dirty = true;
});

transcriptInput.addEventListener("change", async () => {
  const file = transcriptInput.files?.[0];
  if (!file) return;
  const text = await file.text();
  for (const line of text.split("\n")) {
    if (!line.trim()) continue;
    try {
      const frame = decodeFrame(line);
      if (frame.kind !== "error") applyMessage(state, frame);
    } catch {
      /* skip malformed lines */
    }
  }
  dirty = true;
});

function refreshPanels(): void {
  if (state.activeAlert) {
    alertBanner.textContent = `ALERT: ${state.activeAlert}`;
    alertBanner.style.display = "block";
    restartButton.disabled = false;
  } else {
    alertBanner.style.display = "none";
    restartButton.disabled = true; // restart only offered while an alert is active
  }
  const rows = [...state.segments.values()]
    .sort((a, b) => a.id - b.id)
    .map(
      (segment) =>
        `<li>segment ${segment.id} — gsd ${(segment.gsd * 1000).toFixed(1)} mm/px, ` +
        `${segment.tiles} tiles</li>`,
    );
  segmentList.innerHTML = rows.join("") || "<li>no segments yet</li>";
  const latest = [...state.segments.values()].sort((a, b) => b.id - a.id)[0];
  if (latest?.canvasUrl) {
    const refresh = `${latest.canvasUrl}?t=${state.seenSequences.size}`;
    if (canvasPreview.dataset.src !== refresh) {
      canvasPreview.src = refresh;
      canvasPreview.dataset.src = refresh;
      canvasPreview.style.display = "block";
    }
  }
  statsLine.textContent =
    `${state.chunks.length} chunks, ${visiblePointCount(state).toLocaleString()} pts drawn` +
    ` (of ${state.totalPoints.toLocaleString()})` +
    (state.epochMarks.length ? `, ${state.epochMarks.length} restart(s)` : "");
}

function frame(): void {
  if (dirty) {
    renderer.sync(state);
    refreshPanels();
    dirty = false;
  }
  const rect = canvas.parentElement!.getBoundingClientRect();
  renderer.resize(rect.width, rect.height);
  renderer.render();
  requestAnimationFrame(frame);
}
requestAnimationFrame(frame);
