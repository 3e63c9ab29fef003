/** Perf harness: synthesizes 100 chunks x 15000 points (1.5 M) and reports
 * the sustained interactive frame rate against the 30 fps bar. */

import { SceneRenderer } from "./render";
import { ChunkBuffer, createState } from "./state";

const state = createState();
const canvas = document.getElementById("view") as HTMLCanvasElement;
const renderer = new SceneRenderer(canvas);
const readout = document.getElementById("readout")!;

function syntheticChunk(index: number): ChunkBuffer {
  const count = 15_000;
  const positions = new Float32Array(count * 3);
  const colors = new Uint8Array(count * 3);
  let seed = index * 2654435761 + 1;
  const rand = () => {
    seed = (seed * 1664525 + 1013904223) >>> 0;
    return seed / 2 ** 32;
  };
  for (let i = 0; i < count; i++) {
    positions[i * 3] = index * 0.2 + rand() * 2.0;
    positions[i * 3 + 1] = (rand() - 0.5) * 1.5;
    positions[i * 3 + 2] = (rand() - 0.5) * 0.01;
    colors[i * 3] = 90 + rand() * 130;
    colors[i * 3 + 1] = 90 + rand() * 120;
    colors[i * 3 + 2] = 80 + rand() * 110;
  }
  return {
    frameId: index,
    segmentId: 0,
    sequence: index + 1,
    archive: false,
    count,
    positions,
    colors,
  };
}

for (let i = 0; i < 100; i++) {
  state.chunks.push(syntheticChunk(i));
  state.totalPoints += 15_000;
}
renderer.sync(state);

let frames = 0;
let windowStart = performance.now();
const rates: number[] = [];

function loop(): void {
  const rect = canvas.parentElement!.getBoundingClientRect();
  renderer.resize(rect.width, rect.height);
  renderer.render();
  frames += 1;
  const now = performance.now();
  if (now - windowStart >= 1000) {
    const fps = (frames * 1000) / (now - windowStart);
    rates.push(fps);
    frames = 0;
    windowStart = now;
    const recent = rates.slice(-10);
    const median = [...recent].sort((a, b) => a - b)[Math.floor(recent.length / 2)];
    const verdict = median >= 30 ? "PASS (>= 30 fps)" : "FAIL (< 30 fps)";
    readout.textContent =
      `1,500,000 points in 100 chunks — ${fps.toFixed(1)} fps now, ` +
      `median ${median.toFixed(1)} fps — ${verdict}`;
  }
  requestAnimationFrame(loop);
}
requestAnimationFrame(loop);
