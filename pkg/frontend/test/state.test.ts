import { readdirSync, readFileSync } from "node:fs";
import { join } from "node:path";
import { describe, expect, it } from "vitest";

import { decodeFrame, decodePoints, StreamMessage } from "../src/messages";
import {
  applyMessage,
  createState,
  stateDigest,
  visibleChunks,
  visiblePointCount,
} from "../src/state";

const GOLDEN_DIR = join(__dirname, "..", "..", "tests", "golden", "protocol");

function packPoints(points: number[][], colors: number[][]): string {
  const bytes = Buffer.alloc(points.length * 27);
  points.forEach((p, i) => {
    bytes.writeDoubleLE(p[0], i * 27);
    bytes.writeDoubleLE(p[1], i * 27 + 8);
    bytes.writeDoubleLE(p[2], i * 27 + 16);
    bytes[i * 27 + 24] = colors[i][0];
    bytes[i * 27 + 25] = colors[i][1];
    bytes[i * 27 + 26] = colors[i][2];
  });
  return bytes.toString("base64");
}

function message(
  kind: StreamMessage["kind"],
  sequence: number,
  payload: Record<string, unknown>,
): StreamMessage {
  return { kind, sequence, timestamp: sequence * 0.5, payload };
}

function chunkMessage(sequence: number, frameId: number, n = 4): StreamMessage {
  const points = Array.from({ length: n }, (_, i) => [frameId + i * 0.01, 0.1, 0.0]);
  const colors = Array.from({ length: n }, () => [120, 110, 100]);
  return message("cloud_chunk", sequence, {
    frame_id: frameId,
    segment_id: 0,
    count: n,
    points: packPoints(points, colors),
  });
}

function sampleTranscript(): StreamMessage[] {
  const out: StreamMessage[] = [];
  let seq = 1;
  for (let k = 0; k < 6; k++) {
    out.push(
      message("pose", seq++, {
        frame_id: k,
        rotation: [
          [1, 0, 0],
          [0, -1, 0],
          [0, 0, -1],
        ],
        center: [k * 0.2, 0, 2],
      }),
    );
    out.push(chunkMessage(seq++, k));
    if (k === 2) {
      out.push(
        message("mosaic_event", seq++, {
          event: "segment_started",
          segment_id: 0,
          gsd: 0.0024,
        }),
      );
    }
  }
  out.push(message("alert", seq++, { reason: "tracking_lost: test" }));
  out.push(message("restart_ack", seq++, { status: "restarting" }));
  return out;
}

describe("viewer state fold", () => {
  it("transcript replay is deterministic", () => {
    const transcript = sampleTranscript();
    const a = createState();
    const b = createState();
    transcript.forEach((m) => applyMessage(a, m));
    transcript.forEach((m) => applyMessage(b, m));
    expect(stateDigest(a)).toEqual(stateDigest(b));
  });

  it("late join via snapshot equals from-start attendance for chunks", () => {
    const transcript = sampleTranscript();
    const fromStart = createState();
    transcript.forEach((m) => applyMessage(fromStart, m));

    // Late joiner: snapshot replays retained cumulative state (chunks and
    // mosaic events in sequence order, latest pose), then live traffic.
    const cutoff = 7;
    const retained = transcript
      .slice(0, cutoff)
      .filter((m) => m.kind === "cloud_chunk" || m.kind === "mosaic_event");
    const poses = transcript.slice(0, cutoff).filter((m) => m.kind === "pose");
    const snapshot = [...retained, poses[poses.length - 1]];
    const live = transcript.slice(cutoff);
    const lateJoin = createState();
    [...snapshot, ...live].forEach((m) => applyMessage(lateJoin, m));

    const chunkIds = (s: typeof fromStart) =>
      s.chunks.map((c) => c.frameId).sort((x, y) => x - y);
    expect(chunkIds(lateJoin)).toEqual(chunkIds(fromStart));
    expect(lateJoin.segments.size).toBe(fromStart.segments.size);
  });

  it("duplicate sequences are ignored (idempotent ingest)", () => {
    const state = createState();
    const chunk = chunkMessage(5, 0);
    expect(applyMessage(state, chunk)).toBe(true);
    expect(applyMessage(state, chunk)).toBe(false);
    expect(state.chunks.length).toBe(1);
    expect(state.totalPoints).toBe(4);
  });

  it("point budget decimates visually without mutating the transcript", () => {
    const state = createState(10); // tiny budget: ~2 chunks of 4 points
    for (let k = 0; k < 6; k++) applyMessage(state, chunkMessage(k + 1, k));
    expect(state.chunks.length).toBe(6); // stored transcript intact
    expect(visiblePointCount(state)).toBeLessThanOrEqual(10);
    expect(state.drawFromChunk).toBeGreaterThan(0);
    const drawn = visibleChunks(state).map((c) => c.frameId);
    expect(drawn[drawn.length - 1]).toBe(5); // newest stays visible
  });

  it("alert then restart_ack clears the alert and marks an epoch", () => {
    const state = createState();
    applyMessage(
      state,
      message("pose", 1, {
        frame_id: 9,
        rotation: [
          [1, 0, 0],
          [0, 1, 0],
          [0, 0, 1],
        ],
        center: [0, 0, 2],
      }),
    );
    applyMessage(state, message("alert", 2, { reason: "tracking_lost: x" }));
    expect(state.activeAlert).toContain("tracking_lost");
    applyMessage(state, message("restart_ack", 3, { status: "restarting" }));
    expect(state.activeAlert).toBeNull();
    expect(state.epochMarks).toEqual([9]);
  });
});

describe("wire format", () => {
  it("decodes every golden transcript produced by the service", () => {
    const files = readdirSync(GOLDEN_DIR).filter((f) => f.endsWith(".json"));
    expect(files.length).toBe(6);
    const kinds = new Set<string>();
    for (const file of files) {
      const text = readFileSync(join(GOLDEN_DIR, file), "utf-8").trim();
      const frame = decodeFrame(text);
      expect(frame.kind).not.toBe("error");
      kinds.add(frame.kind);
      if (frame.kind === "cloud_chunk" || frame.kind === "sparse_points") {
        const msg = frame as StreamMessage;
        const batch = decodePoints(String(msg.payload.points));
        expect(batch.count).toBe(Number(msg.payload.count));
      }
    }
    expect(kinds.size).toBe(6);
  });

  it("unpacks point records exactly", () => {
    const data = packPoints(
      [
        [1.5, -2.25, 0.125],
        [3.0, 4.5, -6.75],
      ],
      [
        [10, 20, 30],
        [200, 150, 100],
      ],
    );
    const batch = decodePoints(data);
    expect(batch.count).toBe(2);
    expect(Array.from(batch.positions)).toEqual([1.5, -2.25, 0.125, 3.0, 4.5, -6.75]);
    expect(Array.from(batch.colors)).toEqual([10, 20, 30, 200, 150, 100]);
  });

  it("rejects unknown schema versions", () => {
    expect(() =>
      decodeFrame(
        JSON.stringify({ v: 9, kind: "pose", sequence: 1, timestamp: 0, payload: {} }),
      ),
    ).toThrow();
  });
});
