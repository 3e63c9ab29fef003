/** Wire schema of the stream service (versioned JSON envelope). */

export const SCHEMA_VERSION = 1;

export type MessageKind =
  | "pose"
  | "sparse_points"
  | "cloud_chunk"
  | "mosaic_event"
  | "alert"
  | "restart_ack";

export interface StreamMessage {
  kind: MessageKind;
  sequence: number;
  timestamp: number;
  payload: Record<string, unknown>;
}

export interface ErrorFrame {
  kind: "error";
  error: string;
  terminal: boolean;
}

export type Frame = StreamMessage | ErrorFrame;

const KINDS: ReadonlySet<string> = new Set([
  "pose",
  "sparse_points",
  "cloud_chunk",
  "mosaic_event",
  "alert",
  "restart_ack",
]);

export function decodeFrame(text: string): Frame {
  const data = JSON.parse(text);
  if (data.kind === "error") {
    return { kind: "error", error: String(data.error), terminal: !!data.terminal };
  }
  if (data.v !== SCHEMA_VERSION) {
    throw new Error(`unsupported schema version ${data.v}`);
  }
  if (!KINDS.has(data.kind)) {
    throw new Error(`unknown message kind ${data.kind}`);
  }
  return {
    kind: data.kind as MessageKind,
    sequence: Number(data.sequence),
    timestamp: Number(data.timestamp),
    payload: data.payload ?? {},
  };
}

export interface PointBatch {
  count: number;
  positions: Float32Array; // xyz interleaved
  colors: Uint8Array; // rgb interleaved
}

const RECORD_BYTES = 27; // 3 float64 + 3 uint8 per point

/** Decode the base64 packed point records (24 B position + 3 B color). */
export function decodePoints(b64: string): PointBatch {
  const binary = typeof atob === "function"
    ? atob(b64)
    : Buffer.from(b64, "base64").toString("binary");
  const bytes = new Uint8Array(binary.length);
  for (let i = 0; i < binary.length; i++) bytes[i] = binary.charCodeAt(i);
  const count = Math.floor(bytes.length / RECORD_BYTES);
  const view = new DataView(bytes.buffer);
  const positions = new Float32Array(count * 3);
  const colors = new Uint8Array(count * 3);
  for (let i = 0; i < count; i++) {
    const base = i * RECORD_BYTES;
    positions[i * 3] = view.getFloat64(base, true);
    positions[i * 3 + 1] = view.getFloat64(base + 8, true);
    positions[i * 3 + 2] = view.getFloat64(base + 16, true);
    colors[i * 3] = bytes[base + 24];
    colors[i * 3 + 1] = bytes[base + 25];
    colors[i * 3 + 2] = bytes[base + 26];
  }
  return { count, positions, colors };
}

export function encodeCommand(command: string, extra?: Record<string, unknown>): string {
  return JSON.stringify({ command, ...extra });
}
