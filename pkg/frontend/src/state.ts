/** Viewer state as a pure fold over the message sequence.
 *
 * applyMessage is deterministic and idempotent per sequence number, so
 * replaying a recorded transcript reproduces the state exactly and a
 * reconnection snapshot cannot double-ingest chunks.
 */

import { decodePoints, PointBatch, StreamMessage } from "./messages";

export interface PoseInfo {
  frameId: number;
  rotation: number[][];
  center: [number, number, number];
}

export interface ChunkBuffer extends PointBatch {
  frameId: number;
  segmentId: number;
  sequence: number;
  archive: boolean;
}

export interface SegmentInfo {
  id: number;
  gsd: number;
  tiles: number;
  canvasUrl?: string;
  planeNormal?: number[];
  planeOffset?: number;
}

export interface ViewerState {
  latestPose: PoseInfo | null;
  trajectory: Map<number, [number, number, number]>;
  chunks: ChunkBuffer[];
  seenSequences: Set<number>;
  segments: Map<number, SegmentInfo>;
  sparse: PointBatch | null;
  activeAlert: string | null;
  epochMarks: number[]; // frame ids where a restart was acknowledged
  totalPoints: number;
  pointBudget: number;
  drawFromChunk: number; // first chunk index rendered under the budget
}

export function createState(pointBudget = 5_000_000): ViewerState {
  return {
    latestPose: null,
    trajectory: new Map(),
    chunks: [],
    seenSequences: new Set(),
    segments: new Map(),
    sparse: null,
    activeAlert: null,
    epochMarks: [],
    totalPoints: 0,
    pointBudget,
    drawFromChunk: 0,
  };
}

function asPose(payload: Record<string, unknown>): PoseInfo {
  return {
    frameId: Number(payload.frame_id),
    rotation: payload.rotation as number[][],
    center: payload.center as [number, number, number],
  };
}

/** Fold one message into the state; returns true when anything changed. */
export function applyMessage(state: ViewerState, message: StreamMessage): boolean {
  if (state.seenSequences.has(message.sequence)) {
    return false; // duplicate (reconnection snapshot overlap)
  }
  state.seenSequences.add(message.sequence);
  const payload = message.payload;
  switch (message.kind) {
    case "pose": {
      const pose = asPose(payload);
      state.latestPose = pose;
      state.trajectory.set(pose.frameId, pose.center);
      return true;
    }
    case "sparse_points": {
      state.sparse = decodePoints(String(payload.points ?? ""));
      return true;
    }
    case "cloud_chunk": {
      const batch = decodePoints(String(payload.points ?? ""));
      state.chunks.push({
        ...batch,
        frameId: Number(payload.frame_id),
        segmentId: Number(payload.segment_id),
        sequence: message.sequence,
        archive: !!payload.archive,
      });
      state.totalPoints += batch.count;
      enforceBudget(state);
      return true;
    }
    case "mosaic_event": {
      const id = Number(payload.segment_id);
      const existing = state.segments.get(id) ?? { id, gsd: 0, tiles: 0 };
      state.segments.set(id, {
        ...existing,
        gsd: Number(payload.gsd ?? existing.gsd),
        tiles: Number(payload.tiles ?? existing.tiles),
        canvasUrl: (payload.canvas_url as string) ?? existing.canvasUrl,
        planeNormal: (payload.plane_normal as number[]) ?? existing.planeNormal,
        planeOffset:
          payload.plane_offset !== undefined
            ? Number(payload.plane_offset)
            : existing.planeOffset,
      });
      return true;
    }
    case "alert": {
      state.activeAlert = String(payload.reason ?? "alert");
      return true;
    }
    case "restart_ack": {
      state.activeAlert = null;
      state.epochMarks.push(state.latestPose ? state.latestPose.frameId : -1);
      return true;
    }
  }
  return false;
}

/** Visual decimation only: older chunks stop being drawn past the budget,
 * but the stored transcript is never mutated. */
function enforceBudget(state: ViewerState): void {
  let visible = 0;
  for (let i = state.drawFromChunk; i < state.chunks.length; i++) {
    visible += state.chunks[i].count;
  }
  while (visible > state.pointBudget && state.drawFromChunk < state.chunks.length - 1) {
    visible -= state.chunks[state.drawFromChunk].count;
    state.drawFromChunk += 1;
  }
}

export function visibleChunks(state: ViewerState): ChunkBuffer[] {
  return state.chunks.slice(state.drawFromChunk);
}

export function visiblePointCount(state: ViewerState): number {
  return visibleChunks(state).reduce((sum, chunk) => sum + chunk.count, 0);
}

/** Canonical digest of the state for determinism tests and debugging. */
export function stateDigest(state: ViewerState): Record<string, unknown> {
  let checksum = 0;
  for (const chunk of state.chunks) {
    for (let i = 0; i < chunk.positions.length; i += 97) {
      checksum = (checksum + chunk.positions[i] * (i + 1)) % 1e9;
    }
  }
  return {
    chunkSequences: state.chunks.map((c) => c.sequence),
    chunkFrames: state.chunks.map((c) => c.frameId),
    totalPoints: state.totalPoints,
    positionChecksum: Math.round(checksum * 1e6) / 1e6,
    segments: [...state.segments.keys()].sort((a, b) => a - b),
    latestPoseFrame: state.latestPose?.frameId ?? null,
    activeAlert: state.activeAlert,
    epochMarks: [...state.epochMarks],
    drawFromChunk: state.drawFromChunk,
  };
}
