"""Broadcast broker for live pipeline products.

The broker is transport independent: it decides what every connected
client must receive and in what order; a WebSocket server (see
``server.py``) drains per-client queues onto the wire. Delivery classes:

* ``pose`` and ``sparse_points`` are decimated to the pose rate budget,
  latest-wins: a newer update replaces an undelivered older one.
* ``cloud_chunk`` and ``mosaic_event`` are cumulative and NEVER dropped:
  they queue globally, are released at the cloud rate budget, and each
  client receives them exactly once in publication order.
* ``alert`` and ``restart_ack`` deliver immediately, alerts ahead of any
  queued non-alert traffic.

A client whose queue exceeds its bound is marked overflowed and receives a
terminal error frame: silently dropping cumulative chunks would corrupt
the viewer's world, so disconnection is the only safe option.
"""

from __future__ import annotations

import base64
import json
import threading
import time
from collections import deque
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import UnknownCommand

SCHEMA_VERSION = 1
MESSAGE_KINDS = (
    "pose",
    "sparse_points",
    "cloud_chunk",
    "mosaic_event",
    "alert",
    "restart_ack",
)
LOSSLESS_KINDS = frozenset({"cloud_chunk", "mosaic_event", "alert", "restart_ack"})
DECIMATED_KINDS = frozenset({"pose", "sparse_points"})
DEFAULT_CLIENT_QUEUE = 4096
DEFAULT_POINT_RETENTION = 5_000_000
ARCHIVE_DECIMATION = 4


@dataclass(frozen=True)
class RateBudget:
    """Delivery frequencies; video relay is reserved and not implemented."""

    pose_hz: float = 5.0
    cloud_hz: float = 0.5
    video_hz: float = 10.0

    def __post_init__(self) -> None:
        if self.pose_hz <= 0 or self.cloud_hz <= 0 or self.video_hz <= 0:
            raise ValueError("rate budgets must be positive")


@dataclass(frozen=True)
class StreamMessage:
    kind: str
    sequence: int
    timestamp: float
    payload: dict


@dataclass(frozen=True)
class ErrorFrame:
    """Channel control frame; terminal frames precede disconnection."""

    message: str
    terminal: bool


def encode_message(message: StreamMessage) -> str:
    return json.dumps(
        {
            "v": SCHEMA_VERSION,
            "kind": message.kind,
            "sequence": message.sequence,
            "timestamp": message.timestamp,
            "payload": message.payload,
        },
        sort_keys=True,
        separators=(",", ":"),
    )


def encode_error(frame: ErrorFrame) -> str:
    return json.dumps(
        {
            "v": SCHEMA_VERSION,
            "kind": "error",
            "error": frame.message,
            "terminal": frame.terminal,
        },
        sort_keys=True,
        separators=(",", ":"),
    )


def decode_message(text: str) -> StreamMessage:
    data = json.loads(text)
    if data.get("v") != SCHEMA_VERSION:
        raise ValueError(f"unsupported schema version {data.get('v')}")
    kind = data["kind"]
    if kind not in MESSAGE_KINDS:
        raise ValueError(f"unknown message kind {kind!r}")
    return StreamMessage(
        kind=kind,
        sequence=int(data["sequence"]),
        timestamp=float(data["timestamp"]),
        payload=data["payload"],
    )


def pack_points(points: np.ndarray, colors: np.ndarray) -> str:
    """Base64 records of 24 position bytes + 3 color bytes per point."""
    points = np.asarray(points, dtype="<f8").reshape(-1, 3)
    colors = np.asarray(colors, dtype=np.uint8).reshape(-1, 3)
    record = np.zeros(
        len(points),
        dtype=np.dtype(
            [("x", "<f8"), ("y", "<f8"), ("z", "<f8"),
             ("r", "u1"), ("g", "u1"), ("b", "u1")]
        ),
    )
    record["x"], record["y"], record["z"] = points.T
    record["r"], record["g"], record["b"] = colors.T
    return base64.b64encode(record.tobytes()).decode("ascii")


def unpack_points(data: str) -> tuple[np.ndarray, np.ndarray]:
    raw = base64.b64decode(data)
    record = np.frombuffer(
        raw,
        dtype=np.dtype(
            [("x", "<f8"), ("y", "<f8"), ("z", "<f8"),
             ("r", "u1"), ("g", "u1"), ("b", "u1")]
        ),
    )
    points = np.column_stack([record["x"], record["y"], record["z"]])
    colors = np.column_stack([record["r"], record["g"], record["b"]]).astype(np.uint8)
    return points, colors


@dataclass
class _Client:
    id: int
    queue: deque = field(default_factory=deque)
    max_queue: int = DEFAULT_CLIENT_QUEUE
    overflowed: bool = False
    pending_error: ErrorFrame | None = None


class StreamBroker:
    """Single-producer, many-consumer message hub with rate budgets."""

    def __init__(
        self,
        budget: RateBudget = RateBudget(),
        clock: Callable[[], float] = time.monotonic,
        max_client_queue: int = DEFAULT_CLIENT_QUEUE,
        point_retention_budget: int = DEFAULT_POINT_RETENTION,
    ) -> None:
        self.budget = budget
        self.clock = clock
        self.max_client_queue = max_client_queue
        self.point_retention_budget = point_retention_budget
        self._lock = threading.Lock()
        self._clients: dict[int, _Client] = {}
        self._next_client_id = 0
        self._sequence = 0
        self.restart_callback: Callable[[], None] | None = None

        # Retained cumulative state for late joiners.
        self._retained_chunks: deque[StreamMessage] = deque()
        self._retained_points = 0
        self._retained_mosaic_events: list[StreamMessage] = []
        self._latest_pose: StreamMessage | None = None
        self._latest_sparse: StreamMessage | None = None

        # Pacing state.
        self._pending_decimated: dict[str, StreamMessage] = {}
        self._last_decimated_release: float | None = None
        self._paced_queue: deque[StreamMessage] = deque()
        self._last_paced_release: float | None = None

    # ------------------------------------------------------------- clients

    def add_client(self) -> int:
        with self._lock:
            client_id = self._next_client_id
            self._next_client_id += 1
            self._clients[client_id] = _Client(
                id=client_id, max_queue=self.max_client_queue
            )
            return client_id

    def remove_client(self, client_id: int) -> None:
        with self._lock:
            self._clients.pop(client_id, None)

    def drain(self, client_id: int, limit: int = 64) -> list[StreamMessage | ErrorFrame]:
        """Take up to ``limit`` outbound frames for one client.

        A terminal :class:`ErrorFrame` is always the last frame a client
        receives; the transport must close afterwards.
        """
        with self._lock:
            client = self._clients.get(client_id)
            if client is None:
                return []
            out: list[StreamMessage | ErrorFrame] = []
            while client.queue and len(out) < limit:
                out.append(client.queue.popleft())
            if not client.queue and client.pending_error is not None:
                out.append(client.pending_error)
                client.pending_error = None
                self._clients.pop(client_id, None)
            return out

    def client_alive(self, client_id: int) -> bool:
        with self._lock:
            client = self._clients.get(client_id)
            return client is not None and not client.overflowed

    # ------------------------------------------------------------ publishing

    def publish(
        self, kind: str, payload: dict, timestamp: float | None = None
    ) -> StreamMessage:
        """Publish one message; returns it with its assigned sequence."""
        if kind not in MESSAGE_KINDS:
            raise ValueError(f"unknown message kind {kind!r}")
        with self._lock:
            message = StreamMessage(
                kind=kind,
                sequence=self._next_sequence(),
                timestamp=self.clock() if timestamp is None else timestamp,
                payload=payload,
            )
            if kind in ("alert", "restart_ack"):
                for client in self._clients.values():
                    self._enqueue_priority(client, message)
            elif kind in DECIMATED_KINDS:
                self._pending_decimated[kind] = message
                self._release_due(self.clock())
            else:  # cloud_chunk, mosaic_event
                self._paced_queue.append(message)
                self._release_due(self.clock())
            return message

    def publish_chunk(
        self,
        frame_id: int,
        segment_id: int,
        points: np.ndarray,
        colors: np.ndarray,
        timestamp: float | None = None,
    ) -> StreamMessage:
        payload = {
            "frame_id": frame_id,
            "segment_id": segment_id,
            "count": int(len(points)),
            "points": pack_points(points, colors),
        }
        return self.publish("cloud_chunk", payload, timestamp)

    def tick(self, now: float | None = None) -> None:
        """Release any paced traffic that has come due."""
        with self._lock:
            self._release_due(self.clock() if now is None else now)

    def flush_all(self) -> None:
        """Release everything still pending, ignoring the rate budgets.

        For end-of-run shutdown: pacing protects a live link, but withheld
        cumulative messages would otherwise never reach retention or
        clients.
        """
        with self._lock:
            for kind in ("pose", "sparse_points"):
                message = self._pending_decimated.pop(kind, None)
                if message is not None:
                    self._retain(message)
                    for client in self._clients.values():
                        self._enqueue_decimated(client, message)
            while self._paced_queue:
                message = self._paced_queue.popleft()
                self._retain(message)
                for client in self._clients.values():
                    self._enqueue(client, message)

    # ------------------------------------------------------------- commands

    def handle_command(self, client_id: int, command: dict) -> None:
        """Execute a client command.

        ``restart_acquisition`` triggers the restart callback and broadcasts
        a ``restart_ack``; ``snapshot_request`` replays retained state to the
        requesting client; ``set_rate`` updates the budget. An unknown
        command earns the client a non-terminal error frame.
        """
        name = command.get("command")
        if name == "restart_acquisition":
            callback = self.restart_callback
            if callback is not None:
                callback()
            self.publish("restart_ack", {"status": "restarting"})
            return
        if name == "snapshot_request":
            with self._lock:
                client = self._clients.get(client_id)
                if client is None:
                    return
                cumulative = sorted(
                    [*self._retained_chunks, *self._retained_mosaic_events],
                    key=lambda m: m.sequence,
                )
                for message in cumulative:
                    self._enqueue(client, message)
                if self._latest_sparse is not None:
                    self._enqueue_decimated(client, self._latest_sparse)
                if self._latest_pose is not None:
                    self._enqueue_decimated(client, self._latest_pose)
            return
        if name == "set_rate":
            budget = command.get("budget", {})
            try:
                self.budget = RateBudget(
                    pose_hz=float(budget.get("pose_hz", self.budget.pose_hz)),
                    cloud_hz=float(budget.get("cloud_hz", self.budget.cloud_hz)),
                    video_hz=float(budget.get("video_hz", self.budget.video_hz)),
                )
            except (TypeError, ValueError) as exc:
                self._send_error(client_id, f"bad rate budget: {exc}", terminal=False)
            return
        self._send_error(client_id, f"unknown command {name!r}", terminal=False)
        raise UnknownCommand(str(name))

    # ------------------------------------------------------------- internals

    def _next_sequence(self) -> int:
        self._sequence += 1
        return self._sequence

    def _send_error(self, client_id: int, message: str, terminal: bool) -> None:
        with self._lock:
            client = self._clients.get(client_id)
            if client is None:
                return
            if terminal:
                client.pending_error = ErrorFrame(message, True)
                client.overflowed = True
            else:
                client.queue.append(ErrorFrame(message, False))

    def _retain(self, message: StreamMessage) -> None:
        if message.kind == "pose":
            self._latest_pose = message
        elif message.kind == "sparse_points":
            self._latest_sparse = message
        elif message.kind == "mosaic_event":
            self._retained_mosaic_events.append(message)
        elif message.kind == "cloud_chunk":
            self._retained_chunks.append(message)
            self._retained_points += int(message.payload.get("count", 0))
            self._enforce_retention()

    def _enforce_retention(self) -> None:
        # Past the point budget, squash the oldest half into one decimated
        # archive chunk (low-bandwidth links prefer coarser history over
        # refusal).
        if self._retained_points <= self.point_retention_budget:
            return
        half = max(len(self._retained_chunks) // 2, 1)
        old_points = []
        old_colors = []
        for _ in range(half):
            message = self._retained_chunks.popleft()
            self._retained_points -= int(message.payload.get("count", 0))
            points, colors = unpack_points(message.payload["points"])
            old_points.append(points[::ARCHIVE_DECIMATION])
            old_colors.append(colors[::ARCHIVE_DECIMATION])
        points = np.vstack(old_points)
        colors = np.vstack(old_colors)
        archive = StreamMessage(
            kind="cloud_chunk",
            sequence=self._next_sequence(),
            timestamp=self.clock(),
            payload={
                "frame_id": -1,
                "segment_id": -1,
                "count": int(len(points)),
                "points": pack_points(points, colors),
                "archive": True,
            },
        )
        self._retained_chunks.appendleft(archive)
        self._retained_points += len(points)

    def _release_due(self, now: float) -> None:
        # Retention happens at release time: the snapshot state must equal
        # exactly what from-start clients have received, or late joiners
        # would see paced messages twice.
        # Decimated classes: at most one release per 1/pose_hz interval,
        # shared across pose and sparse_points so the budget holds.
        interval = 1.0 / self.budget.pose_hz
        if self._pending_decimated:
            last = self._last_decimated_release
            if last is None or now - last >= interval:
                for kind in ("pose", "sparse_points"):
                    message = self._pending_decimated.pop(kind, None)
                    if message is not None:
                        self._retain(message)
                        for client in self._clients.values():
                            self._enqueue_decimated(client, message)
                self._last_decimated_release = now

        cloud_interval = 1.0 / self.budget.cloud_hz
        while self._paced_queue:
            last = self._last_paced_release
            if last is not None and now - last < cloud_interval:
                break
            message = self._paced_queue.popleft()
            self._retain(message)
            for client in self._clients.values():
                self._enqueue(client, message)
            self._last_paced_release = now

    def _enqueue(self, client: _Client, message: StreamMessage) -> None:
        if client.overflowed:
            return
        if len(client.queue) >= client.max_queue:
            client.overflowed = True
            client.queue.clear()
            client.pending_error = ErrorFrame(
                "client_overflow: queue bound exceeded, cumulative stream broken",
                True,
            )
            return
        client.queue.append(message)

    def _enqueue_decimated(self, client: _Client, message: StreamMessage) -> None:
        # Latest-wins inside the queue as well: replace an undelivered
        # older message of the same kind instead of appending.
        if client.overflowed:
            return
        for index, queued in enumerate(client.queue):
            if isinstance(queued, StreamMessage) and queued.kind == message.kind:
                client.queue[index] = message
                return
        self._enqueue(client, message)

    def _enqueue_priority(self, client: _Client, message: StreamMessage) -> None:
        """Alerts and acks go ahead of queued non-priority traffic."""
        if client.overflowed:
            return
        if len(client.queue) >= client.max_queue:
            self._enqueue(client, message)  # trip the overflow path
            return
        insert_at = 0
        for index, queued in enumerate(client.queue):
            if isinstance(queued, StreamMessage) and queued.kind in (
                "alert",
                "restart_ack",
            ):
                insert_at = index + 1
            else:
                break
        client.queue.insert(insert_at, message)

    # ------------------------------------------------------------ inspection

    def retained_state(self) -> dict:
        with self._lock:
            return {
                "chunks": len(self._retained_chunks),
                "points": self._retained_points,
                "mosaic_events": len(self._retained_mosaic_events),
                "has_pose": self._latest_pose is not None,
            }
