"""WebSocket + static HTTP front end for the stream broker.

Implements the minimal subset of RFC 6455 the viewer needs (text frames,
ping/pong, close, client-masked payloads) over asyncio, so the package has
no networking dependencies. The same port also serves the viewer's static
assets and the run directory's mosaic products over plain HTTP GET.
"""

from __future__ import annotations

import asyncio
import base64
import hashlib
import json
import logging
import struct
import threading
from pathlib import Path

from .errors import UnknownCommand
from .stream import StreamBroker, StreamMessage, encode_error, encode_message

logger = logging.getLogger(__name__)

WS_GUID = "258EAFA5-E914-47DA-95CA-C5AB0DC85B11"
OP_TEXT = 0x1
OP_CLOSE = 0x8
OP_PING = 0x9
OP_PONG = 0xA
POLL_INTERVAL = 0.02

CONTENT_TYPES = {
    ".html": "text/html; charset=utf-8",
    ".js": "application/javascript; charset=utf-8",
    ".css": "text/css; charset=utf-8",
    ".json": "application/json",
    ".png": "image/png",
    ".ply": "application/octet-stream",
    ".pgw": "text/plain; charset=utf-8",
    ".txt": "text/plain; charset=utf-8",
}


def websocket_accept_key(client_key: str) -> str:
    digest = hashlib.sha1((client_key + WS_GUID).encode("ascii")).digest()
    return base64.b64encode(digest).decode("ascii")


def encode_frame(opcode: int, payload: bytes, mask: bool = False) -> bytes:
    """Encode one WebSocket frame (FIN always set)."""
    header = bytearray([0x80 | opcode])
    length = len(payload)
    mask_bit = 0x80 if mask else 0x00
    if length < 126:
        header.append(mask_bit | length)
    elif length < 1 << 16:
        header.append(mask_bit | 126)
        header += struct.pack(">H", length)
    else:
        header.append(mask_bit | 127)
        header += struct.pack(">Q", length)
    if mask:
        key = b"\x12\x34\x56\x78"  # clients must mask; the value is irrelevant
        header += key
        payload = bytes(b ^ key[i % 4] for i, b in enumerate(payload))
    return bytes(header) + payload


async def read_frame(reader: asyncio.StreamReader) -> tuple[int, bytes]:
    """Read one complete (possibly fragmented) message; returns (opcode, data)."""
    opcode = None
    buffer = bytearray()
    while True:
        head = await reader.readexactly(2)
        fin = bool(head[0] & 0x80)
        frame_op = head[0] & 0x0F
        masked = bool(head[1] & 0x80)
        length = head[1] & 0x7F
        if length == 126:
            (length,) = struct.unpack(">H", await reader.readexactly(2))
        elif length == 127:
            (length,) = struct.unpack(">Q", await reader.readexactly(8))
        key = await reader.readexactly(4) if masked else None
        payload = await reader.readexactly(length) if length else b""
        if masked and payload:
            payload = bytes(b ^ key[i % 4] for i, b in enumerate(payload))
        if frame_op != 0:
            opcode = frame_op
            buffer = bytearray()
        buffer += payload
        if fin:
            return opcode, bytes(buffer)


class StreamServer:
    """Serves the broker over WebSocket and static files over HTTP."""

    def __init__(
        self,
        broker: StreamBroker,
        host: str = "127.0.0.1",
        port: int = 0,
        asset_dirs: dict[str, Path] | None = None,
    ) -> None:
        self.broker = broker
        self.host = host
        self.port = port
        self.asset_dirs = {
            prefix: Path(path) for prefix, path in (asset_dirs or {}).items()
        }
        self._loop: asyncio.AbstractEventLoop | None = None
        self._thread: threading.Thread | None = None
        self._server: asyncio.base_events.Server | None = None
        self._started = threading.Event()
        self._stop = None

    # ------------------------------------------------------------ lifecycle

    def start(self) -> None:
        """Run the server on a background thread; returns once listening."""
        self._thread = threading.Thread(target=self._run, daemon=True)
        self._thread.start()
        if not self._started.wait(timeout=10.0):
            raise RuntimeError("stream server failed to start")

    def _run(self) -> None:
        asyncio.run(self._main())

    async def _main(self) -> None:
        self._loop = asyncio.get_running_loop()
        self._stop = asyncio.Event()
        self._server = await asyncio.start_server(
            self._handle_connection, self.host, self.port
        )
        self.port = self._server.sockets[0].getsockname()[1]
        ticker = asyncio.create_task(self._ticker())
        self._started.set()
        logger.info("stream server listening on %s:%d", self.host, self.port)
        try:
            await self._stop.wait()
        finally:
            ticker.cancel()
            self._server.close()
            await self._server.wait_closed()

    def stop(self) -> None:
        if self._loop is not None and self._stop is not None:
            self._loop.call_soon_threadsafe(self._stop.set)
        if self._thread is not None:
            self._thread.join(timeout=5.0)

    async def _ticker(self) -> None:
        while True:
            self.broker.tick()
            await asyncio.sleep(POLL_INTERVAL)

    # ----------------------------------------------------------- connection

    async def _handle_connection(
        self, reader: asyncio.StreamReader, writer: asyncio.StreamWriter
    ) -> None:
        try:
            request_line = await reader.readline()
            if not request_line:
                return
            parts = request_line.decode("latin1").split()
            if len(parts) < 2:
                return
            method, target = parts[0], parts[1]
            headers = {}
            while True:
                line = await reader.readline()
                if line in (b"\r\n", b"\n", b""):
                    break
                name, _, value = line.decode("latin1").partition(":")
                headers[name.strip().lower()] = value.strip()

            if headers.get("upgrade", "").lower() == "websocket":
                await self._serve_websocket(reader, writer, headers)
            elif method == "GET":
                await self._serve_static(writer, target)
        except (ConnectionError, asyncio.IncompleteReadError):
            pass
        except Exception:
            logger.exception("connection handler failed")
        finally:
            try:
                writer.close()
                await writer.wait_closed()
            except (ConnectionError, OSError):
                pass

    async def _serve_websocket(self, reader, writer, headers) -> None:
        key = headers.get("sec-websocket-key")
        if not key:
            writer.write(b"HTTP/1.1 400 Bad Request\r\n\r\n")
            await writer.drain()
            return
        accept = websocket_accept_key(key)
        writer.write(
            (
                "HTTP/1.1 101 Switching Protocols\r\n"
                "Upgrade: websocket\r\n"
                "Connection: Upgrade\r\n"
                f"Sec-WebSocket-Accept: {accept}\r\n\r\n"
            ).encode("ascii")
        )
        await writer.drain()

        client_id = self.broker.add_client()
        logger.info("viewer %d connected", client_id)
        receiver = asyncio.create_task(self._receive_commands(reader, client_id))
        try:
            while True:
                frames = self.broker.drain(client_id)
                terminal = False
                for frame in frames:
                    if isinstance(frame, StreamMessage):
                        text = encode_message(frame)
                    else:
                        text = encode_error(frame)
                        terminal = frame.terminal
                    writer.write(encode_frame(OP_TEXT, text.encode("utf-8")))
                if frames:
                    await writer.drain()
                if terminal or receiver.done():
                    break
                await asyncio.sleep(POLL_INTERVAL)
            writer.write(encode_frame(OP_CLOSE, struct.pack(">H", 1000)))
            await writer.drain()
        except (ConnectionError, asyncio.IncompleteReadError):
            pass
        finally:
            receiver.cancel()
            self.broker.remove_client(client_id)
            logger.info("viewer %d disconnected", client_id)

    async def _receive_commands(self, reader, client_id: int) -> None:
        while True:
            try:
                opcode, payload = await read_frame(reader)
            except (asyncio.IncompleteReadError, ConnectionError):
                return
            if opcode == OP_CLOSE:
                return
            if opcode == OP_PING:
                continue  # pong is a nicety; the poll loop keeps the link alive
            if opcode != OP_TEXT:
                continue
            try:
                command = json.loads(payload.decode("utf-8"))
            except (UnicodeDecodeError, json.JSONDecodeError):
                command = {"command": None}
            try:
                self.broker.handle_command(client_id, command)
            except UnknownCommand:
                pass  # the broker already queued the error frame

    # ---------------------------------------------------------------- static

    async def _serve_static(self, writer, target: str) -> None:
        path = target.split("?", 1)[0]
        if path == "/":
            path = "/index.html"
        body = None
        content_type = "application/octet-stream"
        for prefix, root in self.asset_dirs.items():
            if not path.startswith(prefix):
                continue
            relative = path[len(prefix) :].lstrip("/")
            candidate = (root / relative).resolve()
            try:
                candidate.relative_to(root.resolve())
            except ValueError:
                continue  # path escape attempt
            if candidate.is_file():
                body = candidate.read_bytes()
                content_type = CONTENT_TYPES.get(
                    candidate.suffix.lower(), content_type
                )
                break
        if body is None:
            writer.write(
                b"HTTP/1.1 404 Not Found\r\nContent-Length: 9\r\n\r\nnot found"
            )
        else:
            writer.write(
                (
                    "HTTP/1.1 200 OK\r\n"
                    f"Content-Type: {content_type}\r\n"
                    f"Content-Length: {len(body)}\r\n"
                    "Cache-Control: no-cache\r\n\r\n"
                ).encode("ascii")
                + body
            )
        await writer.drain()
