import json
import socket
import struct
import time

import numpy as np
import pytest

from seamosaic.server import (
    OP_CLOSE,
    OP_TEXT,
    StreamServer,
    encode_frame,
    websocket_accept_key,
)
from seamosaic.stream import StreamBroker, decode_message


class WsTestClient:
    """Blocking WebSocket client, just enough for protocol tests."""

    def __init__(self, host, port, path="/stream"):
        self.sock = socket.create_connection((host, port), timeout=5.0)
        key = "dGhlIHNhbXBsZSBub25jZQ=="
        request = (
            f"GET {path} HTTP/1.1\r\nHost: {host}:{port}\r\n"
            "Upgrade: websocket\r\nConnection: Upgrade\r\n"
            f"Sec-WebSocket-Key: {key}\r\nSec-WebSocket-Version: 13\r\n\r\n"
        )
        self.sock.sendall(request.encode("ascii"))
        response = self._read_until(b"\r\n\r\n").decode("latin1")
        assert "101" in response.splitlines()[0]
        assert websocket_accept_key(key) in response
        self.buffer = b""

    def _read_until(self, marker):
        data = b""
        while marker not in data:
            chunk = self.sock.recv(4096)
            if not chunk:
                break
            data += chunk
        return data

    def _read_exact(self, n):
        while len(self.buffer) < n:
            chunk = self.sock.recv(4096)
            if not chunk:
                raise ConnectionError("closed")
            self.buffer += chunk
        out, self.buffer = self.buffer[:n], self.buffer[n:]
        return out

    def send_json(self, obj):
        payload = json.dumps(obj).encode("utf-8")
        self.sock.sendall(encode_frame(OP_TEXT, payload, mask=True))

    def recv_frame(self):
        head = self._read_exact(2)
        opcode = head[0] & 0x0F
        length = head[1] & 0x7F
        if length == 126:
            (length,) = struct.unpack(">H", self._read_exact(2))
        elif length == 127:
            (length,) = struct.unpack(">Q", self._read_exact(8))
        payload = self._read_exact(length) if length else b""
        return opcode, payload

    def recv_messages(self, count, timeout=5.0):
        messages = []
        deadline = time.monotonic() + timeout
        while len(messages) < count and time.monotonic() < deadline:
            opcode, payload = self.recv_frame()
            if opcode == OP_TEXT:
                messages.append(payload.decode("utf-8"))
            elif opcode == OP_CLOSE:
                break
        return messages

    def close(self):
        self.sock.close()


@pytest.fixture
def server(tmp_path):
    broker = StreamBroker()
    (tmp_path / "index.html").write_text("<html>viewer</html>")
    srv = StreamServer(broker, asset_dirs={"/": tmp_path})
    srv.start()
    yield srv, broker
    srv.stop()


class TestWebSocket:
    def test_snapshot_and_live_traffic(self, server):
        srv, broker = server
        broker.publish_chunk(0, 0, np.zeros((3, 3)), np.zeros((3, 3), np.uint8))
        time.sleep(0.1)  # let the ticker release it into retention
        client = WsTestClient(srv.host, srv.port)
        client.send_json({"command": "snapshot_request"})
        texts = client.recv_messages(1)
        message = decode_message(texts[0])
        assert message.kind == "cloud_chunk"
        assert message.payload["frame_id"] == 0
        client.close()

    def test_restart_command_round_trip(self, server):
        srv, broker = server
        hits = []
        broker.restart_callback = lambda: hits.append(1)
        client = WsTestClient(srv.host, srv.port)
        client.send_json({"command": "restart_acquisition"})
        texts = client.recv_messages(1)
        assert decode_message(texts[0]).kind == "restart_ack"
        assert hits == [1]
        client.close()

    def test_unknown_command_keeps_connection(self, server):
        srv, broker = server
        client = WsTestClient(srv.host, srv.port)
        client.send_json({"command": "bogus"})
        texts = client.recv_messages(1)
        frame = json.loads(texts[0])
        assert frame["kind"] == "error"
        assert frame["terminal"] is False
        # Connection still usable.
        client.send_json({"command": "snapshot_request"})
        broker.publish("alert", {"reason": "ping"})
        texts = client.recv_messages(1)
        assert decode_message(texts[0]).kind == "alert"
        client.close()


class TestStaticServing:
    def test_index_served(self, server):
        srv, _ = server
        sock = socket.create_connection((srv.host, srv.port), timeout=5.0)
        sock.sendall(b"GET / HTTP/1.1\r\nHost: x\r\n\r\n")
        data = b""
        while b"</html>" not in data:
            chunk = sock.recv(4096)
            if not chunk:
                break
            data += chunk
        assert b"200 OK" in data
        assert b"<html>viewer</html>" in data
        sock.close()

    def test_missing_file_404(self, server):
        srv, _ = server
        sock = socket.create_connection((srv.host, srv.port), timeout=5.0)
        sock.sendall(b"GET /nope.js HTTP/1.1\r\nHost: x\r\n\r\n")
        data = sock.recv(4096)
        assert b"404" in data
        sock.close()

    def test_path_escape_rejected(self, server):
        srv, _ = server
        sock = socket.create_connection((srv.host, srv.port), timeout=5.0)
        sock.sendall(b"GET /../etc/passwd HTTP/1.1\r\nHost: x\r\n\r\n")
        data = sock.recv(4096)
        assert b"404" in data
        sock.close()
