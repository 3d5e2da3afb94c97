import base64
import hashlib
import json
import os
import socket
import struct
import threading
import time

import pytest

from lanechange_rl.demo import validate_demo_file
from lanechange_rl.demo_server import WS_GUID, DemoServer
from lanechange_rl.ego_control import DecisionAction


class WsTestClient:
    """Minimal RFC 6455 client for exercising the server."""

    def __init__(self, host: str, port: int):
        self.sock = socket.create_connection((host, port), timeout=20)
        self.sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        key = base64.b64encode(os.urandom(16)).decode()
        request = (
            f"GET / HTTP/1.1\r\nHost: {host}:{port}\r\n"
            "Upgrade: websocket\r\nConnection: Upgrade\r\n"
            f"Sec-WebSocket-Key: {key}\r\nSec-WebSocket-Version: 13\r\n\r\n"
        )
        self.sock.sendall(request.encode())
        response = b""
        while b"\r\n\r\n" not in response:
            response += self.sock.recv(4096)
        head, _, self._buffer = response.partition(b"\r\n\r\n")
        assert b"101" in head.split(b"\r\n")[0]
        expect = base64.b64encode(hashlib.sha1((key + WS_GUID).encode()).digest()).decode()
        assert expect.encode() in head

    def _read_exact(self, n: int) -> bytes:
        while len(self._buffer) < n:
            chunk = self.sock.recv(65536)
            if not chunk:
                raise ConnectionError("server closed")
            self._buffer += chunk
        out, self._buffer = self._buffer[:n], self._buffer[n:]
        return out

    def send_json(self, obj) -> None:
        data = json.dumps(obj).encode()
        mask = os.urandom(4)
        header = bytearray([0x81])
        n = len(data)
        if n < 126:
            header.append(0x80 | n)
        elif n < 1 << 16:
            header.append(0x80 | 126)
            header += struct.pack(">H", n)
        else:
            header.append(0x80 | 127)
            header += struct.pack(">Q", n)
        masked = bytes(c ^ mask[i % 4] for i, c in enumerate(data))
        self.sock.sendall(bytes(header) + mask + masked)

    def recv_json(self, timeout: float = 20.0):
        self.sock.settimeout(timeout)
        while True:
            b0, b1 = self._read_exact(2)
            opcode = b0 & 0x0F
            n = b1 & 0x7F
            if n == 126:
                (n,) = struct.unpack(">H", self._read_exact(2))
            elif n == 127:
                (n,) = struct.unpack(">Q", self._read_exact(8))
            payload = self._read_exact(n)
            if opcode == 0x8:
                return None
            if opcode == 0x1:
                return json.loads(payload.decode())

    def close(self) -> None:
        self.sock.close()


def start_server(tmp_path, tick_period, count=1, seed=0):
    server = DemoServer(host="127.0.0.1", port=0, tick_period=tick_period)
    server.__enter__()
    out_file = tmp_path / "human.demo"
    results = {}

    def run():
        try:
            results["records"] = server.serve_sessions(seed, count, out_file)
        except Exception as exc:  # surfaces in the main thread via results
            results["error"] = exc

    thread = threading.Thread(target=run, daemon=True)
    thread.start()
    host, port = server._listener.getsockname()
    return server, thread, results, out_file, host, port


def drive_session(client, key_fn, max_steps=200):
    """Reply to each frame with key_fn(step); returns (frames_seen, end_msg)."""
    frames = 0
    while True:
        msg = client.recv_json()
        assert msg is not None
        if msg["type"] == "end":
            return frames, msg
        assert msg["type"] == "frame"
        assert len(base64.b64decode(msg["grid"])) == 80 * 45
        frames += 1
        key = key_fn(msg["step"])
        if key is not None:
            client.send_json({"type": "key", "key": key})
        assert frames < max_steps


def test_full_session_over_the_wire(tmp_path):
    server, thread, results, out_file, host, port = start_server(tmp_path, tick_period=0.05)
    try:
        client = WsTestClient(host, port)
        client.send_json({"type": "hello", "version": "test-1"})
        # change right three times, then hold: deterministic success
        frames, end = drive_session(client, lambda step: "d" if step % 11 == 0 else "space")
        assert end["outcome"] == "success"
        assert end["totals"]["steps"] == frames  # one action consumed per tick
        client.close()
        thread.join(timeout=30)
        assert "error" not in results
        assert len(results["records"]) == 1
        record = results["records"][0]
        assert record.outcome == "success"
        assert len(record.steps) == frames
        summary = validate_demo_file(out_file)
        assert summary["sessions"] == 1
    finally:
        server.__exit__()


def test_silence_records_maintain(tmp_path):
    server, thread, results, out_file, host, port = start_server(tmp_path, tick_period=0.05)
    try:
        client = WsTestClient(host, port)
        client.send_json({"type": "hello", "version": "test-1"})
        # never send a key: every recorded action must be Maintain
        msg = client.recv_json()
        assert msg["type"] == "frame"
        while True:
            msg = client.recv_json()
            if msg["type"] == "end":
                break
        client.close()
        thread.join(timeout=60)
        record = results["records"][0]
        actions = {s.action for s in record.steps}
        assert actions == {int(DecisionAction.MAINTAIN)}
        assert record.outcome == "missed_exit"
    finally:
        server.__exit__()


def test_last_key_wins_within_tick(tmp_path):
    server, thread, results, out_file, host, port = start_server(tmp_path, tick_period=0.1)
    try:
        client = WsTestClient(host, port)
        client.send_json({"type": "hello", "version": "test-1"})
        msg = client.recv_json()
        assert msg["step"] == 0
        client.send_json({"type": "key", "key": "w"})
        client.send_json({"type": "key", "key": "s"})  # replaces the pending w
        frames, end = drive_session(client, lambda step: "space")
        client.close()
        thread.join(timeout=60)
        record = results["records"][0]
        assert record.steps[0].action == int(DecisionAction.BRAKE)
        assert int(DecisionAction.ACCELERATE) not in {s.action for s in record.steps}
    finally:
        server.__exit__()


def test_abort_discards_session(tmp_path):
    server, thread, results, out_file, host, port = start_server(tmp_path, tick_period=0.1)
    try:
        client = WsTestClient(host, port)
        client.send_json({"type": "hello", "version": "test-1"})
        assert client.recv_json()["type"] == "frame"
        client.send_json({"type": "abort"})
        end = client.recv_json()
        assert end["type"] == "end"
        client.close()
        thread.join(timeout=30)
        assert results["records"] == []
        assert not out_file.exists()
    finally:
        server.__exit__()


def test_tick_timing_holds_half_second(tmp_path):
    server, thread, results, out_file, host, port = start_server(tmp_path, tick_period=0.5)
    try:
        client = WsTestClient(host, port)
        client.send_json({"type": "hello", "version": "test-1"})
        arrivals = []
        for _ in range(7):
            msg = client.recv_json()
            assert msg["type"] == "frame"
            arrivals.append(time.monotonic())
        client.send_json({"type": "abort"})
        client.recv_json()
        client.close()
        thread.join(timeout=30)
    finally:
        server.__exit__()
    periods = [b - a for a, b in zip(arrivals, arrivals[1:])]
    for period in periods:
        assert abs(period - 0.5) <= 0.05, periods
