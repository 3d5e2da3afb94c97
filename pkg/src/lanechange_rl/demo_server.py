"""Session server for human demonstration capture.

Speaks JSON text messages over WebSocket (the browser cockpit's transport;
each frame is a length-prefixed text message per RFC 6455). One session is
active at a time: every 0.5 s wall-clock tick the server pushes the latest
BEV frame plus HUD, collects at most one key (last one wins), applies it
(silence means Maintain), and steps the environment. Completed sessions are
appended to the demo file.

The WebSocket layer is a minimal stdlib implementation: HTTP upgrade
handshake, masked client frames, text/ping/close opcodes, no fragmentation.
"""

from __future__ import annotations

import base64
import hashlib
import json
import logging
import queue
import socket
import struct
import threading
import time
from pathlib import Path
from typing import Optional

from .demo import (
    DemoService,
    DemoSession,
    SessionMode,
    SessionStatus,
    UnknownKeyError,
    export_demos,
)
from .mdp_env import RewardWeights
from .traffic_world import RoadConfig

log = logging.getLogger(__name__)

WS_GUID = "258EAFA5-E914-47DA-95CA-C5AB0DC85B11"
PROTOCOL_VERSION = 1


class ProtocolError(RuntimeError):
    pass


class WebSocketConnection:
    """One accepted client connection after the upgrade handshake."""

    def __init__(self, sock: socket.socket):
        self.sock = sock
        self._recv_buffer = b""

    @staticmethod
    def accept(sock: socket.socket) -> "WebSocketConnection":
        request = b""
        while b"\r\n\r\n" not in request:
            chunk = sock.recv(4096)
            if not chunk:
                raise ProtocolError("client closed during handshake")
            request += chunk
        head = request.split(b"\r\n\r\n", 1)[0].decode("latin-1")
        headers = {}
        for line in head.split("\r\n")[1:]:
            name, _, value = line.partition(":")
            headers[name.strip().lower()] = value.strip()
        key = headers.get("sec-websocket-key")
        if not key or "websocket" not in headers.get("upgrade", "").lower():
            raise ProtocolError("not a websocket upgrade request")
        accept = base64.b64encode(hashlib.sha1((key + WS_GUID).encode()).digest()).decode()
        response = (
            "HTTP/1.1 101 Switching Protocols\r\n"
            "Upgrade: websocket\r\n"
            "Connection: Upgrade\r\n"
            f"Sec-WebSocket-Accept: {accept}\r\n\r\n"
        )
        sock.sendall(response.encode("latin-1"))
        return WebSocketConnection(sock)

    def _read_exact(self, n: int) -> bytes:
        while len(self._recv_buffer) < n:
            chunk = self.sock.recv(65536)
            if not chunk:
                raise ConnectionError("client disconnected")
            self._recv_buffer += chunk
        out, self._recv_buffer = self._recv_buffer[:n], self._recv_buffer[n:]
        return out

    def send_text(self, payload: str) -> None:
        data = payload.encode()
        header = bytearray([0x81])  # FIN + text
        n = len(data)
        if n < 126:
            header.append(n)
        elif n < 1 << 16:
            header.append(126)
            header += struct.pack(">H", n)
        else:
            header.append(127)
            header += struct.pack(">Q", n)
        self.sock.sendall(bytes(header) + data)

    def recv_text(self, timeout: Optional[float] = None) -> Optional[str]:
        """Next text message; None on clean close. Replies to pings."""
        self.sock.settimeout(timeout)
        try:
            while True:
                b0, b1 = self._read_exact(2)
                opcode = b0 & 0x0F
                masked = bool(b1 & 0x80)
                n = b1 & 0x7F
                if n == 126:
                    (n,) = struct.unpack(">H", self._read_exact(2))
                elif n == 127:
                    (n,) = struct.unpack(">Q", self._read_exact(8))
                mask = self._read_exact(4) if masked else b""
                payload = self._read_exact(n)
                if masked:
                    payload = bytes(c ^ mask[i % 4] for i, c in enumerate(payload))
                if opcode == 0x1:
                    return payload.decode()
                if opcode == 0x9:  # ping
                    self.sock.sendall(bytes([0x8A, len(payload)]) + payload)
                    continue
                if opcode == 0x8:  # close
                    return None
                # binary/pong/continuation: ignored
        finally:
            self.sock.settimeout(None)

    def close(self) -> None:
        try:
            self.sock.sendall(bytes([0x88, 0]))
        except OSError:
            pass
        self.sock.close()


def _client_reader(conn: WebSocketConnection, inbox: "queue.Queue[Optional[dict]]") -> None:
    try:
        while True:
            text = conn.recv_text()
            if text is None:
                inbox.put(None)
                return
            try:
                inbox.put(json.loads(text))
            except json.JSONDecodeError:
                log.warning("ignoring malformed client message")
    except (ConnectionError, OSError):
        inbox.put(None)


def frame_message(session: DemoSession, deadline: Optional[float]) -> str:
    """Frame push; tick_ms is the time remaining until the action deadline."""
    ego = session.env.world.ego
    hud = {
        "speed_kmh": round(ego.speed * 3.6, 1),
        "lane": ego.lane_target,
        "step": session.step_count,
        "reward_total": round(sum(s.total for s in session.record.steps), 3),
    }
    remaining = None if deadline is None else max(int((deadline - time.monotonic()) * 1000), 0)
    return json.dumps(
        {
            "type": "frame",
            "session": session.session_id,
            "step": session.step_count,
            "grid": base64.b64encode(session.latest_frame.tobytes()).decode(),
            "hud": hud,
            "tick_ms": remaining,
        }
    )


def end_message(session: DemoSession) -> str:
    return json.dumps(
        {
            "type": "end",
            "outcome": session.record.outcome,
            "totals": {
                "steps": session.step_count,
                "reward": sum(s.total for s in session.record.steps),
            },
        }
    )


class DemoServer:
    """Accepts one client at a time and drives keyboard demo sessions."""

    def __init__(
        self,
        host: str = "127.0.0.1",
        port: int = 8700,
        tick_period: float = 0.5,
        road: RoadConfig | None = None,
        weights: RewardWeights | None = None,
    ):
        self.host = host
        self.port = port
        self.tick_period = tick_period
        self.service = DemoService(road=road, weights=weights)
        self._listener: Optional[socket.socket] = None

    def __enter__(self) -> "DemoServer":
        self._listener = socket.create_server((self.host, self.port))
        self._listener.settimeout(60.0)
        return self

    def __exit__(self, *exc) -> None:
        if self._listener is not None:
            self._listener.close()

    @property
    def address(self) -> str:
        return f"ws://{self.host}:{self._listener.getsockname()[1]}"

    def serve_sessions(self, first_seed: int, count: int, out_file: Optional[Path]) -> list:
        """Run `count` keyboard sessions over one client connection.

        The client opens with a `hello`; each completed session is followed
        by an `end` message and the demo file is rewritten. Disconnection
        aborts the active session without exporting it.
        """
        assert self._listener is not None, "use DemoServer as a context manager"
        client, _addr = self._listener.accept()
        client.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        conn = WebSocketConnection.accept(client)
        inbox: "queue.Queue[Optional[dict]]" = queue.Queue()
        reader = threading.Thread(target=_client_reader, args=(conn, inbox), daemon=True)
        reader.start()

        try:
            hello = inbox.get(timeout=30.0)
        except queue.Empty:
            hello = None
        if hello is None or hello.get("type") != "hello":
            conn.close()
            raise ProtocolError("expected hello")
        log.info("client connected: %s", hello.get("version"))

        completed = []
        try:
            for k in range(count):
                session = self.service.start_session(first_seed + k, SessionMode.HUMAN)
                record = self._run_session(session, conn, inbox)
                self.service.finish()
                if record is None:
                    break
                completed.append(record)
                if out_file is not None:
                    export_demos(completed, out_file)
        finally:
            conn.close()
        return completed

    def _run_session(self, session: DemoSession, conn, inbox) -> Optional[object]:
        next_deadline = time.monotonic() + self.tick_period
        conn.send_text(frame_message(session, next_deadline))
        while session.status is SessionStatus.ACTIVE:
            pending_key: Optional[str] = None
            while True:
                remaining = next_deadline - time.monotonic()
                if remaining <= 0:
                    break
                try:
                    msg = inbox.get(timeout=remaining)
                except queue.Empty:
                    break
                if msg is None:
                    session.abort()
                    return None
                if msg.get("type") == "key":
                    pending_key = msg.get("key")  # last one wins
                elif msg.get("type") == "abort":
                    session.abort()
                    conn.send_text(end_message(session))
                    return None
            next_deadline += self.tick_period
            try:
                if pending_key is None:
                    session.submit_action("space")  # silence means Maintain
                else:
                    session.submit_action(pending_key)
            except UnknownKeyError:
                log.warning("ignoring unmapped key %r", pending_key)
                session.submit_action("space")
            if session.status is SessionStatus.ACTIVE:
                conn.send_text(frame_message(session, next_deadline))
        conn.send_text(end_message(session))
        return session.record
