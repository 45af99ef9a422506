"""Heuristic wire protocol: newline-delimited JSON over TCP.

Request:  {"v":1,"episode":<id>,"step":<t>,"raster_b64":<12288 raw RGB bytes,
          base64>,"reset":<bool>}
Response: {"v":1,"mean":[4 floats],"std":[4 floats],"value":<float>,
          "heatmap_b64":<4096 float32 little-endian, base64>}
Error:    {"v":1,"error":"<kind>"}

The server owns per-episode recurrent state keyed by (episode, step); a
client hitting a cache miss replays the episode from step 0. Any error
response surfaces to callers as RemoteUnavailable.
"""

from __future__ import annotations

import base64
import json
import math
import socket
import socketserver
import threading
from typing import Callable, Optional

import numpy as np

from .errors import ProtocolError, RemoteUnavailable
from .heuristic import ActionDistribution, HeuristicOutput, ObservationHistory
from .observation import RASTER, RasterSpec
from .physics import ActionCaps

PROTOCOL_VERSION = 1
RASTER_BYTES = 64 * 64 * 3
HEATMAP_FLOATS = 64 * 64


def encode_request(episode: str, step: int, raster: np.ndarray, reset: bool = False) -> bytes:
    raw = np.ascontiguousarray(raster, dtype=np.uint8).tobytes()
    if len(raw) != RASTER_BYTES:
        raise ProtocolError("raster_size", f"expected {RASTER_BYTES} bytes, got {len(raw)}")
    msg = {
        "v": PROTOCOL_VERSION,
        "episode": episode,
        "step": int(step),
        "raster_b64": base64.b64encode(raw).decode("ascii"),
        "reset": bool(reset),
    }
    return (json.dumps(msg, separators=(",", ":")) + "\n").encode("utf-8")


def parse_request(line: bytes) -> dict:
    try:
        msg = json.loads(line.decode("utf-8"))
    except (json.JSONDecodeError, UnicodeDecodeError) as e:
        raise ProtocolError("parse", str(e))
    if not isinstance(msg, dict) or msg.get("v") != PROTOCOL_VERSION:
        raise ProtocolError("version", f"unsupported message version {msg.get('v') if isinstance(msg, dict) else None!r}")
    try:
        raw = base64.b64decode(msg["raster_b64"], validate=True)
        step = int(msg["step"])
        episode = str(msg["episode"])
        reset = bool(msg.get("reset", False))
    except (KeyError, ValueError, TypeError) as e:
        raise ProtocolError("parse", str(e))
    if len(raw) != RASTER_BYTES:
        raise ProtocolError("raster_size", f"{len(raw)} bytes")
    raster = np.frombuffer(raw, dtype=np.uint8).reshape(64, 64, 3)
    return {"episode": episode, "step": step, "raster": raster, "reset": reset}


def encode_response(mean: np.ndarray, std: np.ndarray, value: float,
                    heatmap: np.ndarray) -> bytes:
    hm = np.ascontiguousarray(heatmap, dtype="<f4")
    if hm.size != HEATMAP_FLOATS:
        raise ProtocolError("heatmap_size", f"{hm.size} floats")
    msg = {
        "v": PROTOCOL_VERSION,
        "mean": [float(x) for x in np.asarray(mean, dtype=float)],
        "std": [float(x) for x in np.asarray(std, dtype=float)],
        "value": float(value),
        "heatmap_b64": base64.b64encode(hm.tobytes()).decode("ascii"),
    }
    return (json.dumps(msg, separators=(",", ":")) + "\n").encode("utf-8")


def encode_error(kind: str) -> bytes:
    return (json.dumps({"v": PROTOCOL_VERSION, "error": kind}, separators=(",", ":")) + "\n").encode("utf-8")


def parse_response(line: bytes) -> dict:
    try:
        msg = json.loads(line.decode("utf-8"))
    except (json.JSONDecodeError, UnicodeDecodeError) as e:
        raise ProtocolError("parse", str(e))
    if msg.get("error"):
        return {"error": str(msg["error"])}
    try:
        mean = np.asarray(msg["mean"], dtype=float)
        std = np.asarray(msg["std"], dtype=float)
        value = float(msg["value"])
        raw = base64.b64decode(msg["heatmap_b64"], validate=True)
    except (KeyError, ValueError, TypeError) as e:
        raise ProtocolError("parse", str(e))
    if mean.shape != (4,) or std.shape != (4,):
        raise ProtocolError("shape", "mean/std must have 4 channels")
    if len(raw) != HEATMAP_FLOATS * 4:
        raise ProtocolError("heatmap_size", f"{len(raw)} bytes")
    heatmap = np.frombuffer(raw, dtype="<f4").reshape(64, 64)
    return {"mean": mean, "std": std, "value": value, "heatmap": heatmap}


class RemoteHeuristic:
    """Protocol client exposing the standard heuristic interface.

    Histories are streamed incrementally per branch key; on a server-side
    cache miss (missing_prefix) the full history is replayed once.
    """

    def __init__(self, host: str = "127.0.0.1", port: int = 7447, timeout: float = 30.0):
        self.host = host
        self.port = port
        self.timeout = timeout
        self._sock: Optional[socket.socket] = None
        self._file = None
        self._sent: dict = {}
        self._lock = threading.Lock()

    def _connect(self):
        if self._sock is None:
            try:
                self._sock = socket.create_connection((self.host, self.port), timeout=self.timeout)
                self._file = self._sock.makefile("rb")
            except OSError as e:
                self._sock = None
                raise RemoteUnavailable(f"connect {self.host}:{self.port}: {e}")

    def close(self):
        with self._lock:
            if self._sock is not None:
                try:
                    self._sock.close()
                finally:
                    self._sock = None
                    self._file = None

    def _roundtrip(self, payload: bytes) -> dict:
        try:
            self._sock.sendall(payload)
            line = self._file.readline()
        except OSError as e:
            self.close_unlocked()
            raise RemoteUnavailable(f"io: {e}")
        if not line:
            self.close_unlocked()
            raise RemoteUnavailable("connection closed by server")
        return parse_response(line)

    def close_unlocked(self):
        if self._sock is not None:
            try:
                self._sock.close()
            finally:
                self._sock = None
                self._file = None

    def evaluate(self, history: ObservationHistory) -> HeuristicOutput:
        if len(history) == 0:
            raise ValueError("history must contain at least one observation")
        with self._lock:
            self._connect()
            key = history.key
            start = self._sent.get(key, 0)
            if start > len(history):
                start = 0
            try:
                resp = self._send_range(key, history, start)
            except RemoteUnavailable:
                raise
            if "error" in resp:
                if resp["error"] == "missing_prefix":
                    self._sent[key] = 0
                    resp = self._send_range(key, history, 0)
                if "error" in resp:
                    raise RemoteUnavailable(f"server error: {resp['error']}")
            self._sent[key] = len(history)
        return HeuristicOutput(
            policy=ActionDistribution(resp["mean"], resp["std"]),
            value=resp["value"],
            heatmap=resp["heatmap"].astype(np.float32),
        )

    def _send_range(self, key: str, history: ObservationHistory, start: int) -> dict:
        resp: dict = {}
        if start == len(history):
            # nothing new: re-request the last step to fetch the cached output
            start = len(history) - 1
        for t in range(start, len(history)):
            payload = encode_request(key, t, history[t].raster(), reset=(t == 0 and start == 0))
            resp = self._roundtrip(payload)
            if "error" in resp:
                return resp
        return resp


class _Session:
    __slots__ = ("impl", "next_step", "last")

    def __init__(self, impl):
        self.impl = impl
        self.next_step = 0
        self.last = None


class HeuristicServer:
    """Threaded TCP server mapping rasters to heuristic outputs.

    session_factory() must return an object with step(raster) ->
    (mean, std, value, heatmap); one session exists per episode key and owns
    any recurrent state. Out-of-order steps produce a missing_prefix error;
    re-requesting the step most recently answered returns the cached output.
    """

    def __init__(self, session_factory: Callable[[], object],
                 host: str = "127.0.0.1", port: int = 0):
        self.session_factory = session_factory
        self.sessions: dict = {}
        self._lock = threading.Lock()
        outer = self

        class Handler(socketserver.StreamRequestHandler):
            def handle(self):
                while True:
                    line = self.rfile.readline()
                    if not line:
                        return
                    self.wfile.write(outer.handle_line(line))
                    self.wfile.flush()

        class Server(socketserver.ThreadingTCPServer):
            allow_reuse_address = True
            daemon_threads = True

        self._server = Server((host, port), Handler)
        self.address = self._server.server_address
        self._thread: Optional[threading.Thread] = None

    def handle_line(self, line: bytes) -> bytes:
        try:
            req = parse_request(line)
        except ProtocolError as e:
            return encode_error(e.kind)
        with self._lock:
            key = req["episode"]
            session = self.sessions.get(key)
            if req["reset"] or (session is None and req["step"] == 0):
                session = _Session(self.session_factory())
                self.sessions[key] = session
            if session is None:
                return encode_error("missing_prefix")
            if req["step"] == session.next_step - 1 and session.last is not None:
                return session.last
            if req["step"] != session.next_step:
                return encode_error("missing_prefix")
            try:
                mean, std, value, heatmap = session.impl.step(req["raster"])
            except Exception:
                return encode_error("internal")
            session.next_step += 1
            session.last = encode_response(mean, std, value, heatmap)
            return session.last

    def start(self) -> "HeuristicServer":
        self._thread = threading.Thread(target=self._server.serve_forever, daemon=True)
        self._thread.start()
        return self

    def stop(self):
        self._server.shutdown()
        self._server.server_close()
        if self._thread is not None:
            self._thread.join(timeout=5)

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc):
        self.stop()


class RasterSession:
    """Stateful raster-only heuristic: the protocol-side stand-in.

    Reads the semantic colors straight off the raster (green target, white
    occlusion) and produces a potential-field-style policy in the
    robot-centric frame. Deterministic given the request stream.
    """

    def __init__(self, caps: ActionCaps = ActionCaps(), raster_spec: RasterSpec = RASTER):
        self.caps = caps
        self.spec = raster_spec
        self.last_seen: Optional[np.ndarray] = None
        self.age = 0

    def step(self, raster: np.ndarray):
        green = np.all(raster == np.array([0, 255, 0], dtype=np.uint8), axis=-1)
        white = np.all(raster == np.array([255, 255, 255], dtype=np.uint8), axis=-1)
        if green.any():
            self.last_seen = green
            self.age = 0
        elif self.last_seen is not None:
            self.age += 1

        hm = np.full((self.spec.size, self.spec.size), 0.01, dtype=np.float32)
        remembered = None
        if self.last_seen is not None:
            remembered = self.last_seen if self.age == 0 else (self.last_seen & white)
            if not remembered.any():
                remembered = None
        if remembered is not None:
            hm[remembered] = 0.9 * 0.98 ** self.age
        elif white.any():
            hm[white] = 0.5

        r, c = np.unravel_index(int(np.argmax(hm)), hm.shape)
        rc = self.spec.pixel_center_rc(int(r), int(c))
        forward, lateral_left = rc[1], -rc[0]
        lin = self.caps.linear
        clip = 0.995
        close = bool(green.any()) and math.hypot(rc[0], rc[1]) < 0.05
        u = np.array([
            math.atanh(float(np.clip(forward / lin, -clip, clip))),
            math.atanh(float(np.clip(lateral_left / lin, -clip, clip))),
            math.atanh(float(np.clip(-rc[0] * 2.0 / self.caps.angular, -clip, clip))),
            math.atanh(-clip if close else 0.5),
        ])
        std = np.full(4, 0.15)
        value = float(np.clip(-(math.hypot(rc[0], rc[1]) / lin + 10.0), -50.0, 0.0))
        return u, std, value, hm
