"""Length-prefixed JSON framing over TCP, the teacher service, and its client.

Each frame is a 4-byte big-endian unsigned length followed by a UTF-8 JSON body.
"""
import json
import logging
import socket
import socketserver
import struct
import threading
import time

import numpy as np

from ..probmap import simplex_violation
from .bayes import bayes_posterior

log = logging.getLogger(__name__)

MAX_FRAME = 64 * 1024 * 1024
_LEN = struct.Struct("!I")


class TeacherError(RuntimeError):
    """Base class for teacher query failures."""


class TeacherTimeout(TeacherError):
    """The teacher did not answer in time (or could not be reached at all)."""


class MalformedResponse(TeacherError):
    pass


class SimplexViolation(TeacherError):
    pass


class RemoteError(TeacherError):
    def __init__(self, code, message):
        super().__init__(f"teacher error [{code}]: {message}")
        self.code = code


class FrameTooLarge(ValueError):
    def __init__(self, length):
        super().__init__(f"frame of {length} bytes exceeds {MAX_FRAME}")
        self.length = length


def encode_frame(obj):
    raw = json.dumps(obj, separators=(",", ":"), allow_nan=False).encode("utf-8")
    if len(raw) > MAX_FRAME:
        raise FrameTooLarge(len(raw))
    return _LEN.pack(len(raw)) + raw


def _recv_exact(sock, n):
    buf = bytearray()
    while len(buf) < n:
        chunk = sock.recv(min(n - len(buf), 1 << 20))
        if not chunk:
            return None
        buf += chunk
    return bytes(buf)


def read_frame(sock):
    """Read one frame body. Returns None on clean EOF; raises FrameTooLarge after
    draining an oversize body so the stream stays aligned."""
    hdr = _recv_exact(sock, _LEN.size)
    if hdr is None:
        return None
    (n,) = _LEN.unpack(hdr)
    if n > MAX_FRAME:
        remaining = n
        while remaining:
            chunk = sock.recv(min(remaining, 1 << 20))
            if not chunk:
                return None
            remaining -= len(chunk)
        raise FrameTooLarge(n)
    body = _recv_exact(sock, n)
    if body is None:
        raise ConnectionError("connection closed mid-frame")
    return body


def _reject_constant(name):
    raise ValueError(f"non-finite number {name} in frame")


def decode_body(body):
    return json.loads(body.decode("utf-8"), parse_constant=_reject_constant)


# --- server -----------------------------------------------------------------


class _RequestError(Exception):
    def __init__(self, code, message):
        super().__init__(message)
        self.code = code


def _parse_predict(msg, feature_dim):
    if not isinstance(msg, dict) or msg.get("type") != "predict":
        raise _RequestError("decode", "expected an object with type 'predict'")
    try:
        h, w, d = (msg[k] for k in ("h", "w", "d"))
        flat = msg["features"]
    except KeyError as e:
        raise _RequestError("decode", f"missing field {e.args[0]!r}") from None
    if not all(isinstance(v, int) and not isinstance(v, bool) for v in (h, w, d)) or not isinstance(flat, list):
        raise _RequestError("decode", "h, w, d must be integers and features a list")
    if min(h, w, d) < 1 or d != feature_dim or len(flat) != h * w * d:
        raise _RequestError("shape", f"cannot view {len(flat)} values as {h}x{w}x{d} (teacher expects d={feature_dim})")
    try:
        features = np.array(flat, dtype=np.float64)
    except (TypeError, ValueError):
        raise _RequestError("decode", "features must be numbers") from None
    if features.ndim != 1:
        raise _RequestError("decode", "features must be a flat list of numbers")
    if not np.all(np.isfinite(features)):
        raise _RequestError("decode", "features must be finite")
    return features.reshape(h, w, d)


class _Handler(socketserver.BaseRequestHandler):
    def setup(self):
        self.server.track(self.request, True)

    def finish(self):
        self.server.track(self.request, False)

    def handle(self):
        sock = self.request
        while True:
            request_id = -1
            try:
                body = read_frame(sock)
                if body is None:
                    return
                try:
                    msg = decode_body(body)
                except (UnicodeDecodeError, ValueError) as e:
                    raise _RequestError("decode", str(e)) from None
                if isinstance(msg, dict) and isinstance(msg.get("request_id"), int):
                    request_id = msg["request_id"]
                features = _parse_predict(msg, self.server.spec.feature_dim)
                try:
                    probs = bayes_posterior(features, self.server.spec)
                except Exception as e:  # noqa: BLE001 - any failure here is reported to the client
                    raise _RequestError("internal", str(e)) from None
                reply = {
                    "type": "result",
                    "request_id": request_id,
                    "c": int(probs.shape[0]),
                    "probs": probs.ravel().tolist(),
                }
            except FrameTooLarge as e:
                reply = {"type": "error", "request_id": -1, "code": "shape", "message": str(e)}
            except _RequestError as e:
                reply = {"type": "error", "request_id": request_id, "code": e.code, "message": str(e)}
            except (ConnectionError, OSError):
                return
            try:
                sock.sendall(encode_frame(reply))
            except OSError:
                return


class _Server(socketserver.ThreadingTCPServer):
    daemon_threads = True
    allow_reuse_address = True

    def __init__(self, addr, spec):
        self.spec = spec
        self._conns = set()
        self._lock = threading.Lock()
        super().__init__(addr, _Handler)

    def track(self, sock, alive):
        with self._lock:
            (self._conns.add if alive else self._conns.discard)(sock)

    @property
    def connection_count(self):
        with self._lock:
            return len(self._conns)

    def close_all(self):
        with self._lock:
            conns = list(self._conns)
        for s in conns:
            try:
                s.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass


class TeacherServer:
    """A running teacher service. Use ``stop()`` or a ``with`` block to shut it down."""

    def __init__(self, source_spec, port=0, host="127.0.0.1"):
        self._server = _Server((host, port), source_spec)
        self.host, self.port = self._server.server_address[:2]
        self._thread = threading.Thread(target=self._server.serve_forever, name="teacher-server", daemon=True)
        self._thread.start()
        log.info("teacher serving on %s:%d", self.host, self.port)

    @property
    def active_connections(self):
        return self._server.connection_count

    def stop(self, timeout=5.0):
        self._server.shutdown()
        self._server.close_all()
        self._server.server_close()
        self._thread.join(timeout)
        deadline = time.monotonic() + timeout
        while self._server.connection_count and time.monotonic() < deadline:
            time.sleep(0.01)

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.stop()


def serve_teacher(source_spec, port, host="127.0.0.1"):
    try:
        return TeacherServer(source_spec, port, host)
    except OSError as e:
        raise OSError(f"cannot bind teacher service to {host}:{port}: {e}") from e


# --- client -----------------------------------------------------------------


class RemoteClient:
    """Blocking client holding one connection with at most one request in flight."""

    def __init__(self, host, port, timeout_ms=10_000):
        self.host, self.port = host, port
        self.timeout = timeout_ms / 1000.0
        self._sock = None
        self._next_id = 0
        self._lock = threading.Lock()

    def _connect(self):
        if self._sock is None:
            try:
                self._sock = socket.create_connection((self.host, self.port), timeout=self.timeout)
            except OSError as e:
                raise TeacherTimeout(f"teacher at {self.host}:{self.port} unreachable: {e}") from e
            self._sock.settimeout(self.timeout)
        return self._sock

    def close(self):
        if self._sock is not None:
            try:
                self._sock.close()
            finally:
                self._sock = None

    def request(self, features):
        features = np.asarray(features, dtype=np.float64)
        h, w, d = features.shape
        with self._lock:
            request_id = self._next_id
            self._next_id += 1
            frame = encode_frame({
                "type": "predict",
                "request_id": request_id,
                "h": h,
                "w": w,
                "d": d,
                "features": features.ravel().tolist(),
            })
            sock = self._connect()
            try:
                sock.sendall(frame)
                body = read_frame(sock)
            except socket.timeout as e:
                self.close()
                raise TeacherTimeout(f"no response within {self.timeout:.3f}s") from e
            except (OSError, FrameTooLarge) as e:
                self.close()
                raise MalformedResponse(f"transport failure: {e}") from e
            if body is None:
                self.close()
                raise MalformedResponse("connection closed before a response arrived")
        return self._parse(body, request_id, h, w)

    def _parse(self, body, request_id, h, w):
        try:
            msg = decode_body(body)
        except (UnicodeDecodeError, ValueError) as e:
            raise MalformedResponse(f"undecodable response: {e}") from e
        if not isinstance(msg, dict):
            raise MalformedResponse("response is not an object")
        if msg.get("request_id") != request_id:
            raise MalformedResponse(f"response id {msg.get('request_id')!r} != request id {request_id}")
        if msg.get("type") == "error":
            raise RemoteError(msg.get("code"), msg.get("message"))
        if msg.get("type") != "result":
            raise MalformedResponse(f"unexpected response type {msg.get('type')!r}")
        c, flat = msg.get("c"), msg.get("probs")
        if not isinstance(c, int) or c < 2 or not isinstance(flat, list) or len(flat) != c * h * w:
            raise MalformedResponse("result does not carry a C x H x W probability map")
        try:
            probs = np.array(flat, dtype=np.float64).reshape(c, h, w)
        except (TypeError, ValueError) as e:
            raise MalformedResponse(f"non-numeric probabilities: {e}") from e
        problem = simplex_violation(probs)
        if problem:
            raise SimplexViolation(problem)
        return probs
