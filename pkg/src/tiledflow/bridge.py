"""Remote vector-field evaluation over a framed binary protocol (XFP1).

Frames are magic "XFP1", a u8 type (1 request / 2 response / 3 error),
a u64 request id, a u32 payload length, then the payload; everything is
little-endian.  One connection carries pipelined requests; responses
may return out of order and are matched by id.  An eval request holds
t, a mode byte (1 dense / 2 sparse), four u32 shape fields, opaque
condition bytes, and the float32 latent payload; the response carries
the float32 vector of identical shape.
"""

from __future__ import annotations

import itertools
import socket
import struct
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .errors import IncompleteFrameError, ProtocolError, ProviderError
from .flowcore import VectorFieldProvider
from .lattice import DenseLatent, Dims, SparseLatent
from .priors import ConditionEmbedding

MAGIC = b"XFP1"
TYPE_REQUEST = 1
TYPE_RESPONSE = 2
TYPE_ERROR = 3

MODE_DENSE = 1
MODE_SPARSE = 2

MAX_PAYLOAD = 256 * 1024 * 1024
_HEADER = struct.Struct("<4sBQI")
HEADER_SIZE = _HEADER.size

_REQ_HEAD = struct.Struct("<fB4II")  # t, mode, shape[4], condition_len


@dataclass(frozen=True)
class Frame:
    type: int
    request_id: int
    payload: bytes


@dataclass(frozen=True)
class EvalRequest:
    t: float
    mode: int
    shape: tuple[int, int, int, int]
    condition: bytes
    latent: bytes


def encode_frame(frame: Frame) -> bytes:
    if frame.type not in (TYPE_REQUEST, TYPE_RESPONSE, TYPE_ERROR):
        raise ProtocolError(f"unknown frame type {frame.type}")
    if len(frame.payload) > MAX_PAYLOAD:
        raise ProtocolError(f"payload of {len(frame.payload)} bytes exceeds limit")
    return _HEADER.pack(MAGIC, frame.type, frame.request_id, len(frame.payload)) + frame.payload


def decode_frame(data: bytes) -> tuple[Frame, int]:
    """Decode one frame from the head of `data`; returns (frame, consumed).

    Raises IncompleteFrameError when more bytes are needed (resumable)
    and ProtocolError on structural violations.
    """
    if len(data) < HEADER_SIZE:
        raise IncompleteFrameError(f"need {HEADER_SIZE} header bytes, have {len(data)}")
    magic, ftype, request_id, payload_len = _HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise ProtocolError(f"bad magic {magic!r}")
    if ftype not in (TYPE_REQUEST, TYPE_RESPONSE, TYPE_ERROR):
        raise ProtocolError(f"unknown frame type {ftype}")
    if payload_len > MAX_PAYLOAD:
        raise ProtocolError(f"declared payload of {payload_len} bytes exceeds limit")
    end = HEADER_SIZE + payload_len
    if len(data) < end:
        raise IncompleteFrameError(f"need {end} bytes, have {len(data)}")
    return Frame(ftype, request_id, bytes(data[HEADER_SIZE:end])), end


def encode_eval_request(req: EvalRequest) -> bytes:
    head = _REQ_HEAD.pack(req.t, req.mode, *req.shape, len(req.condition))
    return head + req.condition + req.latent


def parse_eval_request(payload: bytes) -> EvalRequest:
    if len(payload) < _REQ_HEAD.size:
        raise ProtocolError(f"eval request header truncated at {len(payload)} bytes")
    t, mode, s0, s1, s2, s3, cond_len = _REQ_HEAD.unpack_from(payload, 0)
    if mode not in (MODE_DENSE, MODE_SPARSE):
        raise ProtocolError(f"unknown eval mode {mode}")
    off = _REQ_HEAD.size
    if len(payload) < off + cond_len:
        raise ProtocolError("eval request condition truncated")
    condition = payload[off : off + cond_len]
    latent = payload[off + cond_len :]
    shape = (s0, s1, s2, s3)
    if mode == MODE_DENSE:
        count = s0 * s1 * s2 * s3
        if len(latent) != 4 * count:
            raise ProtocolError(
                f"dense latent payload is {len(latent)} bytes, expected {4 * count}"
            )
    else:
        n, l = s0, s1
        expected = 4 + n * (12 + 4 * l)
        if len(latent) != expected:
            raise ProtocolError(
                f"sparse latent payload is {len(latent)} bytes, expected {expected}"
            )
        (declared,) = struct.unpack_from("<I", latent, 0)
        if declared != n:
            raise ProtocolError(f"sparse count {declared} != shape count {n}")
    return EvalRequest(float(t), int(mode), shape, condition, latent)


def serialize_sparse(slat: SparseLatent) -> bytes:
    n = len(slat)
    l = slat.dims.l
    rows = np.zeros((n, 12 + 4 * l), dtype=np.uint8)
    if n:
        rows[:, :12] = slat.coords.astype("<u4").view(np.uint8).reshape(n, 12)
        rows[:, 12:] = slat.features.astype("<f4").view(np.uint8).reshape(n, 4 * l)
    return struct.pack("<I", n) + rows.tobytes()


def deserialize_sparse(data: bytes, dims: Dims) -> SparseLatent:
    if len(data) < 4:
        raise ProtocolError("sparse payload truncated")
    (n,) = struct.unpack_from("<I", data, 0)
    row = 12 + 4 * dims.l
    if len(data) != 4 + n * row:
        raise ProtocolError(f"sparse payload is {len(data)} bytes, expected {4 + n * row}")
    raw = np.frombuffer(data, dtype=np.uint8, offset=4).reshape(n, row) if n else np.zeros((0, row), np.uint8)
    coords = raw[:, :12].copy().view("<u4").astype(np.int64)
    feats = raw[:, 12:].copy().view("<f4").astype(np.float32)
    return SparseLatent(dims, coords.reshape(n, 3), feats.reshape(n, dims.l))


def _request_for_patch(patch, condition: ConditionEmbedding, t: float) -> EvalRequest:
    if isinstance(patch, SparseLatent):
        shape = (len(patch), patch.dims.l, 0, 0)
        return EvalRequest(t, MODE_SPARSE, shape, condition.data, serialize_sparse(patch))
    data = np.ascontiguousarray(patch.data, dtype="<f4")
    return EvalRequest(t, MODE_DENSE, data.shape, condition.data, data.tobytes())


def _recv_exact(sock: socket.socket, count: int) -> bytes:
    buf = bytearray()
    while len(buf) < count:
        chunk = sock.recv(count - len(buf))
        if not chunk:
            raise ConnectionError("connection closed by peer")
        buf += chunk
    return bytes(buf)


def _read_frame(sock: socket.socket) -> Frame:
    header = _recv_exact(sock, HEADER_SIZE)
    magic, ftype, request_id, payload_len = _HEADER.unpack(header)
    if magic != MAGIC:
        raise ProtocolError(f"bad magic {magic!r}")
    if ftype not in (TYPE_REQUEST, TYPE_RESPONSE, TYPE_ERROR):
        raise ProtocolError(f"unknown frame type {ftype}")
    if payload_len > MAX_PAYLOAD:
        raise ProtocolError(f"declared payload of {payload_len} bytes exceeds limit")
    payload = _recv_exact(sock, payload_len) if payload_len else b""
    return Frame(ftype, request_id, payload)


def _parse_endpoint(endpoint: str) -> tuple[str, int]:
    host, sep, port = endpoint.rpartition(":")
    if not sep or not port.isdigit():
        raise ProviderError(f"endpoint must look like host:port, got {endpoint!r}")
    return host or "127.0.0.1", int(port)


class _Pending:
    __slots__ = ("event", "frame", "error")

    def __init__(self):
        self.event = threading.Event()
        self.frame: Frame | None = None
        self.error: Exception | None = None


class RemoteProvider(VectorFieldProvider):
    """VectorFieldProvider backed by an XFP1 peer.

    Safe for concurrent evaluate() calls; requests are pipelined on one
    connection and matched to responses by request id.
    """

    concurrent_safe = True

    def __init__(self, endpoint: str | socket.socket, timeout: float = 30.0):
        if isinstance(endpoint, socket.socket):
            self._sock = endpoint
        else:
            host, port = _parse_endpoint(endpoint)
            self._sock = socket.create_connection((host, port))
        self.timeout = timeout
        self._ids = itertools.count(1)
        self._send_lock = threading.Lock()
        self._pending: dict[int, _Pending] = {}
        self._pending_lock = threading.Lock()
        self._closed = False
        self._reader = threading.Thread(target=self._read_loop, daemon=True)
        self._reader.start()

    def _read_loop(self):
        try:
            while True:
                frame = _read_frame(self._sock)
                with self._pending_lock:
                    slot = self._pending.pop(frame.request_id, None)
                if slot is not None:
                    slot.frame = frame
                    slot.event.set()
        except Exception as exc:
            self._fail_all(exc)

    def _fail_all(self, exc: Exception):
        self._closed = True
        with self._pending_lock:
            slots = list(self._pending.values())
            self._pending.clear()
        for slot in slots:
            slot.error = exc
            slot.event.set()

    def evaluate(self, patch, condition, t):
        if self._closed:
            raise ProviderError("provider connection is closed")
        req = _request_for_patch(patch, condition, t)
        request_id = next(self._ids)
        slot = _Pending()
        with self._pending_lock:
            self._pending[request_id] = slot
        frame = Frame(TYPE_REQUEST, request_id, encode_eval_request(req))
        try:
            with self._send_lock:
                self._sock.sendall(encode_frame(frame))
        except OSError as exc:
            with self._pending_lock:
                self._pending.pop(request_id, None)
            raise ProviderError(f"send failed for request {request_id}: {exc}") from exc
        if not slot.event.wait(self.timeout):
            with self._pending_lock:
                self._pending.pop(request_id, None)
            raise ProviderError(f"timeout waiting for response to request {request_id}")
        if slot.error is not None:
            raise ProviderError(f"connection failed for request {request_id}: {slot.error}")
        reply = slot.frame
        if reply.type == TYPE_ERROR:
            raise ProviderError(
                f"remote error for request {request_id}: {reply.payload.decode('utf-8', 'replace')}"
            )
        return self._vector_from_response(patch, reply.payload, request_id)

    def _vector_from_response(self, patch, payload: bytes, request_id: int):
        if isinstance(patch, SparseLatent):
            expected = 4 * len(patch) * patch.dims.l
            if len(payload) != expected:
                raise ProtocolError(
                    f"response {request_id}: payload {len(payload)} bytes != expected {expected}"
                )
            feats = np.frombuffer(payload, dtype="<f4").reshape(len(patch), patch.dims.l)
            return patch.with_features(feats.copy())
        expected = 4 * patch.data.size
        if len(payload) != expected:
            raise ProtocolError(
                f"response {request_id}: payload {len(payload)} bytes != expected {expected}"
            )
        data = np.frombuffer(payload, dtype="<f4").reshape(patch.data.shape)
        return patch.with_data(data.copy())

    def close(self):
        self._closed = True
        try:
            self._sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self._sock.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc_info):
        self.close()


class ProviderServer:
    """Serves a VectorFieldProvider over XFP1.

    Handles concurrent requests per connection; responses go out as
    they complete, matched by request id.  Malformed payloads produce
    type-3 error frames and the connection survives; an unframeable
    stream (bad magic) gets one error frame and the connection closes,
    since resynchronization is impossible.
    """

    def __init__(self, provider: VectorFieldProvider, dims: Dims, host: str = "127.0.0.1",
                 port: int = 0, workers: int = 8):
        self.provider = provider
        self.dims = dims
        self._listener = socket.create_server((host, port))
        self._pool = ThreadPoolExecutor(max_workers=workers)
        self._threads: list[threading.Thread] = []
        self._conns: set[socket.socket] = set()
        self._lock = threading.Lock()
        self._stopping = False
        self._accept_thread: threading.Thread | None = None

    @property
    def address(self) -> str:
        host, port = self._listener.getsockname()[:2]
        return f"{host}:{port}"

    def start(self):
        self._accept_thread = threading.Thread(target=self._accept_loop, daemon=True)
        self._accept_thread.start()
        return self

    def _accept_loop(self):
        while not self._stopping:
            try:
                conn, _ = self._listener.accept()
            except OSError:
                return
            with self._lock:
                self._conns.add(conn)
            thread = threading.Thread(target=self._serve_connection, args=(conn,), daemon=True)
            thread.start()
            self._threads.append(thread)

    def _serve_connection(self, conn: socket.socket):
        send_lock = threading.Lock()

        def send(frame: Frame):
            try:
                with send_lock:
                    conn.sendall(encode_frame(frame))
            except OSError:
                pass

        try:
            while True:
                try:
                    frame = _read_frame(conn)
                except ProtocolError as exc:
                    # Framing is lost; answer once and drop the connection.
                    send(Frame(TYPE_ERROR, 0, str(exc).encode("utf-8")))
                    return
                except (ConnectionError, OSError):
                    return
                if frame.type != TYPE_REQUEST:
                    send(Frame(TYPE_ERROR, frame.request_id,
                               f"expected request frame, got type {frame.type}".encode()))
                    continue
                self._pool.submit(self._answer, send, frame)
        finally:
            with self._lock:
                self._conns.discard(conn)
            conn.close()

    def _answer(self, send, frame: Frame):
        try:
            req = parse_eval_request(frame.payload)
            patch = self._patch_from_request(req)
            cond = ConditionEmbedding(bytes(req.condition))
            vector = self.provider.evaluate(patch, cond, req.t)
            if isinstance(vector, SparseLatent):
                payload = np.ascontiguousarray(vector.features, dtype="<f4").tobytes()
            else:
                payload = np.ascontiguousarray(vector.data, dtype="<f4").tobytes()
            send(Frame(TYPE_RESPONSE, frame.request_id, payload))
        except Exception as exc:
            send(Frame(TYPE_ERROR, frame.request_id, str(exc).encode("utf-8")))

    def _patch_from_request(self, req: EvalRequest):
        if req.mode == MODE_SPARSE:
            if req.shape[1] != self.dims.l:
                raise ProtocolError(f"sparse feature width {req.shape[1]} != {self.dims.l}")
            return deserialize_sparse(req.latent, self.dims.patch_dims())
        k0, k1, k2, c = req.shape
        data = np.frombuffer(req.latent, dtype="<f4").reshape(req.shape)
        if k0 != k1 or k1 != k2:
            raise ProtocolError(f"dense patch must be cubic, got {req.shape}")
        ratio = self.dims.ratio
        patch_dims = Dims(1, 1, k0, k0 * ratio, c, self.dims.l)
        return DenseLatent(patch_dims, data.copy())

    def stop(self):
        self._stopping = True
        try:
            self._listener.close()
        except OSError:
            pass
        with self._lock:
            conns = list(self._conns)
        for conn in conns:
            try:
                conn.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass
            conn.close()
        self._pool.shutdown(wait=False)

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc_info):
        self.stop()


def remote_provider(endpoint: str, timeout: float = 30.0) -> RemoteProvider:
    """Connect to a serving peer and wrap it as a VectorFieldProvider."""
    return RemoteProvider(endpoint, timeout=timeout)


def serve_provider(provider: VectorFieldProvider, endpoint: str, dims: Dims, workers: int = 8):
    """Blocking serving loop (runs until the process is interrupted)."""
    host, port = _parse_endpoint(endpoint)
    server = ProviderServer(provider, dims, host=host, port=port, workers=workers)
    server.start()
    print(f"serving vector-field evaluations on {server.address}", flush=True)
    try:
        threading.Event().wait()
    finally:
        server.stop()
