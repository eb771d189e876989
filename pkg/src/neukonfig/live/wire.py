"""Binary framing for every socket in the harness.

Each frame is a fixed 26-byte header followed by the payload:

    magic      4 bytes  b"NKFG"
    version    1 byte
    kind       1 byte   (data / control-pause / control-resume / control-switch / control-plan)
    seq        8 bytes  big-endian unsigned
    send_ts_us 8 bytes  big-endian unsigned, sender's monotonic clock
    len        4 bytes  big-endian unsigned payload length

An empty data frame serves as a heartbeat on control channels.
"""

from __future__ import annotations

import json
import socket
import struct
from dataclasses import dataclass
from enum import IntEnum

MAGIC = b"NKFG"
VERSION = 1

_HEADER = struct.Struct(">4sBBQQI")
HEADER_SIZE = _HEADER.size

_U64_MAX = 2**64 - 1
_U32_MAX = 2**32 - 1


class WireError(ValueError):
    """Raised for malformed or out-of-range frames."""


class FrameKind(IntEnum):
    DATA = 0
    CONTROL_PAUSE = 1
    CONTROL_RESUME = 2
    CONTROL_SWITCH = 3
    CONTROL_PLAN = 4


@dataclass(frozen=True)
class WireFrame:
    kind: FrameKind
    seq: int = 0
    send_ts_us: int = 0
    payload: bytes = b""

    @property
    def is_heartbeat(self) -> bool:
        return self.kind is FrameKind.DATA and not self.payload

    def json(self) -> dict:
        try:
            doc = json.loads(self.payload.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise WireError(f"frame payload is not JSON: {exc}") from exc
        if not isinstance(doc, dict):
            raise WireError("frame payload is not a JSON object")
        return doc


def json_frame(kind: FrameKind, doc: dict, seq: int = 0, send_ts_us: int = 0) -> WireFrame:
    return WireFrame(
        kind=kind,
        seq=seq,
        send_ts_us=send_ts_us,
        payload=json.dumps(doc, separators=(",", ":")).encode("utf-8"),
    )


def encode(frame: WireFrame) -> bytes:
    if not 0 <= frame.seq <= _U64_MAX:
        raise WireError(f"seq {frame.seq} does not fit in 8 bytes")
    if not 0 <= frame.send_ts_us <= _U64_MAX:
        raise WireError(f"send_ts_us {frame.send_ts_us} does not fit in 8 bytes")
    if len(frame.payload) > _U32_MAX:
        raise WireError("payload too large")
    header = _HEADER.pack(
        MAGIC, VERSION, int(frame.kind), frame.seq, frame.send_ts_us, len(frame.payload)
    )
    return header + frame.payload


def decode(data: bytes) -> WireFrame:
    if len(data) < HEADER_SIZE:
        raise WireError(f"frame too short: {len(data)} bytes")
    magic, version, kind, seq, ts, length = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise WireError(f"bad magic {magic!r}")
    if version != VERSION:
        raise WireError(f"unsupported version {version}")
    try:
        frame_kind = FrameKind(kind)
    except ValueError:
        raise WireError(f"unknown frame kind {kind}") from None
    payload = data[HEADER_SIZE:]
    if len(payload) != length:
        raise WireError(f"payload length {len(payload)} does not match header {length}")
    return WireFrame(kind=frame_kind, seq=seq, send_ts_us=ts, payload=payload)


def _recv_exact(sock: socket.socket, n: int) -> bytes | None:
    """Read exactly n bytes; None on a clean EOF at a frame boundary."""
    chunks = []
    got = 0
    while got < n:
        try:
            chunk = sock.recv(n - got)
        except (ConnectionResetError, BrokenPipeError, OSError):
            chunk = b""
        if not chunk:
            if got == 0:
                return None
            raise WireError(f"connection closed mid-frame ({got}/{n} bytes)")
        chunks.append(chunk)
        got += len(chunk)
    return b"".join(chunks)


def read_frame(sock: socket.socket) -> WireFrame | None:
    """Read one frame; None when the peer closed the connection."""
    header = _recv_exact(sock, HEADER_SIZE)
    if header is None:
        return None
    magic, version, kind, seq, ts, length = _HEADER.unpack(header)
    if magic != MAGIC:
        raise WireError(f"bad magic {magic!r}")
    if version != VERSION:
        raise WireError(f"unsupported version {version}")
    try:
        frame_kind = FrameKind(kind)
    except ValueError:
        raise WireError(f"unknown frame kind {kind}") from None
    payload = b""
    if length:
        body = _recv_exact(sock, length)
        if body is None:
            raise WireError("connection closed before payload")
        payload = body
    return WireFrame(kind=frame_kind, seq=seq, send_ts_us=ts, payload=payload)


def write_frame(sock: socket.socket, frame: WireFrame) -> None:
    sock.sendall(encode(frame))
