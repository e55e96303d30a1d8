"""Length-prefixed frames and per-node traffic accounting.

Wire layout: 1-byte type | 4-byte big-endian body length | body, where the
body is canonically encoded and at most 1 MiB.
"""

from __future__ import annotations

import csv
import enum
import struct
from collections import Counter, defaultdict
from dataclasses import dataclass

from .encoding import canonical_deserialize, canonical_serialize

MAX_BODY = 1 << 20
HEADER = struct.Struct(">BI")


class FrameError(ValueError):
    pass


class FrameTooLarge(FrameError):
    pass


class Truncated(FrameError):
    pass


class UnknownType(FrameError):
    pass


class TrailingData(FrameError):
    pass


class FrameType(enum.IntEnum):
    PUBLISH = 1
    SUBSCRIBE = 2
    UNSUBSCRIBE = 3
    ACK = 4
    DELIVER = 5
    PROPOSAL = 6
    VOTE = 7
    TX_GOSSIP = 8
    QUERY_HEIGHT = 9
    QUERY_BLOCK = 10
    QUERY_RESP = 11
    ERROR = 12


_TYPES = {t.value: t for t in FrameType}


@dataclass(frozen=True)
class Frame:
    type: FrameType
    body: bytes

    @classmethod
    def make(cls, type_: FrameType, value) -> Frame:
        return cls(FrameType(type_), canonical_serialize(value))

    def value(self):
        return canonical_deserialize(self.body)

    @property
    def size(self) -> int:
        return HEADER.size + len(self.body)


def encode_frame(frame: Frame) -> bytes:
    if len(frame.body) > MAX_BODY:
        raise FrameTooLarge(f"body of {len(frame.body)} bytes exceeds {MAX_BODY}")
    return HEADER.pack(int(frame.type), len(frame.body)) + frame.body


def read_frame(buf, offset: int = 0):
    """Parse one frame starting at ``offset``.

    Returns ``(frame, next_offset)``, or ``(None, offset)`` when the buffer
    does not yet hold a complete frame.
    """
    if len(buf) - offset < HEADER.size:
        return None, offset
    type_byte, length = HEADER.unpack_from(buf, offset)
    if type_byte not in _TYPES:
        raise UnknownType(f"unknown frame type 0x{type_byte:02x}")
    if length > MAX_BODY:
        raise FrameTooLarge(f"declared body of {length} bytes exceeds {MAX_BODY}")
    end = offset + HEADER.size + length
    if len(buf) < end:
        return None, offset
    return Frame(_TYPES[type_byte], bytes(buf[offset + HEADER.size : end])), end


def decode_frame(data: bytes) -> Frame:
    """Decode exactly one frame; anything else raises a FrameError."""
    frame, end = read_frame(data, 0)
    if frame is None:
        raise Truncated(f"{len(data)} bytes do not hold a complete frame")
    if end != len(data):
        raise TrailingData(f"{len(data) - end} bytes after frame")
    return frame


class FrameDecoder:
    """Incremental decoder for a byte stream."""

    def __init__(self):
        self._buf = bytearray()

    def feed(self, data: bytes) -> list:
        self._buf.extend(data)
        frames, pos = [], 0
        while True:
            frame, pos2 = read_frame(self._buf, pos)
            if frame is None:
                break
            frames.append(frame)
            pos = pos2
        del self._buf[:pos]
        return frames


class TrafficMeter:
    """Monotone byte and frame counters with a 1 s resolution history."""

    def __init__(self, node_id: str):
        self.node_id = node_id
        self.bytes_sent = 0
        self.bytes_received = 0
        self.blocks_committed = 0
        self.frames_sent: Counter = Counter()
        self.frames_received: Counter = Counter()
        self._buckets: dict[int, list] = defaultdict(lambda: [0, 0, 0])

    def record_send(self, t_ms: float, frame: Frame, copies: int = 1):
        n = frame.size * copies
        self.bytes_sent += n
        self.frames_sent[frame.type.name] += copies
        self._buckets[int(t_ms // 1000)][0] += n

    def record_receive(self, t_ms: float, frame: Frame):
        self.bytes_received += frame.size
        self.frames_received[frame.type.name] += 1
        self._buckets[int(t_ms // 1000)][1] += frame.size

    def record_commit(self, t_ms: float):
        self.blocks_committed += 1
        self._buckets[int(t_ms // 1000)][2] += 1

    def series(self, end_ms: float | None = None) -> list:
        """Cumulative (t_seconds, bytes_sent, bytes_received, blocks_committed) per second."""
        last = max(self._buckets, default=0)
        if end_ms is not None:
            last = max(last, int(end_ms // 1000))
        rows, sent, recv, blocks = [], 0, 0, 0
        for sec in range(last + 1):
            b = self._buckets.get(sec)
            if b is not None:
                sent, recv, blocks = sent + b[0], recv + b[1], blocks + b[2]
            rows.append((sec + 1, sent, recv, blocks))
        return rows


TRAFFIC_COLUMNS = ["t_seconds", "node_id", "bytes_sent", "bytes_received", "blocks_committed"]


def write_traffic_csv(path, meters, end_ms: float | None = None):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(TRAFFIC_COLUMNS)
        for m in meters:
            for t, sent, recv, blocks in m.series(end_ms):
                w.writerow([t, m.node_id, sent, recv, blocks])
