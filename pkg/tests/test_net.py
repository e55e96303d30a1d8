import csv
import struct

import pytest
from hypothesis import given
from hypothesis import strategies as st

from chainbroker.net import (
    MAX_BODY,
    TRAFFIC_COLUMNS,
    Frame,
    FrameDecoder,
    FrameTooLarge,
    FrameType,
    TrafficMeter,
    TrailingData,
    Truncated,
    UnknownType,
    decode_frame,
    encode_frame,
    write_traffic_csv,
)

frames = st.builds(Frame, st.sampled_from(list(FrameType)), st.binary(max_size=2048))


@given(frames)
def test_round_trip(f):
    wire = encode_frame(f)
    assert wire[0] == int(f.type) and struct.unpack(">I", wire[1:5])[0] == len(f.body)
    assert decode_frame(wire) == f


def test_header_claiming_two_mib():
    with pytest.raises(FrameTooLarge):
        decode_frame(bytes([1]) + struct.pack(">I", 2 << 20))
    with pytest.raises(FrameTooLarge):
        encode_frame(Frame(FrameType.PUBLISH, bytes(MAX_BODY + 1)))
    assert decode_frame(encode_frame(Frame(FrameType.PUBLISH, bytes(MAX_BODY)))).body == bytes(MAX_BODY)


def test_unknown_type():
    with pytest.raises(UnknownType):
        decode_frame(b"\xff\x00\x00\x00\x00")
    with pytest.raises(UnknownType):
        decode_frame(b"\x00\x00\x00\x00\x00")


def test_truncated_and_trailing():
    wire = encode_frame(Frame(FrameType.VOTE, b"abcdef"))
    for cut in range(len(wire)):
        with pytest.raises(Truncated):
            decode_frame(wire[:cut])
    with pytest.raises(TrailingData):
        decode_frame(wire + b"x")


@given(st.binary(max_size=64))
def test_arbitrary_bytes_never_crash(data):
    try:
        f = decode_frame(data)
    except (Truncated, UnknownType, FrameTooLarge, TrailingData):
        return
    assert encode_frame(f) == data


@given(st.lists(frames, max_size=8), st.integers(min_value=1, max_value=50))
def test_stream_decoder_reassembles(fs, chunk):
    wire = b"".join(encode_frame(f) for f in fs)
    dec = FrameDecoder()
    out = []
    for i in range(0, len(wire), chunk):
        out.extend(dec.feed(wire[i : i + chunk]))
    assert out == fs


def test_frame_values():
    f = Frame.make(FrameType.PUBLISH, {"topic": "a", "payload": {"x": 1}})
    assert f.value() == {"topic": "a", "payload": {"x": 1}}
    assert f.size == 5 + len(f.body)


def test_meter_and_csv(tmp_path):
    m = TrafficMeter("n0")
    f = Frame(FrameType.VOTE, b"x" * 10)
    m.record_send(100, f, copies=4)
    m.record_receive(1500, f)
    m.record_commit(2500)
    assert m.bytes_sent == 4 * f.size and m.frames_sent["VOTE"] == 4
    rows = m.series(end_ms=3500)
    assert rows == [(1, 60, 0, 0), (2, 60, 15, 0), (3, 60, 15, 1), (4, 60, 15, 1)]
    path = tmp_path / "traffic.csv"
    write_traffic_csv(path, [m], 3500)
    with open(path) as fh:
        r = list(csv.reader(fh))
    assert r[0] == TRAFFIC_COLUMNS and r[-1] == ["4", "n0", "60", "15", "1"]
