"""MQTT 3.1.1 wire framing for the supported packet subset.

Encoding is bit-exact per the OASIS standard: fixed header with the
remaining-length varint, 16-bit length-prefixed UTF-8 strings, big-endian
packet ids. Only the packets the gateway needs exist here.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

from ..errors import DsmError


class ProtocolError(DsmError):
    pass


# Packet type codes (high nibble of the fixed-header first byte).
CONNECT = 1
CONNACK = 2
PUBLISH = 3
PUBACK = 4
SUBSCRIBE = 8
SUBACK = 9
UNSUBSCRIBE = 10
UNSUBACK = 11
PINGREQ = 12
PINGRESP = 13
DISCONNECT = 14

# CONNACK return codes
CONNACK_ACCEPTED = 0
CONNACK_REFUSED_ID = 2

# Publishes above this payload size are a protocol error for this broker.
MAX_PAYLOAD = 256 * 1024
MAX_REMAINING_LENGTH = 268_435_455


def encode_remaining_length(n: int) -> bytes:
    if not (0 <= n <= MAX_REMAINING_LENGTH):
        raise ProtocolError(f"remaining length {n} out of range")
    out = bytearray()
    while True:
        byte = n % 128
        n //= 128
        if n:
            out.append(byte | 0x80)
        else:
            out.append(byte)
            return bytes(out)


def decode_remaining_length(data: bytes, offset: int = 0):
    """Return (value, bytes consumed); raises on malformed varint."""
    multiplier = 1
    value = 0
    consumed = 0
    while True:
        if offset + consumed >= len(data):
            raise ProtocolError("truncated remaining length")
        byte = data[offset + consumed]
        consumed += 1
        value += (byte & 0x7F) * multiplier
        if not byte & 0x80:
            return value, consumed
        multiplier *= 128
        if consumed >= 4:
            raise ProtocolError("remaining length varint too long")


def _mqtt_string(s: str) -> bytes:
    raw = s.encode("utf-8")
    if len(raw) > 0xFFFF:
        raise ProtocolError("string too long")
    return struct.pack(">H", len(raw)) + raw


class _Reader:
    def __init__(self, body: bytes):
        self.body = body
        self.pos = 0

    def string(self) -> str:
        if self.pos + 2 > len(self.body):
            raise ProtocolError("truncated string length")
        (n,) = struct.unpack_from(">H", self.body, self.pos)
        self.pos += 2
        if self.pos + n > len(self.body):
            raise ProtocolError("truncated string")
        raw = self.body[self.pos : self.pos + n]
        self.pos += n
        try:
            return raw.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise ProtocolError("invalid UTF-8 string") from exc

    def u16(self) -> int:
        if self.pos + 2 > len(self.body):
            raise ProtocolError("truncated u16")
        (v,) = struct.unpack_from(">H", self.body, self.pos)
        self.pos += 2
        return v

    def u8(self) -> int:
        if self.pos + 1 > len(self.body):
            raise ProtocolError("truncated u8")
        v = self.body[self.pos]
        self.pos += 1
        return v

    def rest(self) -> bytes:
        out = self.body[self.pos :]
        self.pos = len(self.body)
        return out

    def done(self) -> bool:
        return self.pos == len(self.body)


@dataclass
class Connect:
    client_id: str
    keep_alive: int = 60
    clean_session: bool = True
    username: str | None = None
    password: str | None = None


@dataclass
class Connack:
    session_present: bool = False
    return_code: int = CONNACK_ACCEPTED


@dataclass
class Publish:
    topic: str
    payload: bytes
    qos: int = 0
    packet_id: int | None = None
    dup: bool = False
    retain: bool = False


@dataclass
class Puback:
    packet_id: int


@dataclass
class Subscribe:
    packet_id: int
    topics: list = field(default_factory=list)  # [(filter, qos)]


@dataclass
class Suback:
    packet_id: int
    return_codes: list = field(default_factory=list)


@dataclass
class Unsubscribe:
    packet_id: int
    topics: list = field(default_factory=list)


@dataclass
class Unsuback:
    packet_id: int


@dataclass
class Pingreq:
    pass


@dataclass
class Pingresp:
    pass


@dataclass
class Disconnect:
    pass


def encode(pkt) -> bytes:
    """Serialize one packet to wire bytes (fixed header + body)."""
    if isinstance(pkt, Connect):
        flags = 0x02 if pkt.clean_session else 0x00
        body = _mqtt_string("MQTT") + bytes([4])  # protocol level 4 = 3.1.1
        tail = _mqtt_string(pkt.client_id)
        if pkt.username is not None:
            flags |= 0x80
            tail += _mqtt_string(pkt.username)
            if pkt.password is not None:
                flags |= 0x40
                tail += _mqtt_string(pkt.password)
        body += bytes([flags]) + struct.pack(">H", pkt.keep_alive) + tail
        return _frame(CONNECT, 0, body)
    if isinstance(pkt, Connack):
        body = bytes([1 if pkt.session_present else 0, pkt.return_code])
        return _frame(CONNACK, 0, body)
    if isinstance(pkt, Publish):
        if pkt.qos not in (0, 1):
            raise ProtocolError(f"unsupported qos {pkt.qos}")
        flags = (0x08 if pkt.dup else 0) | (pkt.qos << 1) | (0x01 if pkt.retain else 0)
        body = _mqtt_string(pkt.topic)
        if pkt.qos > 0:
            if not pkt.packet_id:
                raise ProtocolError("qos>0 publish requires a packet id")
            body += struct.pack(">H", pkt.packet_id)
        body += pkt.payload
        return _frame(PUBLISH, flags, body)
    if isinstance(pkt, Puback):
        return _frame(PUBACK, 0, struct.pack(">H", pkt.packet_id))
    if isinstance(pkt, Subscribe):
        body = struct.pack(">H", pkt.packet_id)
        if not pkt.topics:
            raise ProtocolError("subscribe with no topics")
        for topic, qos in pkt.topics:
            body += _mqtt_string(topic) + bytes([qos])
        return _frame(SUBSCRIBE, 0x02, body)
    if isinstance(pkt, Suback):
        return _frame(SUBACK, 0, struct.pack(">H", pkt.packet_id) + bytes(pkt.return_codes))
    if isinstance(pkt, Unsubscribe):
        body = struct.pack(">H", pkt.packet_id)
        if not pkt.topics:
            raise ProtocolError("unsubscribe with no topics")
        for topic in pkt.topics:
            body += _mqtt_string(topic)
        return _frame(UNSUBSCRIBE, 0x02, body)
    if isinstance(pkt, Unsuback):
        return _frame(UNSUBACK, 0, struct.pack(">H", pkt.packet_id))
    if isinstance(pkt, Pingreq):
        return _frame(PINGREQ, 0, b"")
    if isinstance(pkt, Pingresp):
        return _frame(PINGRESP, 0, b"")
    if isinstance(pkt, Disconnect):
        return _frame(DISCONNECT, 0, b"")
    raise ProtocolError(f"cannot encode {type(pkt).__name__}")


def _frame(ptype: int, flags: int, body: bytes) -> bytes:
    return bytes([(ptype << 4) | flags]) + encode_remaining_length(len(body)) + body


def decode(first_byte: int, body: bytes):
    """Parse one packet from its first header byte and body bytes."""
    ptype = first_byte >> 4
    flags = first_byte & 0x0F
    r = _Reader(body)

    if ptype == CONNECT:
        proto = r.string()
        level = r.u8()
        if proto != "MQTT" or level != 4:
            raise ProtocolError(f"unsupported protocol {proto!r} level {level}")
        cflags = r.u8()
        keep_alive = r.u16()
        client_id = r.string()
        if cflags & 0x04:
            raise ProtocolError("will messages not supported")
        username = r.string() if cflags & 0x80 else None
        password = r.string() if cflags & 0x40 else None
        return Connect(client_id, keep_alive, bool(cflags & 0x02), username, password)
    if ptype == CONNACK:
        return Connack(bool(r.u8() & 0x01), r.u8())
    if ptype == PUBLISH:
        qos = (flags >> 1) & 0x03
        if qos not in (0, 1):
            raise ProtocolError(f"unsupported qos {qos}")
        topic = r.string()
        packet_id = r.u16() if qos > 0 else None
        payload = r.rest()
        if len(payload) > MAX_PAYLOAD:
            raise ProtocolError(f"payload exceeds {MAX_PAYLOAD} bytes")
        return Publish(topic, payload, qos, packet_id, bool(flags & 0x08), bool(flags & 0x01))
    if ptype == PUBACK:
        return Puback(r.u16())
    if ptype == SUBSCRIBE:
        if flags != 0x02:
            raise ProtocolError("subscribe flags must be 0b0010")
        packet_id = r.u16()
        topics = []
        while not r.done():
            topics.append((r.string(), r.u8()))
        if not topics:
            raise ProtocolError("subscribe with no topics")
        return Subscribe(packet_id, topics)
    if ptype == SUBACK:
        packet_id = r.u16()
        return Suback(packet_id, list(r.rest()))
    if ptype == UNSUBSCRIBE:
        if flags != 0x02:
            raise ProtocolError("unsubscribe flags must be 0b0010")
        packet_id = r.u16()
        topics = []
        while not r.done():
            topics.append(r.string())
        if not topics:
            raise ProtocolError("unsubscribe with no topics")
        return Unsubscribe(packet_id, topics)
    if ptype == UNSUBACK:
        return Unsuback(r.u16())
    if ptype == PINGREQ:
        return Pingreq()
    if ptype == PINGRESP:
        return Pingresp()
    if ptype == DISCONNECT:
        return Disconnect()
    raise ProtocolError(f"unsupported packet type {ptype}")


async def read_packet(reader):
    """Read one full packet from an asyncio stream; None on clean EOF."""
    try:
        first = await reader.readexactly(1)
    except (ConnectionError, EOFError):
        return None
    except Exception as exc:  # asyncio.IncompleteReadError subclasses EOFError on 3.10? keep broad
        if exc.__class__.__name__ == "IncompleteReadError":
            return None
        raise
    length = 0
    multiplier = 1
    for i in range(4):
        byte = (await reader.readexactly(1))[0]
        length += (byte & 0x7F) * multiplier
        if not byte & 0x80:
            break
        multiplier *= 128
    else:
        raise ProtocolError("remaining length varint too long")
    if length > MAX_PAYLOAD + 64 * 1024:
        raise ProtocolError("frame too large")
    body = await reader.readexactly(length) if length else b""
    return decode(first[0], body)
