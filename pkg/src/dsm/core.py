"""Shared vocabulary of the measurement network.

Defines the measured quantities and their canonical units, the canonical
JSON envelope every node publishes, the topic grammar (the topic carries
the channel identity, so subscribing to a topic is subscribing to a
transducer), and the channel descriptor registry entries.

Encoding is canonical: fixed key order, no insignificant whitespace,
shortest round-trip number rendering, UTF-8. `decode(encode(m)) == m`
and re-encoding a decoded document reproduces the input bytes.
"""

from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass, field
from enum import Enum
from typing import Union

from .errors import BadToken, InvariantViolation, MalformedDocument, SchemaViolation

TOKEN_RE = re.compile(r"[a-z0-9_-]{1,32}")

# Channels scoped to the whole node (commands, sync) use this pseudo-channel.
NODE_CHANNEL = "_node"

INT64_MAX = 2**63 - 1


class QuantityKind(str, Enum):
    ACCELERATION = "acceleration"
    TEMPERATURE = "temperature"
    HUMIDITY = "humidity"
    PRESSURE = "pressure"
    AIR_SPEED = "air_speed"
    ROTATIONAL_SPEED = "rotational_speed"
    DIMENSIONLESS = "dimensionless"


CANONICAL_UNITS = {
    QuantityKind.ACCELERATION: "m/s²",
    QuantityKind.TEMPERATURE: "°C",
    QuantityKind.HUMIDITY: "%RH",
    QuantityKind.PRESSURE: "hPa",
    QuantityKind.AIR_SPEED: "m/s",
    QuantityKind.ROTATIONAL_SPEED: "rpm",
    QuantityKind.DIMENSIONLESS: "1",
}

UNIT_TO_KIND = {unit: kind for kind, unit in CANONICAL_UNITS.items()}


@dataclass(frozen=True)
class Quantity:
    """A physical quantity kind with its single canonical unit."""

    kind: QuantityKind
    unit: str

    def __post_init__(self):
        if CANONICAL_UNITS.get(self.kind) != self.unit:
            raise InvariantViolation("unit", f"{self.unit!r} is not canonical for {self.kind.value}")

    @classmethod
    def of(cls, kind: QuantityKind | str) -> "Quantity":
        kind = QuantityKind(kind)
        return cls(kind, CANONICAL_UNITS[kind])


# --------------------------------------------------------------------------
# Payloads and the message envelope
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class Raw:
    samples: tuple

    def __init__(self, samples):
        object.__setattr__(self, "samples", tuple(float(s) for s in samples))


@dataclass(frozen=True)
class Features:
    values: dict

    def __init__(self, values):
        object.__setattr__(self, "values", {str(k): float(v) for k, v in dict(values).items()})


@dataclass(frozen=True)
class Hybrid:
    samples: tuple
    features: dict

    def __init__(self, samples, features):
        object.__setattr__(self, "samples", tuple(float(s) for s in samples))
        object.__setattr__(self, "features", {str(k): float(v) for k, v in dict(features).items()})


Payload = Union[Raw, Features, Hybrid]

MODE_RAW = 1
MODE_FEATURES = 2
MODE_HYBRID = 3

_MODE_PAYLOAD = {MODE_RAW: Raw, MODE_FEATURES: Features, MODE_HYBRID: Hybrid}

# Canonical envelope key order. Changing this breaks the wire format.
ENVELOPE_KEYS = ("node_id", "channel", "seq", "t_acq_us", "mode", "unit", "fs_hz", "window_len", "payload")


@dataclass(frozen=True)
class MeasurementMessage:
    """One timestamped envelope for one channel window."""

    node_id: str
    channel: str
    seq: int
    t_acq_us: int
    mode: int
    unit: str
    fs_hz: float
    window_len: int
    payload: Payload


def _is_int(x) -> bool:
    return type(x) is int


def _finite(x) -> bool:
    return isinstance(x, (int, float)) and not isinstance(x, bool) and math.isfinite(x)


def validate_message(msg: MeasurementMessage) -> None:
    """Raise InvariantViolation on the first violated envelope invariant."""
    if not TOKEN_RE.fullmatch(msg.node_id or ""):
        raise InvariantViolation("node_id", repr(msg.node_id))
    if not TOKEN_RE.fullmatch(msg.channel or ""):
        raise InvariantViolation("channel", repr(msg.channel))
    if not _is_int(msg.seq) or msg.seq < 0:
        raise InvariantViolation("seq", "must be a non-negative integer")
    if not _is_int(msg.t_acq_us) or not (0 < msg.t_acq_us <= INT64_MAX):
        raise InvariantViolation("t_acq_us", "must be a positive int64 microsecond timestamp")
    if msg.mode not in _MODE_PAYLOAD:
        raise InvariantViolation("mode", f"unknown mode {msg.mode!r}")
    if msg.unit not in UNIT_TO_KIND:
        raise InvariantViolation("unit", f"unknown unit {msg.unit!r}")
    if not _finite(msg.fs_hz) or msg.fs_hz <= 0:
        raise InvariantViolation("fs_hz", "must be a positive finite number")
    if not _is_int(msg.window_len) or msg.window_len < 1:
        raise InvariantViolation("window_len", "must be >= 1")
    if not isinstance(msg.payload, _MODE_PAYLOAD[msg.mode]):
        raise InvariantViolation("mode", f"mode {msg.mode} requires {_MODE_PAYLOAD[msg.mode].__name__} payload")

    if isinstance(msg.payload, (Raw, Hybrid)):
        samples = msg.payload.samples
        if len(samples) == 0:
            # window_len >= 1 but the payload summarizes zero samples
            raise InvariantViolation("window_len", "raw payload is empty")
        if msg.mode == MODE_RAW and len(samples) != msg.window_len:
            raise InvariantViolation("window_len", f"{len(samples)} raw samples != window_len {msg.window_len}")
        if msg.mode == MODE_HYBRID and msg.window_len % len(samples) != 0:
            raise InvariantViolation("window_len", "decimated sample count must divide window_len")
        for s in samples:
            if not _finite(s):
                raise InvariantViolation("payload", f"non-finite sample {s!r}")
    if isinstance(msg.payload, (Features, Hybrid)):
        feats = msg.payload.values if isinstance(msg.payload, Features) else msg.payload.features
        if len(feats) == 0:
            raise InvariantViolation("payload", "features map is empty")
        for name, value in feats.items():
            if not name:
                raise InvariantViolation("payload", "empty feature name")
            if not _finite(value):
                raise InvariantViolation("payload", f"non-finite feature {name!r}")


def _payload_doc(payload: Payload) -> dict:
    if isinstance(payload, Raw):
        return {"raw": list(payload.samples)}
    if isinstance(payload, Features):
        return {"features": {k: payload.values[k] for k in sorted(payload.values)}}
    return {
        "raw": list(payload.samples),
        "features": {k: payload.features[k] for k in sorted(payload.features)},
    }


def encode_message(msg: MeasurementMessage) -> bytes:
    """Serialize to canonical JSON bytes (fixed key order, shortest floats)."""
    validate_message(msg)
    doc = {
        "node_id": msg.node_id,
        "channel": msg.channel,
        "seq": msg.seq,
        "t_acq_us": msg.t_acq_us,
        "mode": msg.mode,
        "unit": msg.unit,
        "fs_hz": float(msg.fs_hz),
        "window_len": msg.window_len,
        "payload": _payload_doc(msg.payload),
    }
    return json.dumps(doc, ensure_ascii=False, separators=(",", ":"), allow_nan=False).encode("utf-8")


def _require_number(doc: dict, key: str, path: str) -> float:
    v = doc[key]
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise SchemaViolation(path, "expected a number")
    return float(v)


def decode_message(data: bytes | str) -> MeasurementMessage:
    """Parse and validate canonical envelope bytes. Strict: unknown keys rejected."""
    try:
        if isinstance(data, (bytes, bytearray)):
            data = data.decode("utf-8")
        doc = json.loads(data)
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise MalformedDocument(str(exc)) from exc
    if not isinstance(doc, dict):
        raise SchemaViolation("", "document must be a JSON object")

    for key in ENVELOPE_KEYS:
        if key not in doc:
            raise SchemaViolation(key, "missing required key")
    for key in doc:
        if key not in ENVELOPE_KEYS:
            raise SchemaViolation(key, "unknown key")

    for key in ("node_id", "channel", "unit"):
        if not isinstance(doc[key], str):
            raise SchemaViolation(key, "expected a string")
    for key in ("seq", "t_acq_us", "mode", "window_len"):
        if not _is_int(doc[key]):
            raise SchemaViolation(key, "expected an integer")
    _require_number(doc, "fs_hz", "fs_hz")

    pd = doc["payload"]
    if not isinstance(pd, dict):
        raise SchemaViolation("payload", "expected an object")
    for key in pd:
        if key not in ("raw", "features"):
            raise SchemaViolation(f"payload.{key}", "unknown key")

    raw = pd.get("raw")
    features = pd.get("features")
    if raw is not None:
        if not isinstance(raw, list):
            raise SchemaViolation("payload.raw", "expected an array")
        for i, s in enumerate(raw):
            if isinstance(s, bool) or not isinstance(s, (int, float)):
                raise SchemaViolation(f"payload.raw[{i}]", "expected a number")
    if features is not None:
        if not isinstance(features, dict):
            raise SchemaViolation("payload.features", "expected an object")
        for name, value in features.items():
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                raise SchemaViolation(f"payload.features.{name}", "expected a number")

    if raw is not None and features is not None:
        payload: Payload = Hybrid(raw, features)
    elif raw is not None:
        payload = Raw(raw)
    elif features is not None:
        payload = Features(features)
    else:
        raise SchemaViolation("payload", "must contain 'raw' and/or 'features'")

    msg = MeasurementMessage(
        node_id=doc["node_id"],
        channel=doc["channel"],
        seq=doc["seq"],
        t_acq_us=doc["t_acq_us"],
        mode=doc["mode"],
        unit=doc["unit"],
        fs_hz=float(doc["fs_hz"]),
        window_len=doc["window_len"],
        payload=payload,
    )
    validate_message(msg)
    return msg


# --------------------------------------------------------------------------
# Topic grammar: dsm/v1/<site>/<node_id>/<channel>/<kind>
# --------------------------------------------------------------------------

class TopicKind(str, Enum):
    RAW = "raw"
    FEATURES = "features"
    EVENTS = "events"
    CMD = "cmd"
    SYNC = "sync"


# kinds whose channel segment is the node-scoped pseudo-channel
_NODE_SCOPED_KINDS = (TopicKind.CMD, TopicKind.SYNC)

TOPIC_PREFIX = "dsm"
TOPIC_VERSION = "v1"


@dataclass(frozen=True)
class TopicPath:
    site: str
    node_id: str
    channel: str
    kind: TopicKind


def build_topic(site: str, node_id: str, channel: str, kind: TopicKind | str) -> TopicPath:
    try:
        kind = TopicKind(kind)
    except ValueError:
        raise BadToken("kind", repr(kind)) from None
    for position, token in (("site", site), ("node_id", node_id), ("channel", channel)):
        if not isinstance(token, str) or not TOKEN_RE.fullmatch(token):
            raise BadToken(position, repr(token))
    if kind in _NODE_SCOPED_KINDS and channel != NODE_CHANNEL:
        raise BadToken("channel", f"kind={kind.value} requires channel {NODE_CHANNEL!r}")
    return TopicPath(site, node_id, channel, kind)


def render_topic(topic: TopicPath) -> str:
    return f"{TOPIC_PREFIX}/{TOPIC_VERSION}/{topic.site}/{topic.node_id}/{topic.channel}/{topic.kind.value}"


def parse_topic(s: str) -> TopicPath:
    parts = s.split("/")
    if len(parts) != 6:
        raise BadToken("path", f"expected 6 segments, got {len(parts)}")
    prefix, version, site, node_id, channel, kind = parts
    if prefix != TOPIC_PREFIX:
        raise BadToken("prefix", repr(prefix))
    if version != TOPIC_VERSION:
        raise BadToken("version", repr(version))
    return build_topic(site, node_id, channel, kind)


# Convenience used by nodes and the gateway.
def node_topic(site: str, node_id: str, kind: TopicKind | str) -> str:
    return render_topic(build_topic(site, node_id, NODE_CHANNEL, kind))


def channel_topic(site: str, node_id: str, channel: str, kind: TopicKind | str) -> str:
    return render_topic(build_topic(site, node_id, channel, kind))


# --------------------------------------------------------------------------
# Channel descriptors (the registry entry standing in for sensor metadata)
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class ChannelDescriptor:
    """Registered metadata for one published channel."""

    topic: TopicPath
    quantity: Quantity
    range_min: float
    range_max: float
    fs_hz: float
    window: int
    mode: int
    sensor_model: str = ""
    location: str = ""


def validate_descriptor(d: ChannelDescriptor) -> list:
    """Return every violated descriptor invariant (empty list means ok)."""
    violations = []
    if not (d.range_min < d.range_max):
        violations.append("RangeEmpty")
    if d.window < 1:
        violations.append("WindowZero")
    if d.mode not in _MODE_PAYLOAD:
        violations.append("BadMode")
    if not _finite(d.fs_hz) or d.fs_hz <= 0:
        violations.append("BadRate")
    elif d.window >= 1:
        # publish period = window / fs_hz must land on an integral microsecond
        period_us = d.window * 1_000_000 / d.fs_hz
        if abs(period_us - round(period_us)) > 1e-6:
            violations.append("NonIntegralPeriod")
    return violations


class SeqMonitor:
    """Checks per-(node, channel) sequence monotonicity on a message stream."""

    def __init__(self):
        self._last: dict = {}

    def observe(self, msg: MeasurementMessage) -> bool:
        """Record a message; return True when seq strictly increased."""
        key = (msg.node_id, msg.channel)
        last = self._last.get(key)
        ok = last is None or msg.seq > last
        if last is None or msg.seq > last:
            self._last[key] = msg.seq
        return ok
