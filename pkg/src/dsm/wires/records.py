"""The typed record flowing between dataflow stages."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

from ..core import Features, Hybrid, MeasurementMessage, Raw
from ..errors import InvariantViolation

# Series values (raw windows) are flattened into the values map under
# zero-padded keys so lexicographic order is sample order.
SERIES_PREFIX = "raw_"


@dataclass
class WireRecord:
    t_us: int
    source: tuple  # (node_id, channel)
    values: dict  # name -> float
    tags: dict = field(default_factory=dict)  # str -> str

    def __post_init__(self):
        if self.t_us <= 0:
            raise InvariantViolation("t_us", "must be positive")
        if not self.values:
            raise InvariantViolation("values", "must be nonempty")

    @property
    def channel(self) -> str:
        return self.source[1]

    def series(self) -> list:
        """Raw sample series carried by this record, in sample order."""
        keys = sorted(k for k in self.values if k.startswith(SERIES_PREFIX))
        return [self.values[k] for k in keys]

    def without_series(self) -> dict:
        return {k: v for k, v in self.values.items() if not k.startswith(SERIES_PREFIX)}

    def to_doc(self) -> dict:
        return {
            "t_us": self.t_us,
            "source": list(self.source),
            "values": {k: self.values[k] for k in sorted(self.values)},
            "tags": {k: self.tags[k] for k in sorted(self.tags)},
        }

    @classmethod
    def from_doc(cls, doc: dict) -> "WireRecord":
        return cls(
            t_us=doc["t_us"],
            source=tuple(doc["source"]),
            values=dict(doc["values"]),
            tags=dict(doc.get("tags", {})),
        )

    def dumps(self) -> str:
        return json.dumps(self.to_doc(), ensure_ascii=False, separators=(",", ":"), allow_nan=False)


def record_from_message(msg: MeasurementMessage) -> WireRecord:
    """Convert an envelope into a record.

    Raw windows become raw_### series entries (a single sample becomes
    "value"); feature maps pass through by name. Envelope metadata rides
    in the tags.
    """
    values: dict = {}
    payload = msg.payload
    if isinstance(payload, (Raw, Hybrid)):
        samples = payload.samples
        if len(samples) == 1:
            values["value"] = samples[0]
        else:
            width = len(str(len(samples) - 1))
            for i, s in enumerate(samples):
                values[f"{SERIES_PREFIX}{i:0{width}d}"] = s
    if isinstance(payload, Features):
        values.update(payload.values)
    elif isinstance(payload, Hybrid):
        values.update(payload.features)
    return WireRecord(
        t_us=msg.t_acq_us,
        source=(msg.node_id, msg.channel),
        values=values,
        tags={
            "mode": str(msg.mode),
            "unit": msg.unit,
            "fs_hz": repr(msg.fs_hz),
            "window_len": str(msg.window_len),
            "seq": str(msg.seq),
        },
    )
