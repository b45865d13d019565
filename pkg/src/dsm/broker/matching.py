"""Topic filter matching with MQTT 3.1.1 wildcard semantics.

`+` matches exactly one level; `#` (terminal only) matches all remaining
levels including the zero-level case at its parent.
"""

from __future__ import annotations

from dataclasses import dataclass

from ..errors import DsmError


class BadFilter(DsmError):
    pass


@dataclass(frozen=True)
class TopicFilter:
    segments: tuple

    @classmethod
    def parse(cls, text: str) -> "TopicFilter":
        if not text:
            raise BadFilter("empty filter")
        segments = tuple(text.split("/"))
        for i, seg in enumerate(segments):
            if not seg:
                raise BadFilter(f"empty segment at position {i}")
            if "#" in seg:
                if seg != "#":
                    raise BadFilter("'#' must be a whole segment")
                if i != len(segments) - 1:
                    raise BadFilter("'#' only allowed in the last segment")
            if "+" in seg and seg != "+":
                raise BadFilter("'+' must be a whole segment")
        return cls(segments)

    def render(self) -> str:
        return "/".join(self.segments)


def match_topic(filt: TopicFilter | str, topic: str) -> bool:
    """True when the filter matches the topic per MQTT 3.1.1 rules."""
    if isinstance(filt, str):
        filt = TopicFilter.parse(filt)
    fsegs = filt.segments
    tsegs = topic.split("/")

    i = 0
    while True:
        if i == len(fsegs):
            return i == len(tsegs)
        f = fsegs[i]
        if f == "#":
            return True  # matches the remaining levels, including none
        if i == len(tsegs):
            # topic exhausted: only a trailing '#' could still match
            return False
        if f != "+" and f != tsegs[i]:
            return False
        i += 1
