"""Stage implementations for the dataflow engine.

Each stage consumes records from its input port(s) and emits records on
its output port(s). Single-input stages are driven by the runtime; the
join stage pulls its own inputs so merging depends only on record
timestamps (event time), never on arrival interleaving — that keeps
replays deterministic.
"""

from __future__ import annotations

import json
import logging
import math

from .. import dsp, quality, sim
from ..core import decode_message
from ..errors import DsmError
from .records import SERIES_PREFIX, WireRecord

log = logging.getLogger(__name__)

END = object()  # end-of-stream sentinel flowing through edges


class StartupFailure(DsmError):
    def __init__(self, stage_id, reason):
        self.stage_id = stage_id
        self.reason = reason
        super().__init__(f"stage '{stage_id}' failed to start: {reason}")


class Stage:
    """Base: override process() (single input) and optionally flush()/open()."""

    def __init__(self, stage_id: str, params: dict, ctx):
        self.id = stage_id
        self.params = params
        self.ctx = ctx
        self.counters = {"consumed": 0, "emitted": 0, "dropped": 0, "dead_lettered": 0}

    async def open(self):
        pass

    async def process(self, port: str, record: WireRecord):
        raise NotImplementedError

    async def flush(self):
        return []

    async def close(self):
        pass


class SubscriberStage(Stage):
    """Bridges a broker subscription into the graph. Non-envelope documents
    on matching topics (acks, event markers) are skipped with a counter."""

    def __init__(self, stage_id, params, ctx):
        super().__init__(stage_id, params, ctx)
        self.counters["skipped"] = 0
        self.subscription = None

    async def open(self):
        self.subscription = self.ctx.broker.subscribe_local(self.params["filter"], qos=1)

    def decode(self, topic: str, payload: bytes):
        try:
            msg = decode_message(payload)
        except DsmError:
            self.counters["skipped"] += 1
            return None
        from .records import record_from_message

        record = record_from_message(msg)
        record.tags["topic"] = topic
        return record

    async def process(self, port, record):
        self.counters["consumed"] += 1
        self.counters["emitted"] += 1
        return [("out", record)]

    async def close(self):
        if self.subscription is not None:
            self.ctx.broker.unsubscribe_local(self.subscription)


class WindowStage(Stage):
    """Regroups sample series across records into fixed windows per source."""

    def __init__(self, stage_id, params, ctx):
        super().__init__(stage_id, params, ctx)
        self.size = int(params["size"])
        self.hop = int(params["hop"])
        self.buffers = {}  # source -> list[(t_us, value)]

    async def process(self, port, record):
        self.counters["consumed"] += 1
        series = record.series()
        if not series and "value" in record.values:
            series = [record.values["value"]]
        if not series:
            self.counters["dropped"] += 1
            return []
        fs = float(record.tags.get("fs_hz", "0") or 0)
        n_in = int(record.tags.get("window_len", len(series)))
        fs_eff = fs * len(series) / n_in if fs and n_in else 0.0
        buf = self.buffers.setdefault(record.source, [])
        step_us = int(round(1e6 / fs_eff)) if fs_eff else 0
        for i, v in enumerate(series):
            buf.append((record.t_us + i * step_us, v, record.tags))
        out = []
        while len(buf) >= self.size:
            chunk = buf[: self.size]
            del buf[: self.hop]
            width = len(str(self.size - 1))
            values = {f"{SERIES_PREFIX}{i:0{width}d}": v for i, (_, v, _) in enumerate(chunk)}
            tags = dict(chunk[0][2])
            tags["window_len"] = str(self.size)
            tags["fs_hz"] = repr(fs_eff)
            out.append(("out", WireRecord(chunk[0][0], record.source, values, tags)))
            self.counters["emitted"] += 1
        return out


class FeatureStage(Stage):
    """Computes missing named features from a record's raw series.

    Records without a series pass through unchanged; node-computed feature
    values are kept (only absent names are filled in). The series is
    stripped from the output.
    """

    def __init__(self, stage_id, params, ctx):
        super().__init__(stage_id, params, ctx)
        self.names = list(params["names"])
        self.strip_series = bool(params.get("strip_series", True))

    async def process(self, port, record):
        self.counters["consumed"] += 1
        series = record.series()
        values = record.without_series() if self.strip_series else dict(record.values)
        if series and len(series) >= 2:
            missing = [n for n in self.names if n not in values]
            if missing:
                feats = dsp.window_features(series)
                if dsp.DOM_FREQ in missing and len(series) >= dsp.MIN_DFT_WINDOW:
                    fs = float(record.tags.get("fs_hz", "0") or 0)
                    n_in = int(record.tags.get("window_len", len(series)))
                    fs_eff = fs * len(series) / n_in if fs and n_in else 0.0
                    if fs_eff > 0:
                        try:
                            feats[dsp.DOM_FREQ] = dsp.dominant_frequency(series, fs_eff)
                        except dsp.AllZeroSignal:
                            pass
                for name in missing:
                    if name in feats:
                        values[name] = feats[name]
        if not values:
            self.counters["dropped"] += 1
            return []
        self.counters["emitted"] += 1
        return [("out", WireRecord(record.t_us, record.source, values, dict(record.tags)))]


class _JoinInput:
    def __init__(self, name: str, latch: bool, max_age_us: int):
        self.name = name
        self.latch = latch
        self.max_age_us = max_age_us
        self.buffer: list = []  # pending records (consume) or candidates (latch)
        self.held = None  # latch: latest applicable record
        self.held_used = False
        self.progress = -1  # latest t_us seen; math.inf once closed
        self.closed = False


class JoinStage(Stage):
    """Event-time alignment of N input streams.

    Consume inputs pair 1:1 per merge; latch inputs hold their latest
    record (sample-and-hold) and may serve many merges. A merge fires for
    the earliest pending consume head once every input's progress passes
    head.t + tolerance (the candidate set is then final). Heads that still
    lack a partner once progress passes head.t + 2*tolerance are dropped
    and counted. Records that aged out having joined at least one merge
    are retired silently.
    """

    def __init__(self, stage_id, params, ctx):
        super().__init__(stage_id, params, ctx)
        self.tolerance_us = int(params["tolerance_us"])
        latch_set = set(params.get("latch", []))
        max_age = int(params.get("latch_max_age_us", 4 * self.tolerance_us))
        self.inputs = {}
        for name in params["inputs"]:
            self.inputs[str(name)] = _JoinInput(str(name), str(name) in latch_set, max_age)
        self.counters["members"] = 0  # unique input records used in >= 1 merge
        self.counters["member_uses"] = 0
        self.dirty = False  # offers pending a ready() pass (runtime bookkeeping)

    # -- called by the runtime's join driver ---------------------------------

    def offer(self, port: str, record) -> None:
        inp = self.inputs[port]
        self.dirty = True
        if record is END:
            inp.closed = True
            inp.progress = math.inf
            return
        inp.progress = max(inp.progress, record.t_us)
        self.counters["consumed"] += 1
        if inp.latch:
            inp.buffer.append([record, False])  # [record, used]
        else:
            inp.buffer.append([record, False])

    def next_read(self):
        """Which port to read next: the open input with the lowest progress."""
        best = None
        for inp in self.inputs.values():
            if inp.closed:
                continue
            if best is None or inp.progress < best.progress or (
                inp.progress == best.progress and inp.name < best.name
            ):
                best = inp
        return best.name if best else None

    def ready(self):
        """Emit every decidable merge/drop; return list of ('out', record)."""
        out = []
        while True:
            trigger_input = None
            for inp in self.inputs.values():
                if inp.latch or not inp.buffer:
                    continue
                head_t = inp.buffer[0][0].t_us
                if trigger_input is None or head_t < trigger_input.buffer[0][0].t_us or (
                    head_t == trigger_input.buffer[0][0].t_us and inp.name < trigger_input.name
                ):
                    trigger_input = inp
            if trigger_input is None:
                return out
            head = trigger_input.buffer[0][0]
            decision_at = head.t_us + self.tolerance_us
            drop_at = head.t_us + 2 * self.tolerance_us
            min_progress = min(i.progress for i in self.inputs.values() if i is not trigger_input) if len(self.inputs) > 1 else math.inf

            if min_progress >= decision_at or all(i.closed for i in self.inputs.values()):
                members = self._collect_members(head, trigger_input)
                if members is not None:
                    out.append(("out", self._merge(members)))
                    self.counters["emitted"] += 1
                    continue
            if min_progress >= drop_at or all(i.closed for i in self.inputs.values()):
                entry = trigger_input.buffer.pop(0)
                if not entry[1]:
                    self.counters["dropped"] += 1
                self._expire(head.t_us)
                continue
            return out

    def _collect_members(self, head, trigger_input):
        """Member entry per input for a merge at head.t, or None if incomplete."""
        members = []
        for inp in self.inputs.values():
            if inp is trigger_input:
                members.append((inp, inp.buffer[0]))
                continue
            if inp.latch:
                # sample-and-hold: the latest record at or before the trigger
                candidate = None
                for entry in inp.buffer:
                    if entry[0].t_us <= head.t_us:
                        if candidate is None or entry[0].t_us >= candidate[0].t_us:
                            candidate = entry
                if candidate is None or head.t_us - candidate[0].t_us > inp.max_age_us:
                    return None
                members.append((inp, candidate))
            else:
                candidate = None
                for entry in inp.buffer:
                    if abs(entry[0].t_us - head.t_us) <= self.tolerance_us:
                        candidate = entry
                        break
                if candidate is None:
                    return None
                members.append((inp, candidate))
        # consume the 1:1 members; mark latch members used
        for inp, entry in members:
            if not entry[1]:
                entry[1] = True
                self.counters["members"] += 1
            self.counters["member_uses"] += 1
            if not inp.latch:
                inp.buffer.remove(entry)
        self._expire(head.t_us)
        return members

    def _expire(self, now_t_us: int) -> None:
        """Retire superseded latch candidates (keep the newest applicable one)."""
        for inp in self.inputs.values():
            if not inp.latch:
                continue
            past = [e for e in inp.buffer if e[0].t_us <= now_t_us]
            future = [e for e in inp.buffer if e[0].t_us > now_t_us]
            if not past:
                continue
            newest = max(past, key=lambda e: e[0].t_us)
            for entry in past:
                if entry is not newest and not entry[1]:
                    self.counters["dropped"] += 1
            inp.buffer = [newest] + future

    def _merge(self, members) -> WireRecord:
        consume_ts = [e[0].t_us for inp, e in members if not inp.latch]
        t_us = int(sum(consume_ts) / len(consume_ts)) if consume_ts else members[0][1][0].t_us
        values = {}
        tags = {}
        for inp, entry in sorted(members, key=lambda m: m[0].name):
            record = entry[0]
            prefix = record.channel
            for name, value in record.values.items():
                values[f"{prefix}.{name}"] = value
            for key, val in record.tags.items():
                tags.setdefault(f"{prefix}.{key}", val)
        node_ids = sorted({e[0].source[0] for _, e in members})
        return WireRecord(t_us, (",".join(node_ids), "joined"), values, tags)

    async def flush(self):
        for inp in self.inputs.values():
            inp.closed = True
            inp.progress = math.inf
        out = self.ready()
        # remaining unused records never found a partner
        for inp in self.inputs.values():
            for entry in inp.buffer:
                if not entry[1]:
                    self.counters["dropped"] += 1
            inp.buffer.clear()
        return out


class ScoreStage(Stage):
    """Applies the quality model; dead-letters records missing features."""

    def __init__(self, stage_id, params, ctx):
        super().__init__(stage_id, params, ctx)
        self.model_path = params["model_path"]
        self.model = None
        self.recommend_cfg = params.get("recommend")

    async def open(self):
        path = self.ctx.resolve(self.model_path) if self.ctx else self.model_path
        try:
            self.model = quality.load_model(path)
        except quality.InvalidModelFile as exc:
            raise StartupFailure(self.id, str(exc)) from exc

    def reload_model(self, path=None) -> str:
        """Validate-then-swap; on failure the active model is kept."""
        try:
            new_model = quality.load_model(path or self.model_path)
        except quality.InvalidModelFile as exc:
            log.warning("model reload rejected: %s", exc)
            raise
        self.model = new_model
        return new_model.version

    async def process(self, port, record):
        self.counters["consumed"] += 1
        model = self.model  # one model version per record
        try:
            risk = quality.predict_risk(model, record.values)
        except quality.MissingFeature as exc:
            self.counters["dead_lettered"] += 1
            record.tags["dead_letter_reason"] = f"MissingFeature:{exc.name}"
            return [("dead", record)]
        values = dict(record.values)
        values["risk"] = risk
        values["risk_alarm"] = 1.0 if risk >= model.threshold else 0.0
        tags = dict(record.tags)
        tags["model_version"] = model.version
        if self.recommend_cfg and (values["risk_alarm"] or self.recommend_cfg.get("when") == "always"):
            self._recommend(values, tags)
        self.counters["emitted"] += 1
        return [("out", WireRecord(record.t_us, record.source, values, tags))]

    def _recommend(self, values, tags):
        cfg = self.recommend_cfg
        scenario = sim.ScenarioConfig.from_doc(cfg["scenario"]) if "scenario" in cfg else sim.ScenarioConfig()
        grid = [(r, f) for r in cfg["rpm_candidates"] for f in cfg["feed_candidates"]]
        predictor = lambda context, rpm, feed: sim.surrogate_features(scenario, context, rpm, feed)
        (rpm, feed), predicted = quality.recommend_parameters(self.model, values, grid, predictor)
        values["rec_spindle_rpm"] = float(rpm)
        values["rec_feed_mm_s"] = float(feed)
        values["rec_risk"] = predicted


class ThresholdStage(Stage):
    """Appends `<field>_alarm` = 1.0/0.0 depending on the level test."""

    def __init__(self, stage_id, params, ctx):
        super().__init__(stage_id, params, ctx)
        self.field = params["field"]
        self.level = float(params["level"])

    async def process(self, port, record):
        self.counters["consumed"] += 1
        values = dict(record.values)
        if self.field in values:
            values[f"{self.field}_alarm"] = 1.0 if values[self.field] >= self.level else 0.0
        self.counters["emitted"] += 1
        return [("out", WireRecord(record.t_us, record.source, values, dict(record.tags)))]


class EmitterStage(Stage):
    """Terminal stage pushing records to the cloud uplink, the HMI hub,
    or back onto a broker topic."""

    def __init__(self, stage_id, params, ctx):
        super().__init__(stage_id, params, ctx)
        self.target = params["target"]
        self.role = params.get("role", "features")
        self.topic = params.get("topic")
        self.payload_kind = params.get("payload", "record")

    async def open(self):
        if self.target == "cloud" and self.ctx.uplink is None:
            raise StartupFailure(self.id, "no cloud uplink configured")
        if self.target == "hmi" and self.ctx.hmi is None:
            raise StartupFailure(self.id, "no hmi hub configured")
        if self.target == "topic" and not self.topic:
            raise StartupFailure(self.id, "target=topic requires a 'topic' param")

    async def process(self, port, record):
        self.counters["consumed"] += 1
        if self.target == "cloud":
            doc = record.to_doc()
            doc["role"] = self.role
            await self.ctx.uplink.enqueue(doc)
        elif self.target == "hmi":
            await self.ctx.hmi.handle_record(record)
        elif self.target == "topic":
            payload = self._topic_payload(record)
            if payload is None:
                self.counters["dropped"] += 1
                return []
            await self.ctx.broker.publish_local(self.topic, payload, qos=1)
        self.counters["emitted"] += 1
        return []

    def _topic_payload(self, record):
        if self.payload_kind == "recommendation_cmd":
            # auto-apply gate: only alarmed records carrying a recommendation
            if not record.values.get("risk_alarm") or "rec_feed_mm_s" not in record.values:
                return None
            cmd = {
                "cmd": "set_params",
                "args": {
                    "spindle_rpm": record.values["rec_spindle_rpm"],
                    "feed_mm_s": record.values["rec_feed_mm_s"],
                },
                "req_id": f"auto-{record.t_us}",
            }
            return json.dumps(cmd).encode("utf-8")
        return record.dumps().encode("utf-8")


class LoggerStage(Stage):
    """Appends records to an NDJSON file in arrival order."""

    def __init__(self, stage_id, params, ctx):
        super().__init__(stage_id, params, ctx)
        self.path = params["path"]
        self._fh = None

    async def open(self):
        try:
            self._fh = open(self.ctx.resolve(self.path) if self.ctx else self.path, "w", encoding="utf-8")
        except OSError as exc:
            raise StartupFailure(self.id, str(exc)) from exc

    async def process(self, port, record):
        self.counters["consumed"] += 1
        self._fh.write(record.dumps() + "\n")
        self.counters["emitted"] += 1
        return []

    async def close(self):
        if self._fh:
            self._fh.close()


STAGE_CLASSES = {
    "subscriber": SubscriberStage,
    "window": WindowStage,
    "feature": FeatureStage,
    "join": JoinStage,
    "score": ScoreStage,
    "threshold": ThresholdStage,
    "emitter": EmitterStage,
    "logger": LoggerStage,
}
