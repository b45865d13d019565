"""Simulated smart transducer node.

Consumes a per-node sample feed, simulates the analog front end (conditioning
plus ADC) where configured, applies the channel's processing mode, stamps
sync-corrected acquisition time, and publishes envelopes to the broker with
store-and-forward buffering. Commands arrive on the node's cmd topic and are
applied between windows; acks go out on the events topic.

Processing modes:
  1  raw forwarding — the full window as acquired
  2  on-node features — the 6 shape features plus dominant frequency
  3  hybrid — block-averaged raw plus the 6 shape features; spectral work
     is left to the gateway (that is the pre/post split, and it is also why
     mode 3 costs less node CPU than mode 2)
"""

from __future__ import annotations

import asyncio
import hashlib
import json
import logging
from collections import deque
from dataclasses import dataclass, field, replace

import numpy as np

from . import dsp
from .aio import await_timeout
from .broker.client import ConnectionFailed, MqttClient
from .core import (
    ChannelDescriptor,
    Features,
    Hybrid,
    MeasurementMessage,
    Raw,
    TopicKind,
    channel_topic,
    encode_message,
    node_topic,
)
from .dsp import AdcSpec, AllZeroSignal, Calibration
from .errors import DsmError, InvariantViolation

log = logging.getLogger(__name__)

US = 1_000_000


class NonCausalTimestamps(DsmError):
    pass


class SourceExhausted(DsmError):
    pass


# Feature values computed on-node per mode (mode 3 defers dom_freq to the edge).
FEATURES_BY_MODE = {1: 0, 2: len(dsp.FEATURE_NAMES) + 1, 3: len(dsp.FEATURE_NAMES)}


@dataclass
class ClockModel:
    """Node-local clock error against reference time.

    local(t) = t + true_offset_us + drift_ppm * elapsed/1e6 + applied_correction_us
    """

    true_offset_us: int = 0
    drift_ppm: float = 0.0
    applied_correction_us: int = 0

    def __post_init__(self):
        if abs(self.drift_ppm) > 500:
            raise InvariantViolation("drift_ppm", "|drift_ppm| must be <= 500")

    def local_us(self, true_us: int, boot_true_us: int) -> int:
        drift = self.drift_ppm * (true_us - boot_true_us) / 1e6
        return int(true_us + self.true_offset_us + drift) + self.applied_correction_us


@dataclass
class EnergyModel:
    cost_per_sample_cpu: float = 1.0
    cost_per_feature_cpu: float = 50.0
    cost_per_byte_radio: float = 2.0
    budget: float = 1e9

    def __post_init__(self):
        for name in ("cost_per_sample_cpu", "cost_per_feature_cpu", "cost_per_byte_radio", "budget"):
            if getattr(self, name) < 0:
                raise InvariantViolation(name, "costs must be >= 0")


def energy_cost(mode: int, window_len: int, bytes_sent: int, model: EnergyModel):
    """(cpu, radio, total) energy units for one published window."""
    cpu = model.cost_per_sample_cpu * window_len + model.cost_per_feature_cpu * FEATURES_BY_MODE[mode]
    radio = model.cost_per_byte_radio * bytes_sent
    return cpu, radio, cpu + radio


class EnergyAccount:
    def __init__(self, model: EnergyModel):
        self.model = model
        self.cpu_spent = 0.0
        self.radio_spent = 0.0

    def charge(self, mode: int, window_len: int, bytes_sent: int):
        cpu, radio, _ = energy_cost(mode, window_len, bytes_sent, self.model)
        self.cpu_spent += cpu
        self.radio_spent += radio

    @property
    def spent(self) -> float:
        return self.cpu_spent + self.radio_spent

    @property
    def battery_pct(self) -> float:
        return max(0.0, 1.0 - self.spent / self.model.budget) * 100.0


def sync_exchange(t1: int, t2: int, t3: int, t4: int):
    """Two-way time transfer: (offset_us, delay_us) from one exchange.

    offset = ((t2-t1) + (t3-t4)) // 2 (floor division keeps integer µs);
    delay = (t4-t1) - (t3-t2).
    """
    if t4 < t1 or t3 < t2:
        raise NonCausalTimestamps(f"t1={t1} t2={t2} t3={t3} t4={t4}")
    offset = ((t2 - t1) + (t3 - t4)) // 2
    delay = (t4 - t1) - (t3 - t2)
    return offset, delay


def apply_mode(window, mode: int, decimation_factor: int = 1, fs_hz: float | None = None):
    """Turn one full window into the payload for the given processing mode."""
    x = np.asarray(window, dtype=float)
    if x.size == 0:
        raise InvariantViolation("window_len", "empty window")
    if mode == 1:
        return Raw(x)
    feats = dsp.window_features(x)
    if mode == 2:
        if fs_hz is None:
            raise InvariantViolation("fs_hz", "mode 2 needs the sampling rate for dom_freq")
        try:
            feats[dsp.DOM_FREQ] = dsp.dominant_frequency(x, fs_hz)
        except AllZeroSignal:
            pass  # silent window: dom_freq absent
        return Features(feats)
    if mode == 3:
        return Hybrid(dsp.decimate(x, decimation_factor), feats)
    raise InvariantViolation("mode", f"unknown mode {mode}")


def mode_feasible(mode: int, window: int, decimation_factor: int) -> bool:
    if mode == 1:
        return window >= 1
    if mode == 2:
        return window >= dsp.MIN_DFT_WINDOW
    if mode == 3:
        return window >= dsp.MIN_DFT_WINDOW and window % decimation_factor == 0
    return False


@dataclass
class ChannelSetup:
    """Per-channel node configuration around the registry descriptor."""

    descriptor: ChannelDescriptor
    adc: AdcSpec | None = None
    calibration: Calibration = field(default_factory=Calibration)
    decimation_factor: int = 1
    event_rising: float | None = None
    event_falling: float | None = None

    @property
    def channel(self) -> str:
        return self.descriptor.topic.channel


@dataclass
class NodeConfig:
    node_id: str
    site: str
    channels: list
    broker_host: str = "127.0.0.1"
    broker_port: int = 1883
    mode_override: int | None = None  # force a mode where feasible (mode comparison runs)
    sync_period_s: float = 30.0
    clock: ClockModel = field(default_factory=ClockModel)
    energy: EnergyModel = field(default_factory=EnergyModel)
    buffer_depth: int = 1000
    qos_features: int = 1
    qos_raw: int = 0

    def __post_init__(self):
        if not self.channels:
            raise InvariantViolation("channels", "at least one channel required")
        for setup in self.channels:
            if setup.decimation_factor > 1 and setup.descriptor.window % setup.decimation_factor:
                raise InvariantViolation(
                    "decimation_factor",
                    f"{setup.decimation_factor} does not divide window {setup.descriptor.window}",
                )

    def digest(self) -> str:
        doc = {
            "node_id": self.node_id,
            "channels": [
                {
                    "channel": s.channel,
                    "fs_hz": s.descriptor.fs_hz,
                    "window": s.descriptor.window,
                    "mode": self.effective_mode(s),
                    "decimation": s.decimation_factor,
                }
                for s in self.channels
            ],
        }
        return hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).hexdigest()[:12]

    def effective_mode(self, setup: ChannelSetup) -> int:
        mode = self.mode_override if self.mode_override is not None else setup.descriptor.mode
        if not mode_feasible(mode, setup.descriptor.window, setup.decimation_factor):
            return 1  # fall back to raw forwarding for tiny windows
        return mode


@dataclass
class _ChannelState:
    setup: ChannelSetup
    seq: int = 0
    buffer: np.ndarray = field(default_factory=lambda: np.empty(0))
    acq_t0_us: int | None = None  # true time of the first buffered sample
    rate_divisor: int = 1  # block-average divisor applied to the source rate
    window: int = 0  # current window (may be changed by set_window)

    def __post_init__(self):
        self.window = self.setup.descriptor.window

    @property
    def fs_out(self) -> float:
        return self.setup.descriptor.fs_hz / self.rate_divisor


class SensorNode:
    """One smart transducer instance. Single-task: acquisition, processing,
    and publishing happen in one loop; many nodes run as independent tasks."""

    def __init__(self, config: NodeConfig, clock_us):
        self.config = config
        self.clock_us = clock_us  # reference ("true") time source
        self.feed: asyncio.Queue = asyncio.Queue(maxsize=64)
        self.client = MqttClient(config.broker_host, config.broker_port, config.node_id)
        self.channels = {s.channel: _ChannelState(s) for s in config.channels}
        self.energy = EnergyAccount(config.energy)
        self.metrics_rows: list = []
        self.boot_true_us: int | None = None
        self.last_sync_true_us: int | None = None
        self.sync_history: list = []
        self._outbox: deque = deque(maxlen=config.buffer_depth)  # DropOldest
        self._cmd_sub = None
        self._sync_sub = None
        self._pending_cmds: list = []
        self._cmd_task = None

    # ------------------------------------------------------------------
    # lifecycle
    # ------------------------------------------------------------------

    async def start(self, connect_retries: int = 30, retry_delay_s: float = 0.1) -> None:
        self.boot_true_us = self.clock_us()
        for attempt in range(connect_retries):
            try:
                await self.client.connect()
                break
            except ConnectionFailed:
                if attempt == connect_retries - 1:
                    raise
                await asyncio.sleep(retry_delay_s)
        self._cmd_sub = await self.client.subscribe(
            node_topic(self.config.site, self.config.node_id, TopicKind.CMD), qos=1
        )
        self._sync_sub = await self.client.subscribe(
            node_topic(self.config.site, self.config.node_id, TopicKind.SYNC), qos=0
        )
        self._cmd_task = asyncio.create_task(self._command_loop())
        await self.sync_now()

    async def run(self) -> None:
        """Main acquisition loop; ends cleanly when the feed sends None."""
        try:
            while True:
                batch = await self.feed.get()
                if batch is None:
                    return
                if isinstance(batch, _Barrier):
                    batch.future.set_result(True)
                    continue
                await self._ingest(batch)
        finally:
            await self._flush_outbox()

    async def drain(self) -> None:
        """Wait until every batch queued before this call has been processed."""
        barrier = _Barrier(asyncio.get_running_loop().create_future())
        await self.feed.put(barrier)
        await barrier.future

    async def stop(self) -> None:
        if self._cmd_task:
            self._cmd_task.cancel()
            try:
                await self._cmd_task
            except asyncio.CancelledError:
                pass
        await self.client.disconnect()

    # ------------------------------------------------------------------
    # acquisition
    # ------------------------------------------------------------------

    async def _ingest(self, batch) -> None:
        # commands apply here, between windows, never mid-window
        for cmd in self._pending_cmds:
            await self._apply_command(cmd)
        self._pending_cmds.clear()

        if self.last_sync_true_us is not None and self.config.sync_period_s > 0:
            if batch.t0_us - self.last_sync_true_us >= self.config.sync_period_s * US:
                await self.sync_now()

        state = self.channels.get(batch.channel)
        if state is None:
            return
        samples = np.asarray(batch.samples, dtype=float)

        setup = state.setup
        if setup.adc is not None:
            # sensor + conditioning simulation: eng -> volts -> codes -> eng
            volts = (samples - setup.calibration.offset) / setup.calibration.gain
            codes = dsp.quantize(volts, setup.adc)
            samples = dsp.to_engineering_units(codes, setup.adc, setup.calibration)

        if state.rate_divisor > 1:
            n_keep = samples.size - samples.size % state.rate_divisor
            samples = dsp.decimate(samples[:n_keep], state.rate_divisor)

        if state.acq_t0_us is None:
            state.acq_t0_us = batch.t0_us
        state.buffer = np.concatenate([state.buffer, samples])

        while state.buffer.size >= state.window:
            window = state.buffer[: state.window]
            state.buffer = state.buffer[state.window :]
            await self._emit_window(state, window)
            state.acq_t0_us += int(round(state.window / state.fs_out * US))

    async def _emit_window(self, state: _ChannelState, window: np.ndarray) -> None:
        setup = state.setup
        mode = self.config.effective_mode(setup)
        payload = apply_mode(window, mode, setup.decimation_factor, state.fs_out)
        t_acq = self.config.clock.local_us(state.acq_t0_us, self.boot_true_us)
        msg = MeasurementMessage(
            node_id=self.config.node_id,
            channel=setup.channel,
            seq=state.seq,
            t_acq_us=t_acq,
            mode=mode,
            unit=setup.descriptor.quantity.unit,
            fs_hz=state.fs_out,
            window_len=state.window,
            payload=payload,
        )
        raw = encode_message(msg)
        kind = TopicKind.RAW if mode == 1 else TopicKind.FEATURES
        qos = self.config.qos_raw if mode == 1 else self.config.qos_features
        topic = channel_topic(self.config.site, self.config.node_id, setup.channel, kind)
        await self._publish_or_buffer(topic, raw, qos)
        state.seq += 1

        self.energy.charge(mode, state.window, len(raw))
        value_count = _payload_value_count(payload)
        cpu, radio, total = energy_cost(mode, state.window, len(raw), self.config.energy)
        self.metrics_rows.append(
            {
                "t_us": t_acq,
                "node_id": self.config.node_id,
                "channel": setup.channel,
                "mode": mode,
                "seq": msg.seq,
                "wire_bytes": len(raw),
                "values": value_count,
                "cpu_units": cpu,
                "radio_units": radio,
                "battery_pct": self.energy.battery_pct,
            }
        )

        if setup.event_rising is not None and setup.event_falling is not None:
            events = dsp.detect_events(window, setup.event_rising, setup.event_falling)
            for index, kind_name in events:
                t_ev = t_acq + int(round(index / state.fs_out * US))
                await self._publish_event(
                    {
                        "type": "edge",
                        "node_id": self.config.node_id,
                        "channel": setup.channel,
                        "t_us": t_ev,
                        "kind": kind_name,
                        "index": index,
                        "value": float(window[index]),
                    }
                )

    async def _publish_event(self, doc: dict) -> None:
        topic = channel_topic(
            self.config.site, self.config.node_id, doc.get("channel", "_node"), TopicKind.EVENTS
        )
        await self._publish_or_buffer(topic, json.dumps(doc).encode("utf-8"), qos=1)

    # ------------------------------------------------------------------
    # store-and-forward publishing
    # ------------------------------------------------------------------

    async def _publish_or_buffer(self, topic: str, payload: bytes, qos: int) -> None:
        if self._outbox:
            self._outbox.append((topic, payload, qos))
            await self._try_reconnect_and_flush()
            return
        try:
            await self.client.publish(topic, payload, qos)
        except (ConnectionFailed, ConnectionError, OSError, asyncio.TimeoutError):
            self._outbox.append((topic, payload, qos))

    async def _try_reconnect_and_flush(self) -> None:
        if not self.client.connected:
            try:
                await self.client._teardown()
                await self.client.connect(timeout=0.5)
                await self._resubscribe()
            except (ConnectionFailed, ConnectionError, OSError, asyncio.TimeoutError):
                return
        await self._flush_outbox()

    async def _resubscribe(self) -> None:
        self._cmd_sub = await self.client.subscribe(
            node_topic(self.config.site, self.config.node_id, TopicKind.CMD), qos=1
        )
        self._sync_sub = await self.client.subscribe(
            node_topic(self.config.site, self.config.node_id, TopicKind.SYNC), qos=0
        )

    async def _flush_outbox(self) -> None:
        while self._outbox:
            topic, payload, qos = self._outbox[0]
            try:
                await self.client.publish(topic, payload, qos)
            except (ConnectionFailed, ConnectionError, OSError, asyncio.TimeoutError):
                return
            self._outbox.popleft()

    # ------------------------------------------------------------------
    # clock sync over the broker
    # ------------------------------------------------------------------

    async def sync_now(self, timeout: float = 2.0) -> None:
        true_now = self.clock_us()
        t1 = self.config.clock.local_us(true_now, self.boot_true_us)
        topic = node_topic(self.config.site, self.config.node_id, TopicKind.SYNC)
        req_id = f"{self.config.node_id}-{true_now}"
        try:
            await self.client.publish(topic, json.dumps({"req": t1, "req_id": req_id}).encode(), qos=0)
        except (ConnectionFailed, ConnectionError, OSError):
            return
        deadline = asyncio.get_running_loop().time() + timeout
        while True:
            remaining = deadline - asyncio.get_running_loop().time()
            if remaining <= 0:
                return
            try:
                _, payload, _ = await await_timeout(self._sync_sub.get(), remaining)
            except asyncio.TimeoutError:
                return
            try:
                doc = json.loads(payload)
            except ValueError:
                continue
            if "rsp" not in doc or doc.get("req_id") != req_id:
                continue
            rsp = doc["rsp"]
            t4 = self.config.clock.local_us(self.clock_us(), self.boot_true_us)
            offset, delay = sync_exchange(rsp["t1"], rsp["t2"], rsp["t3"], t4)
            self.config.clock.applied_correction_us += offset
            self.last_sync_true_us = self.clock_us()
            self.sync_history.append({"t_us": self.last_sync_true_us, "offset_us": offset, "delay_us": delay})
            return

    # ------------------------------------------------------------------
    # command handling
    # ------------------------------------------------------------------

    async def _command_loop(self) -> None:
        while True:
            _, payload, _ = await self._cmd_sub.get()
            try:
                doc = json.loads(payload)
            except ValueError:
                continue
            if not isinstance(doc, dict) or "cmd" not in doc:
                continue
            if doc.get("cmd") == "ping":
                await self._ack(doc, True, extra={"config_digest": self.config.digest(),
                                                  "battery_pct": self.energy.battery_pct})
            else:
                # applied between windows by the acquisition loop
                self._pending_cmds.append(doc)

    async def _apply_command(self, doc: dict) -> None:
        cmd = doc.get("cmd")
        args = doc.get("args") or {}
        channel = args.get("channel")
        targets = [self.channels[channel]] if channel in self.channels else list(self.channels.values())
        if channel is not None and channel not in self.channels:
            await self._ack(doc, False, f"unknown channel '{channel}'")
            return

        if cmd == "set_mode":
            mode = args.get("mode")
            if mode not in (1, 2, 3):
                await self._ack(doc, False, f"invalid mode {mode!r}")
                return
            infeasible = [
                s.setup.channel
                for s in targets
                if not mode_feasible(mode, s.window, s.setup.decimation_factor)
            ]
            if infeasible:
                await self._ack(doc, False, f"mode {mode} infeasible for {','.join(infeasible)}")
                return
            for s in targets:
                s.setup.descriptor = replace(s.setup.descriptor, mode=mode)
            if self.config.mode_override is not None:
                self.config.mode_override = mode
            await self._ack(doc, True)
        elif cmd == "set_window":
            window = args.get("window")
            if not isinstance(window, int) or window < 1:
                await self._ack(doc, False, f"invalid window {window!r}")
                return
            bad = [
                s.setup.channel
                for s in targets
                if window % s.setup.decimation_factor != 0
                or not mode_feasible(self.config.effective_mode(s.setup), window, s.setup.decimation_factor)
            ]
            if bad:
                await self._ack(doc, False, f"window {window} invalid for {','.join(bad)}")
                return
            for s in targets:
                s.window = window
            await self._ack(doc, True)
        elif cmd == "set_rate":
            fs = args.get("fs_hz")
            if not isinstance(fs, (int, float)) or fs <= 0:
                await self._ack(doc, False, f"invalid fs_hz {fs!r}")
                return
            bad = [s.setup.channel for s in targets if (s.setup.descriptor.fs_hz / fs) % 1 != 0]
            if bad:
                await self._ack(doc, False, f"fs_hz {fs} must divide the source rate for {','.join(bad)}")
                return
            for s in targets:
                s.rate_divisor = int(s.setup.descriptor.fs_hz / fs)
            await self._ack(doc, True)
        else:
            await self._ack(doc, False, f"unknown command {cmd!r}")

    async def _ack(self, doc: dict, ok: bool, reason: str = "", extra: dict | None = None) -> None:
        ack = {"type": "ack", "req_id": doc.get("req_id"), "ok": ok, "node_id": self.config.node_id}
        if reason:
            ack["reason"] = reason
        if extra:
            ack.update(extra)
        await self._publish_event(ack)


@dataclass
class _Barrier:
    future: asyncio.Future


def _payload_value_count(payload) -> int:
    if isinstance(payload, Raw):
        return len(payload.samples)
    if isinstance(payload, Features):
        return len(payload.values)
    return len(payload.samples) + len(payload.features)
