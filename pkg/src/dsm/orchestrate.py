"""Desk-scale run assembly.

Boots the full loop for one scenario: broker, cloud sink, gateway pipeline,
simulator, machine controller, and sensing nodes, then drives virtual time
in one-second ticks. All data-plane timestamps are virtual (from the
scenario clock), so a run is reproducible: the simulator's draws are
seeded, nodes process deterministically, and the join works in event time.
The pipeline quiesces at every tick boundary before the plant advances,
which also gives closed-loop commands a deterministic apply point.
"""

from __future__ import annotations

import asyncio
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

from . import node as node_mod
from . import sim as sim_mod
from .broker.client import MqttClient
from .broker.server import Broker, BrokerConfig
from .core import (
    ChannelDescriptor,
    Features,
    MeasurementMessage,
    Quantity,
    TopicKind,
    build_topic,
    channel_topic,
    encode_message,
    node_topic,
)
from .dsp import AdcSpec, Calibration
from .node import ChannelSetup, ClockModel, EnergyModel, NodeConfig, SensorNode
from .sink import CloudSink
from .wires.graph import load_graph
from .wires.hmi import HmiHub
from .wires.runtime import AdminServer, Pipeline, PipelineContext
from .wires.uplink import CloudUplink

log = logging.getLogger(__name__)

US = 1_000_000
SITE = "plant1"
MACHINE_NODE = "machine"

NODE_WORKPART = "wp1"
NODE_VACUUM = "vac1"
NODE_AMBIENT = "amb1"

ADC_12BIT = AdcSpec(bits=12, v_min=0.0, v_max=3.3)

# Modeled uplink latency constants (virtual-time model: transmission at this
# bandwidth plus a fixed gateway processing cost per record).
LATENCY_BANDWIDTH_BPS = 1_000_000
LATENCY_GATEWAY_PROC_US = 2_000


class VirtualClock:
    """Reference time for the whole run; the orchestrator advances it."""

    def __init__(self, start_us: int):
        self.now_us = start_us

    def __call__(self) -> int:
        return self.now_us

    def advance_to(self, t_us: int) -> None:
        self.now_us = max(self.now_us, t_us)


def scenario_channel_map(config: sim_mod.ScenarioConfig) -> dict:
    """node_id -> list of ChannelSetup for the default desk-scale rig."""

    def descriptor(node, channel, quantity, lo, hi, fs, window, mode):
        return ChannelDescriptor(
            topic=build_topic(SITE, node, channel, TopicKind.FEATURES),
            quantity=Quantity.of(quantity),
            range_min=lo,
            range_max=hi,
            fs_hz=fs,
            window=window,
            mode=mode,
        )

    vib = []
    for axis in sim_mod.VIB_CHANNELS:
        vib.append(
            ChannelSetup(
                descriptor=descriptor(
                    NODE_WORKPART, axis, "acceleration", -20.0, 20.0,
                    config.vib_fs_hz, config.vib_window, 2,
                ),
                adc=ADC_12BIT,
                calibration=Calibration(gain=40.0 / 3.3, offset=-20.0),
                decimation_factor=8,
                event_rising=2.0 if axis == "vib_x" else None,
                event_falling=1.5 if axis == "vib_x" else None,
            )
        )
    vac = [
        ChannelSetup(
            descriptor=descriptor(
                NODE_VACUUM, sim_mod.CH_AIR_SPEED, "air_speed", 0.0, 15.0,
                config.airflow_fs_hz, config.airflow_window, 2,
            ),
            adc=ADC_12BIT,
            calibration=Calibration(gain=15.0 / 3.3, offset=0.0),
            decimation_factor=2,
        ),
        ChannelSetup(
            descriptor=descriptor(
                NODE_VACUUM, sim_mod.CH_AIR_TEMP, "temperature", 0.0, 100.0,
                config.airflow_fs_hz, config.airflow_window, 2,
            ),
            adc=ADC_12BIT,
            calibration=Calibration(gain=100.0 / 3.3, offset=0.0),
            decimation_factor=2,
        ),
    ]
    amb = [
        ChannelSetup(
            descriptor=descriptor(
                NODE_AMBIENT, channel, quantity, lo, hi,
                config.ambient_fs_hz, config.ambient_window, 1,
            )
        )
        for channel, quantity, lo, hi in (
            (sim_mod.CH_AMB_TEMP, "temperature", -20.0, 60.0),
            (sim_mod.CH_AMB_HUM, "humidity", 0.0, 100.0),
            (sim_mod.CH_AMB_PRESS, "pressure", 900.0, 1100.0),
        )
    ]
    return {NODE_WORKPART: vib, NODE_VACUUM: vac, NODE_AMBIENT: amb}


def default_node_clocks() -> dict:
    # fixed per-node clock errors; sync at start corrects them
    return {
        NODE_WORKPART: ClockModel(true_offset_us=1500, drift_ppm=20.0),
        NODE_VACUUM: ClockModel(true_offset_us=-800, drift_ppm=-15.0),
        NODE_AMBIENT: ClockModel(true_offset_us=300, drift_ppm=5.0),
    }


# ---------------------------------------------------------------------------
# default gateway graphs
# ---------------------------------------------------------------------------

FEATURE_NAMES_FULL = ["min", "max", "mean", "rms", "p2p", "std", "dom_freq"]


def default_graph(
    config: sim_mod.ScenarioConfig,
    out_dir,
    model_path=None,
    auto_apply: bool = False,
    recommend: dict | None = None,
) -> dict:
    """Phase-1 collection graph; adds scoring/HMI when a model is deployed."""
    out_dir = Path(out_dir)
    stages = []
    edges = []
    join_inputs = []
    latch = []

    def sub(stage_id, node, channel, to_port, needs_features, is_latch):
        stages.append(
            {
                "id": f"sub_{stage_id}",
                "kind": "subscriber",
                "params": {"filter": f"dsm/v1/{SITE}/{node}/{channel}/+"},
            }
        )
        source = f"sub_{stage_id}.out"
        if needs_features:
            stages.append(
                {
                    "id": f"feat_{stage_id}",
                    "kind": "feature",
                    "params": {"names": FEATURE_NAMES_FULL},
                }
            )
            edges.append({"from": source, "to": f"feat_{stage_id}.in"})
            source = f"feat_{stage_id}.out"
        edges.append({"from": source, "to": f"join.{to_port}"})
        join_inputs.append(to_port)
        if is_latch:
            latch.append(to_port)

    for axis in sim_mod.VIB_CHANNELS:
        sub(axis, NODE_WORKPART, axis, axis, True, False)
    sub("air_speed", NODE_VACUUM, sim_mod.CH_AIR_SPEED, "air_speed", True, True)
    sub("air_temp", NODE_VACUUM, sim_mod.CH_AIR_TEMP, "air_temp", True, True)
    for channel in (sim_mod.CH_AMB_TEMP, sim_mod.CH_AMB_HUM, sim_mod.CH_AMB_PRESS):
        sub(channel, NODE_AMBIENT, channel, channel, False, True)
    sub("machine", MACHINE_NODE, sim_mod.CH_MACHINE, "machine", False, True)

    stages.append(
        {
            "id": "join",
            "kind": "join",
            "params": {
                "inputs": join_inputs,
                "tolerance_us": 250_000,
                "latch": latch,
                "latch_max_age_us": 2_500_000,
            },
        }
    )
    stages.append(
        {"id": "log_joined", "kind": "logger", "params": {"path": "joined.ndjson"}}
    )
    stages.append(
        {"id": "emit_features", "kind": "emitter", "params": {"target": "cloud", "role": "features"}}
    )
    edges.append({"from": "join.out", "to": "emit_features.in"})

    stages.append(
        {
            "id": "sub_labels",
            "kind": "subscriber",
            "params": {"filter": f"dsm/v1/{SITE}/{MACHINE_NODE}/{sim_mod.CH_LABEL}/+"},
        }
    )
    stages.append(
        {"id": "emit_labels", "kind": "emitter", "params": {"target": "cloud", "role": "label"}}
    )
    edges.append({"from": "sub_labels.out", "to": "emit_labels.in"})

    if model_path is None:
        edges.append({"from": "join.out", "to": "log_joined.in"})
    else:
        score_params = {"model_path": str(model_path)}
        if recommend is not None:
            score_params["recommend"] = recommend
        stages.append({"id": "score", "kind": "score", "params": score_params})
        edges.append({"from": "join.out", "to": "score.in"})
        edges.append({"from": "score.out", "to": "log_joined.in"})
        stages.append(
            {"id": "log_scored", "kind": "logger", "params": {"path": "scored.ndjson"}}
        )
        edges.append({"from": "score.out", "to": "log_scored.in"})
        stages.append({"id": "emit_hmi", "kind": "emitter", "params": {"target": "hmi"}})
        edges.append({"from": "score.out", "to": "emit_hmi.in"})
        if auto_apply:
            stages.append(
                {
                    "id": "emit_autoapply",
                    "kind": "emitter",
                    "params": {
                        "target": "topic",
                        "topic": node_topic(SITE, MACHINE_NODE, TopicKind.CMD),
                        "payload": "recommendation_cmd",
                    },
                }
            )
            edges.append({"from": "score.out", "to": "emit_autoapply.in"})
    return {"stages": stages, "edges": edges}


def default_recommend_config(config: sim_mod.ScenarioConfig) -> dict:
    return {
        "rpm_candidates": [9000.0, 12000.0, 18000.0, 24000.0],
        "feed_candidates": [1.0, 2.0, 5.0, 10.0, 20.0],
        "scenario": config.to_doc(),
        "when": "alarm",
    }


# ---------------------------------------------------------------------------
# machine controller: publishes status + labels, applies commands to the sim
# ---------------------------------------------------------------------------

class MachineController:
    def __init__(self, simulator: sim_mod.TrimmingSimulator, broker_port: int, clock_us):
        self.sim = simulator
        self.client = MqttClient("127.0.0.1", broker_port, MACHINE_NODE)
        self.clock_us = clock_us
        self._seq = {sim_mod.CH_MACHINE: 0, sim_mod.CH_LABEL: 0}
        self._cmd_task = None
        self._cmd_sub = None

    async def start(self) -> None:
        await self.client.connect()
        self._cmd_sub = await self.client.subscribe(
            node_topic(SITE, MACHINE_NODE, TopicKind.CMD), qos=1
        )
        self._cmd_task = asyncio.create_task(self._command_loop())

    async def stop(self) -> None:
        if self._cmd_task:
            self._cmd_task.cancel()
            try:
                await self._cmd_task
            except asyncio.CancelledError:
                pass
        await self.client.disconnect()

    async def publish_tick(self, tick: sim_mod.TickOutput) -> None:
        await self._publish_features(sim_mod.CH_MACHINE, tick.t0_us, tick.machine_status)
        label_values = {
            "defect": float(tick.label["defect"]),
            "risk_true": tick.label["p"],
        }
        await self._publish_features(sim_mod.CH_LABEL, tick.t0_us, label_values)

    async def _publish_features(self, channel: str, t_us: int, values: dict) -> None:
        msg = MeasurementMessage(
            node_id=MACHINE_NODE,
            channel=channel,
            seq=self._seq[channel],
            t_acq_us=t_us,
            mode=2,
            unit="1",
            fs_hz=1.0,
            window_len=1,
            payload=Features(values),
        )
        self._seq[channel] += 1
        topic = channel_topic(SITE, MACHINE_NODE, channel, TopicKind.FEATURES)
        await self.client.publish(topic, encode_message(msg), qos=1)

    async def _command_loop(self) -> None:
        while True:
            _, payload, _ = await self._cmd_sub.get()
            try:
                doc = json.loads(payload)
            except ValueError:
                continue
            if doc.get("cmd") != "set_params":
                continue
            args = doc.get("args") or {}
            ok, reason = self.sim.apply_command(args, origin=str(doc.get("origin", "operator")))
            ack = {"type": "ack", "req_id": doc.get("req_id"), "ok": ok, "node_id": MACHINE_NODE}
            if not ok:
                ack["reason"] = reason
            await self.client.publish(
                node_topic(SITE, MACHINE_NODE, TopicKind.EVENTS),
                json.dumps(ack).encode("utf-8"),
                qos=1,
            )


# ---------------------------------------------------------------------------
# the run itself
# ---------------------------------------------------------------------------

@dataclass
class RunArtifacts:
    out_dir: Path
    session_path: Path
    metrics_path: Path
    meta_path: Path
    scored_path: Path | None
    counters: dict
    uplink_stats: dict
    sink_url: str
    hmi_port: int | None
    ground_truth_risks: list = field(default_factory=list)


@dataclass
class RunHandles:
    """Live components, exposed while the run loop is active (for tests and
    the closed-loop acceptance criteria)."""

    broker: Broker
    pipeline: Pipeline
    simulator: sim_mod.TrimmingSimulator
    controller: MachineController
    hmi: HmiHub | None
    admin: AdminServer | None
    clock: VirtualClock


async def run_live(
    config: sim_mod.ScenarioConfig,
    out_dir,
    graph_doc: dict | None = None,
    model_path=None,
    mode_override: int | None = None,
    auto_apply: bool = False,
    with_hmi: bool = False,
    hmi_static_dir=None,
    sink_url: str | None = None,
    on_tick=None,
) -> RunArtifacts:
    """Run one scenario through the full stack in virtual time.

    `on_tick(handles, t_s)` is awaited at each tick boundary after the
    pipeline quiesces; tests use it to drive closed-loop interactions.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    clock = VirtualClock(config.start_epoch_us)

    broker = Broker(BrokerConfig(metrics_port=0), clock_us=clock)
    await broker.start()

    own_sink = sink_url is None
    sink = None
    if own_sink:
        sink = CloudSink(out_dir / "sink_data")
        sink.start()
        sink_url = sink.url

    uplink = CloudUplink(sink_url, gateway_id="gw1")
    uplink_session = config.session_id
    original_enqueue = uplink.enqueue

    async def enqueue_with_session(doc):
        doc.setdefault("session", uplink_session)
        await original_enqueue(doc)

    uplink.enqueue = enqueue_with_session

    hmi = None
    if with_hmi or model_path is not None:
        hmi = HmiHub(broker=broker, site=SITE, machine_node=MACHINE_NODE, static_dir=hmi_static_dir)
        await hmi.start()

    recommend = default_recommend_config(config) if model_path is not None else None
    if graph_doc is None:
        graph_doc = default_graph(
            config, out_dir, model_path=model_path, auto_apply=auto_apply, recommend=recommend
        )
    (out_dir / "graph.json").write_text(json.dumps(graph_doc, indent=2, sort_keys=True) + "\n")

    spec = load_graph(json.dumps(graph_doc))
    ctx = PipelineContext(
        broker=broker,
        uplink=uplink,
        hmi=hmi,
        dead_letter_path=str(out_dir / "dead_letter.ndjson"),
        base_dir=out_dir,
    )
    pipeline = Pipeline(spec, ctx)
    await pipeline.start()

    admin = AdminServer(pipeline, model_path=str(out_dir / "deployed_model.json"))
    if model_path is not None:
        await admin.start()

    simulator = sim_mod.TrimmingSimulator(config)
    controller = MachineController(simulator, broker.port, clock)
    await controller.start()

    channel_map = scenario_channel_map(config)
    clocks = default_node_clocks()
    nodes = {}
    runners = []
    for node_id, setups in channel_map.items():
        node_config = NodeConfig(
            node_id=node_id,
            site=SITE,
            channels=setups,
            broker_host="127.0.0.1",
            broker_port=broker.port,
            mode_override=mode_override,
            sync_period_s=30.0,
            clock=clocks[node_id],
            energy=EnergyModel(),
        )
        node = SensorNode(node_config, clock_us=clock)
        await node.start()
        nodes[node_id] = node
        runners.append(asyncio.create_task(node.run(), name=f"node-{node_id}"))

    channel_to_node = {}
    for node_id, setups in channel_map.items():
        for setup in setups:
            channel_to_node[setup.channel] = node_id

    handles = RunHandles(broker, pipeline, simulator, controller, hmi, admin, clock)
    session_rows = [
        {"kind": "meta", "session_id": config.session_id, "config": config.to_doc()}
    ]
    ground_truth = []

    try:
        for t_s in range(config.duration_s):
            tick = simulator.step()
            clock.advance_to(tick.t0_us + US)
            for cmd in tick.commands_applied:
                session_rows.append({"kind": "command", **cmd})
            session_rows.append({"kind": "state", **tick.state_row})
            for batch in tick.batches:
                session_rows.append(
                    {
                        "kind": "samples",
                        "channel": batch.channel,
                        "t0_us": batch.t0_us,
                        "fs_hz": batch.fs_hz,
                        "values": [float(v) for v in batch.samples],
                    }
                )
            session_rows.append({"kind": "status", "t_us": tick.t0_us, **tick.machine_status})
            session_rows.append({"kind": "label", **tick.label})
            ground_truth.append({"t_s": t_s, "p": tick.label["p"]})

            await controller.publish_tick(tick)
            for batch in tick.batches:
                node = nodes[channel_to_node[batch.channel]]
                await node.feed.put(batch)
            for node in nodes.values():
                await node.drain()
            await pipeline.quiesce()
            if on_tick is not None:
                await on_tick(handles, t_s)

        for node in nodes.values():
            await node.feed.put(None)
        await asyncio.gather(*runners)
        await pipeline.quiesce()
    finally:
        await pipeline.stop()
        for node in nodes.values():
            await node.stop()
        await controller.stop()
        if hmi is not None:
            await hmi.stop()
        if admin is not None and model_path is not None:
            await admin.stop()
        await broker.stop()

    # persist artifacts (deterministic ordering everywhere)
    session_path = out_dir / "session.ndjson"
    sim_mod.write_session(session_rows, session_path)

    metrics_rows = []
    for node in nodes.values():
        metrics_rows.extend(node.metrics_rows)
    metrics_rows.sort(key=lambda r: (r["t_us"], r["node_id"], r["channel"], r["seq"]))
    metrics_path = out_dir / "metrics.ndjson"
    with open(metrics_path, "w", encoding="utf-8") as f:
        for row in metrics_rows:
            f.write(json.dumps(row, ensure_ascii=False, separators=(",", ":")) + "\n")

    counters = pipeline.counters()
    uplink_stats = {
        "batches_sent": uplink.batches_sent,
        "records_sent": uplink.records_sent,
        "retries": uplink.retries,
    }
    meta = {
        "session_id": config.session_id,
        "mode_override": mode_override,
        "scenario": config.to_doc(),
        "counters": counters,
        "uplink": uplink_stats,
        "sync": {node_id: n.sync_history for node_id, n in nodes.items()},
        "latency_model": {
            "bandwidth_bps": LATENCY_BANDWIDTH_BPS,
            "gateway_proc_us": LATENCY_GATEWAY_PROC_US,
        },
    }
    meta_path = out_dir / "run_meta.json"
    meta_path.write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")

    if own_sink and sink is not None:
        sink.stop()

    scored_path = out_dir / "scored.ndjson"
    return RunArtifacts(
        out_dir=out_dir,
        session_path=session_path,
        metrics_path=metrics_path,
        meta_path=meta_path,
        scored_path=scored_path if scored_path.exists() else None,
        counters=counters,
        uplink_stats=uplink_stats,
        sink_url=sink_url,
        hmi_port=hmi.port if hmi else None,
        ground_truth_risks=ground_truth,
    )
