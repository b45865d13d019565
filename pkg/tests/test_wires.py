import asyncio
import json
import random

import numpy as np
import pytest

from dsm import quality
from dsm.broker.server import Broker, BrokerConfig
from dsm.core import MeasurementMessage, Features, Raw, encode_message
from dsm.quality import QualityModel
from dsm.wires import graph as graph_mod
from dsm.wires.graph import GraphSpec, GraphValidationError, load_graph, parse_graph, validate_graph
from dsm.wires.records import WireRecord, record_from_message
from dsm.wires.runtime import Pipeline, PipelineContext
from dsm.wires.stages import END, JoinStage, ScoreStage, StartupFailure

US = 1_000_000
EPOCH = 1_600_000_000 * US


def run(coro):
    return asyncio.run(coro)


# ---------------------------------------------------------------------------
# graph validation
# ---------------------------------------------------------------------------

def linear_doc(model_path="model.json"):
    return {
        "stages": [
            {"id": "sub", "kind": "subscriber", "params": {"filter": "a/#"}},
            {"id": "score", "kind": "score", "params": {"model_path": model_path}},
            {"id": "out", "kind": "logger", "params": {"path": "out.ndjson"}},
        ],
        "edges": [
            {"from": "sub.out", "to": "score.in"},
            {"from": "score.out", "to": "out.in"},
        ],
    }


class TestGraphValidation:
    def test_linear_chain_valid(self):
        spec = parse_graph(linear_doc())
        assert validate_graph(spec) == []

    def test_two_cycle_detected_with_both_ids(self):
        doc = {
            "stages": [
                {"id": "a", "kind": "feature", "params": {"names": ["rms"]}},
                {"id": "b", "kind": "feature", "params": {"names": ["rms"]}},
            ],
            "edges": [
                {"from": "a.out", "to": "b.in"},
                {"from": "b.out", "to": "a.in"},
            ],
        }
        violations = validate_graph(parse_graph(doc))
        cycles = [v for v in violations if v.startswith("CycleDetected")]
        assert cycles and "a" in cycles[0] and "b" in cycles[0]

    def test_unknown_kind(self):
        doc = {"stages": [{"id": "x", "kind": "mystery", "params": {}}], "edges": []}
        violations = validate_graph(parse_graph(doc))
        assert any(v.startswith("UnknownStageKind") for v in violations)

    def test_dangling_edge(self):
        doc = linear_doc()
        doc["edges"].append({"from": "score.bogus", "to": "out.in"})
        violations = validate_graph(parse_graph(doc))
        assert any(v.startswith("DanglingEdge") for v in violations)

    def test_missing_param(self):
        doc = {"stages": [{"id": "x", "kind": "logger", "params": {}}], "edges": []}
        violations = validate_graph(parse_graph(doc))
        assert any(v == "MissingParam: x.path" for v in violations)

    def test_all_violations_reported_not_just_first(self):
        doc = {
            "stages": [
                {"id": "x", "kind": "mystery", "params": {}},
                {"id": "y", "kind": "logger", "params": {}},
            ],
            "edges": [{"from": "nope.out", "to": "y.in"}],
        }
        violations = validate_graph(parse_graph(doc))
        assert len(violations) >= 3

    def test_type_mismatch_via_registered_kind(self):
        graph_mod.register_stage_kind(
            graph_mod.StageKindSpec(
                "blob_source", (), graph_mod._fixed(), graph_mod._fixed("out", datatype="blob")
            )
        )
        try:
            doc = {
                "stages": [
                    {"id": "src", "kind": "blob_source", "params": {}},
                    {"id": "log", "kind": "logger", "params": {"path": "x"}},
                ],
                "edges": [{"from": "src.out", "to": "log.in"}],
            }
            violations = validate_graph(parse_graph(doc))
            assert any(v.startswith("TypeMismatch") for v in violations)
        finally:
            del graph_mod.STAGE_KINDS["blob_source"]

    def test_random_dags_agree_with_topo_oracle(self):
        # oracle: independent Kahn topological sort deciding acyclicity
        def oracle_acyclic(n, edges):
            indeg = {i: 0 for i in range(n)}
            adj = {i: [] for i in range(n)}
            for a, b in edges:
                indeg[b] += 1
                adj[a].append(b)
            queue = [i for i in range(n) if indeg[i] == 0]
            seen = 0
            while queue:
                v = queue.pop()
                seen += 1
                for w in adj[v]:
                    indeg[w] -= 1
                    if indeg[w] == 0:
                        queue.append(w)
            return seen == n

        rng = random.Random(42)
        for trial in range(200):
            n = rng.randint(2, 12)
            stages = [
                {"id": f"s{i}", "kind": "feature", "params": {"names": ["rms"]}} for i in range(n)
            ]
            edge_pairs = set()
            for _ in range(rng.randint(1, 2 * n)):
                a, b = rng.randrange(n), rng.randrange(n)
                if a != b:
                    edge_pairs.add((a, b))
            # at most one inbound edge per feature stage input
            by_target = {}
            for a, b in sorted(edge_pairs):
                by_target.setdefault(b, a)
            edges = [(a, b) for b, a in by_target.items()]
            doc = {
                "stages": stages,
                "edges": [{"from": f"s{a}.out", "to": f"s{b}.in"} for a, b in edges],
            }
            violations = validate_graph(parse_graph(doc))
            cycle_found = any(v.startswith("CycleDetected") for v in violations)
            assert cycle_found == (not oracle_acyclic(n, edges)), (trial, edges, violations)


# ---------------------------------------------------------------------------
# pipeline runtime
# ---------------------------------------------------------------------------

def make_model(path, names=("a", "b"), w=(1.0, 1.0), threshold=0.7, version="v1"):
    m = QualityModel(
        feature_names=list(names),
        mu=np.zeros(len(names)),
        sigma=np.ones(len(names)),
        w=np.array(w, dtype=float),
        b=0.0,
        threshold=threshold,
        version=version,
    )
    quality.save_model(m, path)
    return m


def envelope(channel, seq, t_us, features):
    return MeasurementMessage(
        node_id="n1",
        channel=channel,
        seq=seq,
        t_acq_us=t_us,
        mode=2,
        unit="m/s²",
        fs_hz=1000.0,
        window_len=256,
        payload=Features(features),
    )


async def replay_through(graph_doc, messages, ctx=None, settle=0.2):
    """Boot broker + pipeline, publish envelope messages, drain, stop."""
    broker = Broker(BrokerConfig())
    await broker.start()
    context = ctx or PipelineContext(broker=broker)
    context.broker = broker
    pipeline = Pipeline(load_graph(json.dumps(graph_doc)), context)
    await pipeline.start()
    for topic, msg in messages:
        await broker.publish_local(topic, encode_message(msg), qos=1)
    await pipeline.quiesce()
    await pipeline.stop()
    await broker.stop()
    return pipeline


class TestPipelineIdentity:
    def test_subscriber_to_logger_preserves_order(self, tmp_path):
        out = tmp_path / "log.ndjson"
        doc = {
            "stages": [
                {"id": "sub", "kind": "subscriber", "params": {"filter": "dsm/v1/p/n1/ch/features"}},
                {"id": "log", "kind": "logger", "params": {"path": str(out)}},
            ],
            "edges": [{"from": "sub.out", "to": "log.in"}],
        }
        msgs = [
            ("dsm/v1/p/n1/ch/features", envelope("ch", i, EPOCH + i * US, {"rms": float(i)}))
            for i in range(20)
        ]
        pipeline = run(replay_through(doc, msgs))
        lines = [json.loads(l) for l in out.read_text().splitlines()]
        assert [l["values"]["rms"] for l in lines] == [float(i) for i in range(20)]
        counters = pipeline.counters()
        assert counters["sub"]["emitted"] == 20
        assert counters["log"]["consumed"] == 20

    def test_stop_flushes_everything(self, tmp_path):
        out = tmp_path / "log.ndjson"
        doc = {
            "stages": [
                {"id": "sub", "kind": "subscriber", "params": {"filter": "dsm/v1/p/n1/ch/features"}},
                {"id": "th", "kind": "threshold", "params": {"field": "rms", "level": 5.0}},
                {"id": "log", "kind": "logger", "params": {"path": str(out)}},
            ],
            "edges": [
                {"from": "sub.out", "to": "th.in"},
                {"from": "th.out", "to": "log.in"},
            ],
        }
        msgs = [
            ("dsm/v1/p/n1/ch/features", envelope("ch", i, EPOCH + i * US, {"rms": float(i)}))
            for i in range(50)
        ]
        pipeline = run(replay_through(doc, msgs))
        counters = pipeline.counters()
        assert counters["th"]["consumed"] == counters["th"]["emitted"] == 50
        lines = out.read_text().splitlines()
        assert len(lines) == 50
        flags = [json.loads(l)["values"]["rms_alarm"] for l in lines]
        assert flags == [0.0] * 5 + [1.0] * 45

    def test_missing_model_fails_before_consuming(self, tmp_path):
        doc = linear_doc(model_path=str(tmp_path / "missing.json"))
        doc["stages"][2]["params"]["path"] = str(tmp_path / "out.ndjson")

        async def main():
            broker = Broker(BrokerConfig())
            await broker.start()
            pipeline = Pipeline(load_graph(json.dumps(doc)), PipelineContext(broker=broker))
            with pytest.raises(StartupFailure) as e:
                await pipeline.start()
            assert e.value.stage_id == "score"
            await broker.stop()

        run(main())


class TestScoreStage:
    def test_bias_only_risk(self, tmp_path):
        path = tmp_path / "m.json"
        make_model(path, names=("a",), w=(0.0,))
        stage = ScoreStage("score", {"model_path": str(path)}, None)
        run(stage.open())
        outs = run(stage.process("in", WireRecord(EPOCH, ("n1", "j"), {"a": 3.0})))
        port, rec = outs[0]
        assert port == "out"
        assert rec.values["risk"] == 0.5  # sigma(bias=0)
        assert rec.values["risk_alarm"] == 0.0
        assert rec.tags["model_version"] == "v1"

    def test_missing_feature_dead_letters(self, tmp_path):
        path = tmp_path / "m.json"
        make_model(path)
        stage = ScoreStage("score", {"model_path": str(path)}, None)
        run(stage.open())
        outs = run(stage.process("in", WireRecord(EPOCH, ("n1", "j"), {"a": 1.0})))
        port, rec = outs[0]
        assert port == "dead"
        assert "MissingFeature:b" in rec.tags["dead_letter_reason"]
        assert stage.counters["dead_lettered"] == 1

    def test_reload_swaps_atomically_per_record(self, tmp_path):
        path_v1 = tmp_path / "m1.json"
        path_v2 = tmp_path / "m2.json"
        make_model(path_v1, version="v1")
        make_model(path_v2, version="v2")
        stage = ScoreStage("score", {"model_path": str(path_v1)}, None)
        run(stage.open())

        async def replay():
            tagged = []
            for i in range(1000):
                if i == 500:
                    stage.reload_model(str(path_v2))
                outs = await stage.process(
                    "in", WireRecord(EPOCH + i, ("n1", "j"), {"a": 0.1, "b": 0.2})
                )
                tagged.append(outs[0][1].tags["model_version"])
            return tagged

        tagged = run(replay())
        assert tagged[:500] == ["v1"] * 500
        assert tagged[500:] == ["v2"] * 500

    def test_invalid_reload_keeps_old_version(self, tmp_path):
        path = tmp_path / "m.json"
        make_model(path, version="v1")
        bad = tmp_path / "bad.json"
        bad.write_text("{not json")
        stage = ScoreStage("score", {"model_path": str(path)}, None)
        run(stage.open())
        with pytest.raises(quality.InvalidModelFile):
            stage.reload_model(str(bad))
        assert stage.model.version == "v1"

    def test_replay_matches_offline_batch_scoring(self, tmp_path):
        path = tmp_path / "m.json"
        model = make_model(path, names=("a", "b"), w=(0.8, -0.3))
        stage = ScoreStage("score", {"model_path": str(path)}, None)
        run(stage.open())
        rng = np.random.default_rng(3)
        rows = rng.normal(size=(200, 2))

        async def replay():
            risks = []
            for i, row in enumerate(rows):
                outs = await stage.process(
                    "in", WireRecord(EPOCH + i, ("n1", "j"), {"a": row[0], "b": row[1]})
                )
                risks.append(outs[0][1].values["risk"])
            return risks

        risks = run(replay())
        offline = quality.predict_risk_batch(model, rows)
        assert risks == offline.tolist()  # bit-for-bit


# ---------------------------------------------------------------------------
# join stage: event-time semantics against an offline oracle
# ---------------------------------------------------------------------------

def offline_join_oracle(streams, tolerance_us, latch=()):
    """Replay the documented greedy rule on complete streams."""
    stage = JoinStage(
        "j",
        {
            "inputs": list(streams),
            "tolerance_us": tolerance_us,
            "latch": list(latch),
        },
        None,
    )
    # feed everything in global time order (event time), then flush
    items = []
    for port, records in streams.items():
        for r in records:
            items.append((port, r))
    items.sort(key=lambda pr: (pr[1].t_us, pr[0]))
    outs = []
    for port, r in items:
        stage.offer(port, r)
        outs.extend(stage.ready())
    loop = asyncio.new_event_loop()
    try:
        outs.extend(loop.run_until_complete(stage.flush()))
    finally:
        loop.close()
    return [r for _, r in outs], stage.counters


def rec(channel, t_us, **values):
    return WireRecord(t_us, ("n1", channel), dict(values))


class TestJoin:
    def params(self, tolerance=1000, latch=()):
        return {"inputs": ["x", "y"], "tolerance_us": tolerance, "latch": list(latch)}

    def test_identical_timestamps_merge_with_zero_drops(self):
        streams = {
            "x": [rec("chx", EPOCH + i * US, rms=float(i)) for i in range(10)],
            "y": [rec("chy", EPOCH + i * US, rms=float(i) * 2) for i in range(10)],
        }
        merged, counters = offline_join_oracle(streams, 1000)
        assert len(merged) == 10
        assert counters["dropped"] == 0
        assert merged[0].values == {"chx.rms": 0.0, "chy.rms": 0.0}
        assert merged[3].t_us == EPOCH + 3 * US

    def test_offset_exactly_tolerance_still_merges(self):
        tol = 5000
        streams = {
            "x": [rec("chx", EPOCH, rms=1.0)],
            "y": [rec("chy", EPOCH + tol, rms=2.0)],
        }
        merged, counters = offline_join_oracle(streams, tol)
        assert len(merged) == 1  # closed interval
        assert merged[0].t_us == EPOCH + tol // 2

    def test_unpaired_records_dropped_and_counted(self):
        streams = {
            "x": [rec("chx", EPOCH, rms=1.0), rec("chx", EPOCH + 10 * US, rms=2.0)],
            "y": [rec("chy", EPOCH + 10 * US, rms=3.0)],
        }
        merged, counters = offline_join_oracle(streams, 1000)
        assert len(merged) == 1
        assert counters["dropped"] == 1
        assert counters["consumed"] == counters["members"] + counters["dropped"]

    def test_latch_input_reused_across_merges(self):
        streams = {
            "x": [rec("chx", EPOCH + i * 250_000, rms=float(i)) for i in range(8)],  # 4 Hz
            "y": [rec("chy", EPOCH, mean=10.0), rec("chy", EPOCH + US, mean=20.0)],  # 1 Hz
        }
        merged, counters = offline_join_oracle(
            {"x": streams["x"], "y": streams["y"]}, 250_000, latch=("y",)
        )
        assert len(merged) == 8  # every fast record merges; slow context reused
        helds = [m.values["chy.mean"] for m in merged]
        assert helds[:4] == [10.0] * 4 and helds[4:] == [20.0] * 4

    def test_jittered_streams_equal_oracle_replay_under_any_arrival_order(self):
        rng = random.Random(5)
        streams = {
            "x": [rec("chx", EPOCH + i * US + rng.randint(-200, 200), v=float(i)) for i in range(30)],
            "y": [rec("chy", EPOCH + i * US + rng.randint(-200, 200), v=float(i)) for i in range(30)],
        }
        want, want_counters = offline_join_oracle(streams, 1000)

        # live pipeline: jittered ARRIVAL order must not change the output
        async def live(seed):
            stage = JoinStage("j", self.params(tolerance=1000), None)
            order_rng = random.Random(seed)
            pending = {k: list(v) for k, v in streams.items()}
            outs = []
            while any(pending.values()):
                port = stage.next_read()
                # the driver reads the lowest-progress input; simulate arrival
                # jitter by sometimes having other inputs arrive first
                if not pending[port]:
                    port = next(k for k, v in pending.items() if v)
                stage.offer(port, pending[port].pop(0))
                outs.extend(stage.ready())
            outs.extend(await stage.flush())
            return [r for _, r in outs], stage.counters

        for seed in (1, 2, 3):
            got, counters = run(live(seed))
            assert [g.to_doc() for g in got] == [w.to_doc() for w in want]
            assert counters["dropped"] == want_counters["dropped"]


class TestConservation:
    def test_consumed_equals_emitted_plus_drops_and_dead_letters(self, tmp_path):
        model_path = tmp_path / "m.json"
        make_model(model_path, names=("chx.rms", "chy.rms"), w=(1.0, 1.0))
        out = tmp_path / "log.ndjson"
        doc = {
            "stages": [
                {"id": "sx", "kind": "subscriber", "params": {"filter": "dsm/v1/p/n1/chx/features"}},
                {"id": "sy", "kind": "subscriber", "params": {"filter": "dsm/v1/p/n1/chy/features"}},
                {
                    "id": "join",
                    "kind": "join",
                    "params": {"inputs": ["x", "y"], "tolerance_us": 1000},
                },
                {"id": "score", "kind": "score", "params": {"model_path": str(model_path)}},
                {"id": "log", "kind": "logger", "params": {"path": str(out)}},
            ],
            "edges": [
                {"from": "sx.out", "to": "join.x"},
                {"from": "sy.out", "to": "join.y"},
                {"from": "join.out", "to": "score.in"},
                {"from": "score.out", "to": "log.in"},
            ],
        }
        rng = random.Random(9)
        messages = []
        for i in range(40):
            t = EPOCH + i * US
            messages.append(("dsm/v1/p/n1/chx/features", envelope("chx", i, t, {"rms": 1.0})))
            if rng.random() < 0.7:  # some y records missing -> join drops
                messages.append(("dsm/v1/p/n1/chy/features", envelope("chy", i, t, {"rms": 2.0})))
        pipeline = run(replay_through(doc, messages))
        c = pipeline.counters()
        # exact conservation at the join: every consumed record is a member
        # of a merge or counted dropped
        assert c["join"]["consumed"] == c["join"]["members"] + c["join"]["dropped"]
        # downstream 1-in/1-out stages conserve exactly
        assert c["score"]["consumed"] == c["score"]["emitted"] + c["score"]["dead_lettered"]
        assert c["log"]["consumed"] == c["join"]["emitted"] - c["score"]["dead_lettered"]

    def test_per_edge_fifo_on_randomized_replays(self, tmp_path):
        for seed in range(10):
            out = tmp_path / f"log{seed}.ndjson"
            doc = {
                "stages": [
                    {"id": "sub", "kind": "subscriber", "params": {"filter": "dsm/v1/p/n1/ch/features"}},
                    {"id": "th", "kind": "threshold", "params": {"field": "rms", "level": 0.5}},
                    {"id": "log", "kind": "logger", "params": {"path": str(out)}},
                ],
                "edges": [
                    {"from": "sub.out", "to": "th.in"},
                    {"from": "th.out", "to": "log.in"},
                ],
            }
            rng = random.Random(seed)
            msgs = [
                (
                    "dsm/v1/p/n1/ch/features",
                    envelope("ch", i, EPOCH + i * 1000, {"rms": rng.random()}),
                )
                for i in range(100)
            ]
            run(replay_through(doc, msgs))
            seqs = [int(json.loads(l)["tags"]["seq"]) for l in out.read_text().splitlines()]
            assert seqs == sorted(seqs) and len(seqs) == 100
