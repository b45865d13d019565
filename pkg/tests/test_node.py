import asyncio
import json

import numpy as np
import pytest

from dsm import core, dsp, node as node_mod
from dsm.broker.client import MqttClient
from dsm.broker.server import Broker, BrokerConfig
from dsm.core import ChannelDescriptor, Quantity, build_topic, decode_message
from dsm.node import (
    ChannelSetup,
    ClockModel,
    EnergyModel,
    NodeConfig,
    NonCausalTimestamps,
    SensorNode,
    apply_mode,
    energy_cost,
    sync_exchange,
)
from dsm.sim import SampleBatch

US = 1_000_000
EPOCH = 1_600_000_000 * US


def run(coro):
    return asyncio.run(coro)


class TestApplyMode:
    def window(self, n=256):
        t = np.arange(n) / 1000.0
        return np.sin(2 * np.pi * 50 * t) + 0.1

    def test_mode1_full_window(self):
        payload = apply_mode(self.window(), 1)
        assert isinstance(payload, core.Raw)
        assert len(payload.samples) == 256

    def test_mode2_seven_features(self):
        payload = apply_mode(self.window(), 2, fs_hz=1000.0)
        assert isinstance(payload, core.Features)
        assert len(payload.values) == 7
        assert set(payload.values) == set(dsp.FEATURE_NAMES) | {"dom_freq"}

    def test_mode3_decimated_plus_shape_features(self):
        payload = apply_mode(self.window(), 3, decimation_factor=8, fs_hz=1000.0)
        assert isinstance(payload, core.Hybrid)
        assert len(payload.samples) == 32  # count check against the decimate oracle
        assert np.allclose(
            payload.samples, self.window().reshape(32, 8).mean(axis=1), rtol=1e-12
        )
        # spectral work is deferred to the edge in the hybrid split
        assert set(payload.features) == set(dsp.FEATURE_NAMES)

    def test_value_count_ordering(self):
        # payload value counts: mode2 < mode3 < mode1 for window >= 16, f >= 2
        for n, f in [(16, 2), (64, 4), (256, 8)]:
            w = self.window(n)
            c1 = len(apply_mode(w, 1).samples)
            c2 = len(apply_mode(w, 2, fs_hz=1000.0).values)
            p3 = apply_mode(w, 3, decimation_factor=f, fs_hz=1000.0)
            c3 = len(p3.samples) + len(p3.features)
            assert c2 < c3 < c1


class TestSyncExchange:
    def test_stated_example(self):
        offset, delay = sync_exchange(100, 110, 111, 105)
        assert offset == 8
        assert delay == 4

    def test_symmetric_delay_recovers_offset_exactly(self):
        theta, d = -12345, 700
        t_send = 1_000_000
        t1 = t_send + theta
        t2 = t_send + d
        t3 = t2 + 10
        t4 = (t3 + d) + theta
        offset, delay = sync_exchange(t1, t2, t3, t4)
        assert offset == -theta
        assert delay == 2 * d

    def test_asymmetric_error_is_half_difference(self):
        d_up, d_down = 6, 2
        t_send = 1000
        t1, t2 = t_send, t_send + d_up
        t3 = t2
        t4 = t3 + d_down
        offset, _ = sync_exchange(t1, t2, t3, t4)
        assert offset == (d_up - d_down) // 2 == 2

    def test_non_causal_rejected(self):
        with pytest.raises(NonCausalTimestamps):
            sync_exchange(100, 110, 105, 99)


class TestEnergy:
    def test_zero_cost_model(self):
        model = EnergyModel(0.0, 0.0, 0.0, 1.0)
        assert energy_cost(1, 256, 5000, model) == (0.0, 0.0, 0.0)

    def test_mode1_no_feature_cost(self):
        model = EnergyModel()
        cpu1, radio1, _ = energy_cost(1, 256, 5000, model)
        assert cpu1 == 256.0

    def test_mode2_vs_mode1_tradeoff(self):
        # mode 2 wins overall iff its radio savings exceed the 350-unit feature cost
        model = EnergyModel(cost_per_sample_cpu=1.0, cost_per_feature_cpu=50.0, cost_per_byte_radio=2.0)
        t = np.arange(256) / 1000.0
        window = np.sin(2 * np.pi * 50 * t)

        def wire_bytes(mode, factor=8):
            payload = apply_mode(window, mode, decimation_factor=factor, fs_hz=1000.0)
            msg = core.MeasurementMessage(
                "n1", "vib_x", 0, EPOCH, mode, "m/s²", 1000.0, 256, payload
            )
            return len(core.encode_message(msg))

        b1, b2 = wire_bytes(1), wire_bytes(2)
        _, _, total1 = energy_cost(1, 256, b1, model)
        _, _, total2 = energy_cost(2, 256, b2, model)
        savings = 2.0 * (b1 - b2)
        assert (total2 < total1) == (savings > 350.0)
        assert total2 < total1  # with 256-sample windows the savings dominate

    def test_cpu_component_ordering_mode2_gt_mode3_gt_mode1(self):
        model = EnergyModel()
        cpu = {m: energy_cost(m, 256, 1000, model)[0] for m in (1, 2, 3)}
        assert cpu[2] > cpu[3] > cpu[1]


def make_node_config(port, fs=256.0, window=256, mode=2, sync_period_s=0.0, **over):
    topic = build_topic("plant1", "n1", "vib_x", "features")
    desc = ChannelDescriptor(
        topic=topic,
        quantity=Quantity.of("acceleration"),
        range_min=-50.0,
        range_max=50.0,
        fs_hz=fs,
        window=window,
        mode=mode,
    )
    setup = ChannelSetup(descriptor=desc, decimation_factor=8)
    defaults = dict(
        node_id="n1",
        site="plant1",
        channels=[setup],
        broker_host="127.0.0.1",
        broker_port=port,
        sync_period_s=sync_period_s,
    )
    defaults.update(over)
    return NodeConfig(**defaults)


def feed_seconds(config, node, seconds, fs=256.0, t0=EPOCH):
    batches = []
    for s in range(seconds):
        t = (np.arange(int(fs)) + s * int(fs)) / fs
        samples = np.sin(2 * np.pi * 32 * t)
        batches.append(SampleBatch("vib_x", t0 + s * US, fs, samples))
    return batches


class TestNodeLoop:
    def test_one_second_one_message(self):
        async def main():
            broker = Broker(BrokerConfig())
            await broker.start()
            local = broker.subscribe_local("dsm/v1/plant1/n1/vib_x/#")
            cfg = make_node_config(broker.port)
            n = SensorNode(cfg, clock_us=lambda: EPOCH)
            await n.start()
            runner = asyncio.create_task(n.run())
            for b in feed_seconds(cfg, n, 1):
                await n.feed.put(b)
            await n.feed.put(None)
            await runner
            topic, payload = await asyncio.wait_for(local.get(), 2)
            msg = decode_message(payload)
            assert msg.seq == 0 and msg.mode == 2
            assert local.queue.empty()
            await n.stop()
            await broker.stop()

        run(main())

    def test_ten_seconds_ten_messages_spaced_one_second(self):
        async def main():
            broker = Broker(BrokerConfig())
            await broker.start()
            local = broker.subscribe_local("dsm/v1/plant1/n1/vib_x/#")
            cfg = make_node_config(broker.port)
            n = SensorNode(cfg, clock_us=lambda: EPOCH)
            await n.start()
            runner = asyncio.create_task(n.run())
            for b in feed_seconds(cfg, n, 10):
                await n.feed.put(b)
            await n.feed.put(None)
            await runner
            msgs = []
            for _ in range(10):
                _, payload = await asyncio.wait_for(local.get(), 2)
                msgs.append(decode_message(payload))
            assert [m.seq for m in msgs] == list(range(10))
            deltas = np.diff([m.t_acq_us for m in msgs])
            assert (deltas == US).all()  # zero drift in this config
            await n.stop()
            await broker.stop()

        run(main())

    def test_broker_outage_buffers_then_delivers_in_order(self):
        async def main():
            broker = Broker(BrokerConfig())
            await broker.start()
            port = broker.port
            cfg = make_node_config(port)
            n = SensorNode(cfg, clock_us=lambda: EPOCH)
            await n.start()
            runner = asyncio.create_task(n.run())
            await broker.stop()  # outage begins

            for b in feed_seconds(cfg, n, 3):
                await n.feed.put(b)
            await n.drain()
            assert len(n._outbox) == 3

            broker2 = Broker(BrokerConfig(port=port))
            await broker2.start()
            local = broker2.subscribe_local("dsm/v1/plant1/n1/vib_x/#")
            for b in feed_seconds(cfg, n, 1):
                await n.feed.put(b)
            await n.feed.put(None)
            await runner

            msgs = []
            for _ in range(4):
                _, payload = await asyncio.wait_for(local.get(), 2)
                msgs.append(decode_message(payload))
            assert [m.seq for m in msgs] == [0, 1, 2, 3]
            await n.stop()
            await broker2.stop()

        run(main())

    def test_adc_path_quantizes_samples(self):
        async def main():
            broker = Broker(BrokerConfig())
            await broker.start()
            local = broker.subscribe_local("dsm/v1/plant1/n1/vib_x/#")
            cfg = make_node_config(broker.port, mode=1)
            spec = dsp.AdcSpec(bits=12, v_min=0.0, v_max=3.3)
            cal = dsp.Calibration(gain=100.0 / 3.3, offset=-50.0)
            cfg.channels[0].adc = spec
            cfg.channels[0].calibration = cal
            n = SensorNode(cfg, clock_us=lambda: EPOCH)
            await n.start()
            runner = asyncio.create_task(n.run())
            for b in feed_seconds(cfg, n, 1):
                await n.feed.put(b)
            await n.feed.put(None)
            await runner
            _, payload = await asyncio.wait_for(local.get(), 2)
            msg = decode_message(payload)
            # every sample sits on the quantization grid
            lsb = (3.3 / 4095) * (100.0 / 3.3)
            for v in msg.payload.samples:
                code = (v + 50.0) / lsb
                assert abs(code - round(code)) < 1e-6
            await n.stop()
            await broker.stop()

        run(main())


class TestNodeCommands:
    async def _setup(self, broker):
        local = broker.subscribe_local("dsm/v1/plant1/n1/#")
        cfg = make_node_config(broker.port)
        n = SensorNode(cfg, clock_us=lambda: EPOCH)
        await n.start()
        runner = asyncio.create_task(n.run())
        ctl = MqttClient("127.0.0.1", broker.port, "ctl")
        await ctl.connect()
        events = await ctl.subscribe("dsm/v1/plant1/n1/_node/events", qos=1)
        return local, cfg, n, runner, ctl, events

    def test_set_mode_applies_between_windows(self):
        async def main():
            broker = Broker(BrokerConfig())
            await broker.start()
            local, cfg, n, runner, ctl, events = await self._setup(broker)

            for b in feed_seconds(cfg, n, 1):
                await n.feed.put(b)
            await n.drain()
            await ctl.publish(
                "dsm/v1/plant1/n1/_node/cmd",
                json.dumps({"cmd": "set_mode", "args": {"mode": 1}, "req_id": "r1"}).encode(),
                qos=1,
            )
            await asyncio.sleep(0.05)  # let the command loop queue it
            for b in feed_seconds(cfg, n, 1):
                await n.feed.put(b)
            ack = json.loads((await asyncio.wait_for(events.get(), 2))[1])
            assert ack["ok"] and ack["req_id"] == "r1"
            await n.feed.put(None)
            await runner

            msgs = []
            while not local.queue.empty():
                topic, payload = local.queue.get_nowait()
                if topic.endswith(("features", "raw")):
                    msgs.append(decode_message(payload))
            assert [m.mode for m in msgs] == [2, 1]
            # no message ever disagrees with its payload shape (decode validates)
            await ctl.disconnect()
            await n.stop()
            await broker.stop()

        run(main())

    def test_ping_returns_digest(self):
        async def main():
            broker = Broker(BrokerConfig())
            await broker.start()
            local, cfg, n, runner, ctl, events = await self._setup(broker)
            await ctl.publish(
                "dsm/v1/plant1/n1/_node/cmd",
                json.dumps({"cmd": "ping", "req_id": "p1"}).encode(),
                qos=1,
            )
            ack = json.loads((await asyncio.wait_for(events.get(), 2))[1])
            assert ack["ok"] and ack["node_id"] == "n1"
            assert ack["config_digest"] == cfg.digest()
            await n.feed.put(None)
            await runner
            await ctl.disconnect()
            await n.stop()
            await broker.stop()

        run(main())

    def test_non_dividing_window_rejected(self):
        async def main():
            broker = Broker(BrokerConfig())
            await broker.start()
            local, cfg, n, runner, ctl, events = await self._setup(broker)
            await ctl.publish(
                "dsm/v1/plant1/n1/_node/cmd",
                json.dumps({"cmd": "set_window", "args": {"window": 250}, "req_id": "w1"}).encode(),
                qos=1,
            )
            # command applies between windows: push a batch through
            for b in feed_seconds(cfg, n, 1):
                await n.feed.put(b)
            ack = json.loads((await asyncio.wait_for(events.get(), 2))[1])
            assert not ack["ok"] and "250" in ack["reason"]
            assert n.channels["vib_x"].window == 256
            await n.feed.put(None)
            await runner
            await ctl.disconnect()
            await n.stop()
            await broker.stop()

        run(main())

    def test_unknown_command_nacked(self):
        async def main():
            broker = Broker(BrokerConfig())
            await broker.start()
            local, cfg, n, runner, ctl, events = await self._setup(broker)
            await ctl.publish(
                "dsm/v1/plant1/n1/_node/cmd",
                json.dumps({"cmd": "reboot", "req_id": "x"}).encode(),
                qos=1,
            )
            for b in feed_seconds(cfg, n, 1):
                await n.feed.put(b)
            ack = json.loads((await asyncio.wait_for(events.get(), 2))[1])
            assert not ack["ok"]
            await n.feed.put(None)
            await runner
            await ctl.disconnect()
            await n.stop()
            await broker.stop()

        run(main())


class TestNodeSync:
    def test_offset_corrected_within_a_microsecond(self):
        async def main():
            now = {"t": EPOCH}
            broker = Broker(BrokerConfig(), clock_us=lambda: now["t"])
            await broker.start()
            cfg = make_node_config(broker.port, clock=ClockModel(true_offset_us=250_000))
            n = SensorNode(cfg, clock_us=lambda: now["t"])
            await n.start()  # start performs one sync exchange
            assert n.sync_history, "sync did not complete"
            corrected = cfg.clock.local_us(now["t"], n.boot_true_us)
            assert abs(corrected - now["t"]) <= 1
            await n.stop()
            await broker.stop()

        run(main())
