import json
import math

import numpy as np
import pytest

from dsm import dsp, sim
from dsm.sim import (
    Episode,
    MachineState,
    EnvState,
    OutOfBounds,
    ScenarioConfig,
    TrimmingSimulator,
    ground_truth_risk,
    run_scenario,
)


def sigma(z):
    return 1.0 / (1.0 + math.exp(-z))


class TestGroundTruthRisk:
    # independent evaluation of the documented formula
    @staticmethod
    def oracle(feed, wear, rpm, severity, airflow, c=(-6.0, 0.15, 3.0, 2.0, 4.0, 0.5)):
        z = c[0] + c[1] * feed + c[2] * wear + c[3] * feed / (rpm / 1000.0) + c[4] * severity - c[5] * airflow
        return sigma(z)

    def test_new_tool_min_feed_is_low_risk(self):
        state = MachineState(spindle_rpm=12000, feed_mm_s=1.0, tool_wear=0.0, vacuum_airflow_m_s=8.0)
        p = ground_truth_risk(state, EnvState(), 0.0, ScenarioConfig().risk_coefficients)
        assert p == pytest.approx(self.oracle(1.0, 0.0, 12000, 0.0, 8.0), rel=1e-12)
        assert p < 0.05

    def test_severe_episode_worn_tool_is_high_risk(self):
        state = MachineState(spindle_rpm=12000, feed_mm_s=10.0, tool_wear=1.0, vacuum_airflow_m_s=2.0)
        p = ground_truth_risk(state, EnvState(), 1.0, ScenarioConfig().risk_coefficients)
        assert p == pytest.approx(self.oracle(10.0, 1.0, 12000, 1.0, 2.0), rel=1e-12)
        assert p > 0.5

    def test_monotone_in_tool_wear(self):
        cfg = ScenarioConfig()
        risks = []
        for wear in np.linspace(0, 1, 11):
            state = MachineState(spindle_rpm=12000, feed_mm_s=10.0, tool_wear=float(wear), vacuum_airflow_m_s=8.0)
            risks.append(ground_truth_risk(state, EnvState(), 0.0, cfg.risk_coefficients))
        assert all(b >= a for a, b in zip(risks, risks[1:]))


class TestMachineState:
    def test_bounds_enforced(self):
        with pytest.raises(OutOfBounds):
            MachineState(spindle_rpm=30000)
        with pytest.raises(OutOfBounds):
            MachineState(feed_mm_s=0.5)


class TestStep:
    def test_dominant_frequency_tracks_rpm(self):
        cfg = ScenarioConfig(seed=3, vib_noise_sigma=0.02)
        s = TrimmingSimulator(cfg)
        tick = s.step()
        vib_x = next(b for b in tick.batches if b.channel == "vib_x")
        window = vib_x.samples[: cfg.vib_window]
        got = dsp.dominant_frequency(window, cfg.vib_fs_hz)
        f_r = cfg.spindle_rpm / 60.0  # 12000 rpm -> 200 Hz
        assert abs(got - f_r) <= cfg.vib_fs_hz / cfg.vib_window

    def test_noise_free_rms_matches_analytic(self):
        cfg = ScenarioConfig(
            seed=1, vib_noise_sigma=0.0, feed_mm_s=1.0, tool_wear=0.0, spindle_rpm=12000.0
        )
        s = TrimmingSimulator(cfg)
        tick = s.step()
        vib_x = next(b for b in tick.batches if b.channel == "vib_x")
        # analytic rms of A*(sin + 0.3 sin(2.)) over integer periods: A*sqrt(1.09/2)
        want = sim.vibration_rms(cfg, 1.0, 0.0, axis=0)
        got = float(np.sqrt(np.mean(vib_x.samples**2)))
        assert got == pytest.approx(want, abs=1e-3)

    def test_same_seed_bit_identical(self):
        cfg = ScenarioConfig(seed=77, duration_s=3)
        rows_a, _ = run_scenario(cfg)
        rows_b, _ = run_scenario(cfg)
        assert json.dumps(rows_a) == json.dumps(rows_b)

    def test_airflow_leak_during_episode(self):
        cfg = ScenarioConfig(
            seed=5, duration_s=4, defect_episodes=[Episode(2.0, 4.0, 1.0)], airflow_noise_sigma=0.0
        )
        s = TrimmingSimulator(cfg)
        flows = []
        for _ in range(4):
            tick = s.step()
            air = next(b for b in tick.batches if b.channel == "air_speed")
            flows.append(float(air.samples.mean()))
        assert flows[0] == pytest.approx(cfg.airflow_nominal_m_s)
        assert flows[2] == pytest.approx(cfg.airflow_nominal_m_s - cfg.airflow_leak_per_severity)

    def test_tool_wear_non_decreasing(self):
        cfg = ScenarioConfig(seed=9, duration_s=20, feed_mm_s=40.0)
        s = TrimmingSimulator(cfg)
        wears = []
        for _ in range(20):
            s.step()
            wears.append(s.state.tool_wear)
        assert all(b >= a for a, b in zip(wears, wears[1:]))
        assert wears[-1] > 0


class TestCommands:
    def test_command_applies_at_next_step(self):
        s = TrimmingSimulator(ScenarioConfig(seed=2, duration_s=5))
        ok, _ = s.apply_command({"feed_mm_s": 5.0})
        assert ok
        assert s.state.feed_mm_s == 10.0  # unchanged until the boundary
        tick = s.step()
        assert s.state.feed_mm_s == 5.0
        assert tick.commands_applied

    def test_out_of_bounds_rejected(self):
        s = TrimmingSimulator(ScenarioConfig(seed=2))
        ok, reason = s.apply_command({"spindle_rpm": 30000.0})
        assert not ok and "spindle_rpm" in reason
        s.step()
        assert s.state.spindle_rpm == 12000.0


class TestRunScenario:
    def test_expected_record_counts(self):
        cfg = ScenarioConfig(seed=4, duration_s=10)
        rows, _ = run_scenario(cfg)
        labels = [r for r in rows if r["kind"] == "label"]
        vib = [r for r in rows if r["kind"] == "samples" and r["channel"] == "vib_x"]
        amb = [r for r in rows if r["kind"] == "samples" and r["channel"] == "amb_temp"]
        assert len(labels) == 10
        assert len(amb) == 10
        total_vib = sum(len(r["values"]) for r in vib)
        assert total_vib == 10 * 1000  # 39 full 256-sample windows plus remainder

    def test_zero_duration_valid(self, tmp_path):
        cfg = ScenarioConfig(seed=1, duration_s=0)
        path = tmp_path / "session.ndjson"
        rows, _ = run_scenario(cfg, out_path=path)
        assert len(rows) == 1 and rows[0]["kind"] == "meta"
        assert sim.read_session(path) == rows

    def test_two_runs_identical_files(self, tmp_path):
        cfg = ScenarioConfig(seed=11, duration_s=5)
        run_scenario(cfg, out_path=tmp_path / "a.ndjson")
        run_scenario(cfg, out_path=tmp_path / "b.ndjson")
        assert (tmp_path / "a.ndjson").read_bytes() == (tmp_path / "b.ndjson").read_bytes()


class TestScenarioIO:
    def test_round_trip(self, tmp_path):
        cfg = ScenarioConfig(seed=8, duration_s=30, defect_episodes=[Episode(10.0, 12.0, 0.7)])
        sim.save_scenario(cfg, tmp_path / "scenario.json")
        back = sim.load_scenario(tmp_path / "scenario.json")
        assert back == cfg


class TestSurrogate:
    def test_candidate_overrides_machine_features(self):
        cfg = ScenarioConfig()
        observed = {
            "vib_x.rms": 0.9,
            "machine_status.spindle_rpm": 12000.0,
            "machine_status.feed_mm_s": 30.0,
            "machine_status.tool_wear": 0.4,
            "air_speed.mean": 2.0,
        }
        out = sim.surrogate_features(cfg, observed, 18000.0, 5.0)
        assert out["machine_status.spindle_rpm"] == 18000.0
        assert out["machine_status.feed_mm_s"] == 5.0
        assert out["air_speed.mean"] == 2.0  # untouched context
        assert out["vib_x.rms"] == pytest.approx(sim.vibration_rms(cfg, 5.0, 0.4, axis=0))
        assert out["vib_x.rms"] < 0.9
