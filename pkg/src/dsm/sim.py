"""Simulated trimming machine, environment, and sensing channels.

Everything sensed in the desk-scale rig comes out of this module: tri-axial
vibration of the work part, vacuum airflow speed and temperature, ambient
conditions, machine status, and the ground-truth defect process. The
response functions and their coefficients are invented plant truth, kept in
one place (ScenarioConfig) so experiments can check model recovery against
them. A scenario is fully determined by its config and seed: same inputs,
same bytes out.

Plant response functions (all constants live in ScenarioConfig):
  vibration   x(t) = A*sin(phi) + 0.3*A*sin(2*phi), phi' = 2*pi*(rpm/60)
              A = a0 * (1 + a1*feed_mm_s) * (1 + a2*tool_wear), per-axis scale
  airflow     speed = nominal - leak_per_severity*severity (+noise, >= 0)
              temp  = temp_base + temp_feed_coeff*feed_mm_s (+noise)
  ambient     bounded random walk (reflecting at the configured bounds)
  risk        p = sigmoid(c0 + c1*feed + c2*wear + c3*feed/(rpm/1000)
                          + c4*severity - c5*airflow)
  defects     one Bernoulli(p) draw per second
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, asdict

import numpy as np

from .errors import DsmError

US = 1_000_000

# Virtual epoch all scenario timestamps start from (fixed date, not wall clock).
DEFAULT_EPOCH_US = 1_600_000_000 * US


class OutOfBounds(DsmError):
    def __init__(self, param, message=""):
        self.param = param
        super().__init__(f"parameter '{param}' out of bounds" + (f": {message}" if message else ""))


RPM_MIN, RPM_MAX = 3000.0, 24000.0
FEED_MIN, FEED_MAX = 1.0, 50.0


@dataclass
class MachineState:
    spindle_rpm: float = 12000.0
    feed_mm_s: float = 10.0
    tool_wear: float = 0.0
    vacuum_airflow_m_s: float = 8.0
    cutting: bool = True

    def __post_init__(self):
        if not (RPM_MIN <= self.spindle_rpm <= RPM_MAX):
            raise OutOfBounds("spindle_rpm", f"{self.spindle_rpm} not in [{RPM_MIN}, {RPM_MAX}]")
        if not (FEED_MIN <= self.feed_mm_s <= FEED_MAX):
            raise OutOfBounds("feed_mm_s", f"{self.feed_mm_s} not in [{FEED_MIN}, {FEED_MAX}]")
        if not (0.0 <= self.tool_wear <= 1.0):
            raise OutOfBounds("tool_wear")
        if self.vacuum_airflow_m_s < 0:
            raise OutOfBounds("vacuum_airflow_m_s")


@dataclass
class EnvState:
    temp_c: float = 22.0
    humidity_pct: float = 45.0
    pressure_hpa: float = 1010.0


@dataclass
class Episode:
    t_start_s: float
    t_end_s: float
    severity: float

    def active(self, t_s: float) -> float:
        return self.severity if self.t_start_s <= t_s < self.t_end_s else 0.0


@dataclass
class ScenarioConfig:
    name: str = "default"
    duration_s: int = 60
    seed: int = 1
    start_epoch_us: int = DEFAULT_EPOCH_US
    rng_algorithm: str = "pcg64"  # numpy PCG64; named so other tools can reproduce streams

    # initial machine / environment state
    spindle_rpm: float = 12000.0
    feed_mm_s: float = 10.0
    tool_wear: float = 0.0
    temp_c: float = 22.0
    humidity_pct: float = 45.0
    pressure_hpa: float = 1010.0

    # ground-truth risk coefficients (c0..c5); see module docstring
    risk_coefficients: tuple = (-6.0, 0.15, 3.0, 2.0, 4.0, 0.5)

    # vibration plant constants
    vib_a0: float = 0.5
    vib_a1: float = 0.05
    vib_a2: float = 2.0
    vib_noise_sigma: float = 0.05
    vib_axis_scales: tuple = (1.0, 0.7, 0.5)

    # vacuum airflow plant constants
    airflow_nominal_m_s: float = 8.0
    airflow_leak_per_severity: float = 6.0
    airflow_noise_sigma: float = 0.1
    airflow_temp_base_c: float = 25.0
    airflow_temp_feed_coeff: float = 0.3
    airflow_temp_noise_sigma: float = 0.05

    # ambient random-walk step sigmas and reflecting bounds
    ambient_walk_sigma: tuple = (0.02, 0.1, 0.05)
    ambient_temp_bounds: tuple = (15.0, 35.0)
    ambient_humidity_bounds: tuple = (20.0, 80.0)
    ambient_pressure_bounds: tuple = (980.0, 1040.0)

    # tool wear growth per second at feed=10, rpm=12000, while cutting
    wear_rate_per_s: float = 8e-4

    # channel sampling: (fs_hz, window)
    vib_fs_hz: float = 1000.0
    vib_window: int = 256
    airflow_fs_hz: float = 10.0
    airflow_window: int = 10
    ambient_fs_hz: float = 1.0
    ambient_window: int = 1

    defect_episodes: list = field(default_factory=list)

    def __post_init__(self):
        if self.duration_s < 0:
            raise OutOfBounds("duration_s")
        if self.rng_algorithm != "pcg64":
            raise OutOfBounds("rng_algorithm", "only pcg64 is supported")
        self.defect_episodes = [
            e if isinstance(e, Episode) else Episode(**e) for e in self.defect_episodes
        ]
        for e in self.defect_episodes:
            if not (0 <= e.t_start_s <= e.t_end_s <= self.duration_s):
                raise OutOfBounds("defect_episodes", f"episode [{e.t_start_s}, {e.t_end_s}) outside run")

    @property
    def session_id(self) -> str:
        return f"{self.name}-seed{self.seed}"

    def to_doc(self) -> dict:
        doc = asdict(self)
        doc["risk_coefficients"] = list(self.risk_coefficients)
        doc["vib_axis_scales"] = list(self.vib_axis_scales)
        doc["ambient_walk_sigma"] = list(self.ambient_walk_sigma)
        doc["ambient_temp_bounds"] = list(self.ambient_temp_bounds)
        doc["ambient_humidity_bounds"] = list(self.ambient_humidity_bounds)
        doc["ambient_pressure_bounds"] = list(self.ambient_pressure_bounds)
        return doc

    @classmethod
    def from_doc(cls, doc: dict) -> "ScenarioConfig":
        kwargs = dict(doc)
        for key in (
            "risk_coefficients",
            "vib_axis_scales",
            "ambient_walk_sigma",
            "ambient_temp_bounds",
            "ambient_humidity_bounds",
            "ambient_pressure_bounds",
        ):
            if key in kwargs:
                kwargs[key] = tuple(kwargs[key])
        return cls(**kwargs)


def load_scenario(path) -> ScenarioConfig:
    with open(path, "r", encoding="utf-8") as f:
        return ScenarioConfig.from_doc(json.load(f))


def save_scenario(config: ScenarioConfig, path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(config.to_doc(), f, indent=2, sort_keys=True)
        f.write("\n")


def sigmoid(z: float) -> float:
    return 1.0 / (1.0 + math.exp(-z))


def ground_truth_risk(state: MachineState, env: EnvState, severity: float, coefficients) -> float:
    """Plant-truth defect probability for the current second."""
    c0, c1, c2, c3, c4, c5 = coefficients
    z = (
        c0
        + c1 * state.feed_mm_s
        + c2 * state.tool_wear
        + c3 * state.feed_mm_s / (state.spindle_rpm / 1000.0)
        + c4 * severity
        - c5 * state.vacuum_airflow_m_s
    )
    return sigmoid(z)


def vibration_amplitude(config: ScenarioConfig, feed_mm_s: float, tool_wear: float) -> float:
    return config.vib_a0 * (1.0 + config.vib_a1 * feed_mm_s) * (1.0 + config.vib_a2 * tool_wear)


def vibration_rms(config: ScenarioConfig, feed_mm_s: float, tool_wear: float, axis: int = 0) -> float:
    """Analytic noise-free rms of the two-harmonic vibration signal."""
    a = vibration_amplitude(config, feed_mm_s, tool_wear) * config.vib_axis_scales[axis]
    return a * math.sqrt((1.0 + 0.3**2) / 2.0)


@dataclass
class SampleBatch:
    """Samples for one channel covering [t0_us, t0_us + n/fs)."""

    channel: str
    t0_us: int
    fs_hz: float
    samples: np.ndarray


# Channel names (also the topic channel tokens).
VIB_CHANNELS = ("vib_x", "vib_y", "vib_z")
CH_AIR_SPEED = "air_speed"
CH_AIR_TEMP = "air_temp"
CH_AMB_TEMP = "amb_temp"
CH_AMB_HUM = "amb_hum"
CH_AMB_PRESS = "amb_press"
CH_MACHINE = "machine_status"
CH_LABEL = "quality_label"


class TrimmingSimulator:
    """Deterministic plant: advance in whole-second steps, emit channel batches.

    Commands are queued by apply_command and take effect at the next step
    boundary, never mid-window. All stochastic draws come from one seeded
    generator in a fixed order, so (config, seed) determines every byte.
    """

    def __init__(self, config: ScenarioConfig):
        self.config = config
        self.rng = np.random.default_rng(np.random.PCG64(config.seed))
        self.state = MachineState(
            spindle_rpm=config.spindle_rpm,
            feed_mm_s=config.feed_mm_s,
            tool_wear=config.tool_wear,
            vacuum_airflow_m_s=config.airflow_nominal_m_s,
        )
        self.env = EnvState(config.temp_c, config.humidity_pct, config.pressure_hpa)
        self.t_s = 0
        self._phase = 0.0
        self._pending_commands = []
        self.command_log = []

    @property
    def t_us(self) -> int:
        return self.config.start_epoch_us + self.t_s * US

    def severity_at(self, t_s: float) -> float:
        return max((e.active(t_s) for e in self.config.defect_episodes), default=0.0)

    def apply_command(self, params: dict, origin: str = "operator"):
        """Queue a parameter change; applied atomically at the next step boundary.

        Returns (ok, reason). Out-of-bounds values leave state unchanged.
        """
        rpm = params.get("spindle_rpm", self.state.spindle_rpm)
        feed = params.get("feed_mm_s", self.state.feed_mm_s)
        if not (RPM_MIN <= rpm <= RPM_MAX):
            return False, f"spindle_rpm {rpm} not in [{RPM_MIN:g}, {RPM_MAX:g}]"
        if not (FEED_MIN <= feed <= FEED_MAX):
            return False, f"feed_mm_s {feed} not in [{FEED_MIN:g}, {FEED_MAX:g}]"
        self._pending_commands.append((float(rpm), float(feed), origin))
        return True, ""

    def _drain_commands(self):
        applied = []
        for rpm, feed, origin in self._pending_commands:
            self.state.spindle_rpm = rpm
            self.state.feed_mm_s = feed
            entry = {"t_us": self.t_us, "spindle_rpm": rpm, "feed_mm_s": feed, "origin": origin}
            self.command_log.append(entry)
            applied.append(entry)
        self._pending_commands.clear()
        return applied

    def ground_truth_risk(self) -> float:
        return ground_truth_risk(
            self.state, self.env, self.severity_at(self.t_s), self.config.risk_coefficients
        )

    def step(self):
        """Advance one second of virtual time; return the tick output.

        Draw order (fixed for reproducibility): vibration noise per axis,
        airflow speed noise, airflow temperature noise, ambient walk, label.
        """
        cfg = self.config
        applied = self._drain_commands()
        t0_us = self.t_us
        severity = self.severity_at(self.t_s)

        # update plant-held values for this second
        self.state.vacuum_airflow_m_s = max(
            0.0, cfg.airflow_nominal_m_s - cfg.airflow_leak_per_severity * severity
        )

        batches = []

        # vibration: phase-continuous two-harmonic tone per axis
        n_vib = int(round(cfg.vib_fs_hz))
        f_r = self.state.spindle_rpm / 60.0
        k = np.arange(n_vib)
        phi = self._phase + 2.0 * math.pi * f_r * k / cfg.vib_fs_hz
        amp = vibration_amplitude(cfg, self.state.feed_mm_s, self.state.tool_wear)
        clean = amp * (np.sin(phi) + 0.3 * np.sin(2.0 * phi))
        for axis, channel in enumerate(VIB_CHANNELS):
            noise = self.rng.normal(0.0, cfg.vib_noise_sigma, size=n_vib) if cfg.vib_noise_sigma else 0.0
            samples = cfg.vib_axis_scales[axis] * clean + noise
            batches.append(SampleBatch(channel, t0_us, cfg.vib_fs_hz, samples))
        self._phase = math.fmod(self._phase + 2.0 * math.pi * f_r, 2.0 * math.pi)

        # vacuum airflow speed and temperature
        n_air = int(round(cfg.airflow_fs_hz))
        noise = self.rng.normal(0.0, cfg.airflow_noise_sigma, size=n_air) if cfg.airflow_noise_sigma else 0.0
        speed = np.maximum(0.0, self.state.vacuum_airflow_m_s + noise)
        batches.append(SampleBatch(CH_AIR_SPEED, t0_us, cfg.airflow_fs_hz, speed))
        t_noise = (
            self.rng.normal(0.0, cfg.airflow_temp_noise_sigma, size=n_air)
            if cfg.airflow_temp_noise_sigma
            else 0.0
        )
        air_temp = cfg.airflow_temp_base_c + cfg.airflow_temp_feed_coeff * self.state.feed_mm_s + t_noise
        batches.append(SampleBatch(CH_AIR_TEMP, t0_us, cfg.airflow_fs_hz, np.asarray(air_temp, dtype=float)))

        # ambient: one reflecting random-walk step per second
        dt_walk = self.rng.normal(0.0, 1.0, size=3)
        self.env.temp_c = _reflect(self.env.temp_c + cfg.ambient_walk_sigma[0] * dt_walk[0], *cfg.ambient_temp_bounds)
        self.env.humidity_pct = _reflect(
            self.env.humidity_pct + cfg.ambient_walk_sigma[1] * dt_walk[1], *cfg.ambient_humidity_bounds
        )
        self.env.pressure_hpa = _reflect(
            self.env.pressure_hpa + cfg.ambient_walk_sigma[2] * dt_walk[2], *cfg.ambient_pressure_bounds
        )
        batches.append(SampleBatch(CH_AMB_TEMP, t0_us, cfg.ambient_fs_hz, np.array([self.env.temp_c])))
        batches.append(SampleBatch(CH_AMB_HUM, t0_us, cfg.ambient_fs_hz, np.array([self.env.humidity_pct])))
        batches.append(SampleBatch(CH_AMB_PRESS, t0_us, cfg.ambient_fs_hz, np.array([self.env.pressure_hpa])))

        # machine status snapshot (digital readout, no ADC path)
        status = {
            "spindle_rpm": self.state.spindle_rpm,
            "feed_mm_s": self.state.feed_mm_s,
            "tool_wear": self.state.tool_wear,
        }

        # ground truth for this second, one Bernoulli defect draw
        p = self.ground_truth_risk()
        defect = int(self.rng.random() < p)
        label = {"t_us": t0_us, "p": p, "defect": defect}

        state_row = {
            "t_us": t0_us,
            "spindle_rpm": self.state.spindle_rpm,
            "feed_mm_s": self.state.feed_mm_s,
            "tool_wear": self.state.tool_wear,
            "vacuum_airflow_m_s": self.state.vacuum_airflow_m_s,
            "severity": severity,
            "cutting": self.state.cutting,
        }

        # wear grows with cutting time
        if self.state.cutting:
            growth = (
                cfg.wear_rate_per_s
                * (self.state.feed_mm_s / 10.0)
                * (self.state.spindle_rpm / 12000.0)
            )
            self.state.tool_wear = min(1.0, self.state.tool_wear + growth)

        self.t_s += 1
        return TickOutput(t0_us, batches, status, label, state_row, applied)


def _reflect(value: float, lo: float, hi: float) -> float:
    if value < lo:
        return lo + (lo - value)
    if value > hi:
        return hi - (value - hi)
    return value


@dataclass
class TickOutput:
    t0_us: int
    batches: list
    machine_status: dict
    label: dict
    state_row: dict
    commands_applied: list


def run_scenario(config: ScenarioConfig, out_path=None, command_schedule=None):
    """Run a scenario offline and return (rows, simulator).

    `rows` is the session log: one meta row, then per second the state row,
    sample rows per channel, machine status, and the label row. When
    `out_path` is given the rows are written as NDJSON. `command_schedule`
    maps t_s -> params dict, applied at that step boundary (origin "schedule").
    """
    sim = TrimmingSimulator(config)
    rows = [{"kind": "meta", "session_id": config.session_id, "config": config.to_doc()}]
    schedule = command_schedule or {}
    for t_s in range(config.duration_s):
        if t_s in schedule:
            sim.apply_command(schedule[t_s], origin="schedule")
        tick = sim.step()
        for cmd in tick.commands_applied:
            rows.append({"kind": "command", **cmd})
        rows.append({"kind": "state", **tick.state_row})
        for batch in tick.batches:
            rows.append(
                {
                    "kind": "samples",
                    "channel": batch.channel,
                    "t0_us": batch.t0_us,
                    "fs_hz": batch.fs_hz,
                    "values": [float(v) for v in batch.samples],
                }
            )
        rows.append({"kind": "status", "t_us": tick.t0_us, **tick.machine_status})
        rows.append({"kind": "label", **tick.label})
    if out_path is not None:
        write_session(rows, out_path)
    return rows, sim


def write_session(rows, path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for row in rows:
            f.write(json.dumps(row, ensure_ascii=False, separators=(",", ":"), allow_nan=False))
            f.write("\n")


def read_session(path) -> list:
    rows = []
    with open(path, "r", encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if line:
                rows.append(json.loads(line))
    return rows


def surrogate_features(config: ScenarioConfig, observed: dict, rpm: float, feed: float) -> dict:
    """Physics surrogate: predict the joined feature map for candidate (rpm, feed).

    Features that don't depend on the machine parameters are copied from the
    observed record; vibration rms and the machine status entries are
    recomputed from the documented response functions. Used by parameter
    recommendation.
    """
    out = dict(observed)
    wear = observed.get(f"{CH_MACHINE}.tool_wear", 0.0)
    for axis, channel in enumerate(VIB_CHANNELS):
        name = f"{channel}.rms"
        if name in observed:
            out[name] = vibration_rms(config, feed, wear, axis)
    out[f"{CH_MACHINE}.spindle_rpm"] = float(rpm)
    out[f"{CH_MACHINE}.feed_mm_s"] = float(feed)
    out[f"{CH_MACHINE}.tool_wear"] = wear
    return out
