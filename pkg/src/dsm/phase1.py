"""Phase-1 dataset assembly: recorded trimming sessions -> labeled feature rows.

Mirrors the gateway path exactly (same ADC simulation, same window features,
same sample-and-hold join rule, same nearest-second labeling) but runs
offline on session logs, so model training is fast and needs no sockets.
Rows produced here and rows exported by the cloud sink for the same session
carry the same feature names.
"""

from __future__ import annotations

import numpy as np

from . import dsp, sim
from .orchestrate import scenario_channel_map
from .quality import SessionRecord

US = 1_000_000


def _apply_frontend(samples, setup):
    if setup.adc is None:
        return np.asarray(samples, dtype=float)
    volts = (np.asarray(samples, dtype=float) - setup.calibration.offset) / setup.calibration.gain
    codes = dsp.quantize(volts, setup.adc)
    return dsp.to_engineering_units(codes, setup.adc, setup.calibration)


def offline_feature_rows(session_rows: list, config: sim.ScenarioConfig) -> list:
    """One labeled SessionRecord per full vibration window of a session log."""
    setups = {}
    for node_setups in scenario_channel_map(config).values():
        for setup in node_setups:
            setups[setup.channel] = setup

    samples = {}  # channel -> (t0_us of stream, concatenated samples)
    statuses = []
    labels = []
    for row in session_rows:
        if row["kind"] == "samples":
            channel = row["channel"]
            values = _apply_frontend(row["values"], setups[channel])
            if channel not in samples:
                samples[channel] = [row["t0_us"], []]
            samples[channel][1].extend(values.tolist())
        elif row["kind"] == "status":
            statuses.append(row)
        elif row["kind"] == "label":
            labels.append(row)
    if not labels:
        return []

    session_id = next(r["session_id"] for r in session_rows if r["kind"] == "meta")

    def windowed_features(channel, window, fs):
        t0, stream = samples[channel]
        out = []
        for start in range(0, len(stream) - window + 1, window):
            t = t0 + int(round(start / fs * US))
            feats = dsp.window_features(stream[start : start + window])
            try:
                feats[dsp.DOM_FREQ] = dsp.dominant_frequency(stream[start : start + window], fs)
            except dsp.AllZeroSignal:
                feats[dsp.DOM_FREQ] = 0.0
            out.append((t, feats))
        return out

    vib = {
        ch: windowed_features(ch, config.vib_window, config.vib_fs_hz)
        for ch in sim.VIB_CHANNELS
    }
    air = {
        ch: windowed_features(ch, config.airflow_window, config.airflow_fs_hz)
        for ch in (sim.CH_AIR_SPEED, sim.CH_AIR_TEMP)
    }
    ambient = {}
    for ch in (sim.CH_AMB_TEMP, sim.CH_AMB_HUM, sim.CH_AMB_PRESS):
        t0, stream = samples[ch]
        ambient[ch] = [(t0 + i * US, v) for i, v in enumerate(stream)]
    statuses.sort(key=lambda r: r["t_us"])
    labels.sort(key=lambda r: r["t_us"])
    label_ts = [r["t_us"] for r in labels]

    def held(series, t):
        # sample-and-hold: latest entry at or before t
        best = None
        for entry in series:
            if entry[0] <= t:
                best = entry
            else:
                break
        return best

    records = []
    n_windows = len(vib["vib_x"])
    for i in range(n_windows):
        t = vib["vib_x"][i][0]
        features = {}
        for ch in sim.VIB_CHANNELS:
            for name, value in vib[ch][i][1].items():
                features[f"{ch}.{name}"] = value
        complete = True
        for ch, series in air.items():
            entry = held(series, t)
            if entry is None:
                complete = False
                break
            for name, value in entry[1].items():
                features[f"{ch}.{name}"] = value
        for ch, series in ambient.items():
            entry = held(series, t)
            if entry is None:
                complete = False
                break
            features[f"{ch}.value"] = entry[1]
        status = held([(r["t_us"], r) for r in statuses], t)
        if status is None or not complete:
            continue
        for name in ("spindle_rpm", "feed_mm_s", "tool_wear"):
            features[f"{sim.CH_MACHINE}.{name}"] = status[1][name]
        nearest = min(range(len(labels)), key=lambda j: (abs(label_ts[j] - t), label_ts[j]))
        records.append(
            SessionRecord(
                features=features,
                session_id=session_id,
                t_us=t,
                label=int(labels[nearest]["defect"]),
            )
        )
    return records


def training_campaign(n_sessions: int = 20, base_seed: int = 100, duration_s: int = 10) -> list:
    """Deterministic spread of scenarios for phase-1 model building.

    Sessions rotate through four regimes so the risk drivers decorrelate
    and each one is learnable on its own: benign gentle cuts, aggressive
    cuts on a worn tool, moderate cuts hit by a vacuum-leak episode, and
    aggressive cuts with a leak. The regimes sit at the decisive ends of
    the plant's risk range, so labels carry little Bernoulli noise.
    """
    configs = []
    for i in range(n_sessions):
        group = i % 4
        feed, wear, episodes = {
            0: (4.0 + 0.5 * i, 0.01 * i, []),
            1: (30.0 + 0.8 * i, 0.45 + 0.02 * i, []),
            2: (18.0 + 0.5 * i, 0.25 + 0.01 * i, [sim.Episode(3.0, 8.0, 1.0)]),
            3: (30.0 + 0.8 * i, 0.45 + 0.02 * i, [sim.Episode(3.0, 8.0, 0.9)]),
        }[group]
        configs.append(
            sim.ScenarioConfig(
                name=f"train{i:02d}",
                duration_s=duration_s,
                seed=base_seed + i,
                spindle_rpm=11000.0 + 120.0 * i,
                feed_mm_s=feed,
                tool_wear=min(0.95, wear),
                defect_episodes=episodes,
            )
        )
    return configs


def build_training_records(configs) -> list:
    records = []
    for config in configs:
        rows, _sim = sim.run_scenario(config)
        records.extend(offline_feature_rows(rows, config))
    return records
