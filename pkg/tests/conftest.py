import random

import pytest

from dsm import core


def make_valid_message(rng: random.Random) -> core.MeasurementMessage:
    """One random valid envelope. Shared by round-trip and mutation tests."""
    mode = rng.choice([1, 2, 3])
    window_len = rng.choice([4, 8, 16, 32, 64, 256])
    feat_names = ["min", "max", "mean", "rms", "p2p", "std", "dom_freq"]

    def num():
        # mix of integral-valued and full-precision floats
        if rng.random() < 0.3:
            return float(rng.randint(-1000, 1000))
        return rng.uniform(-1e3, 1e3) * 10 ** rng.randint(-6, 6)

    if mode == 1:
        payload = core.Raw([num() for _ in range(window_len)])
    elif mode == 2:
        names = rng.sample(feat_names, rng.randint(1, len(feat_names)))
        payload = core.Features({n: num() for n in names})
    else:
        factor = rng.choice([1, 2, 4])
        while window_len % factor:
            factor //= 2
        payload = core.Hybrid(
            [num() for _ in range(window_len // factor)],
            {n: num() for n in rng.sample(feat_names, rng.randint(1, 6))},
        )
    unit = rng.choice(list(core.UNIT_TO_KIND))
    token_chars = "abcdefghijklmnopqrstuvwxyz0123456789_-"
    return core.MeasurementMessage(
        node_id="".join(rng.choice(token_chars) for _ in range(rng.randint(1, 12))),
        channel="".join(rng.choice(token_chars) for _ in range(rng.randint(1, 12))),
        seq=rng.randint(0, 2**31),
        t_acq_us=rng.randint(1, 2**62),
        mode=mode,
        unit=unit,
        fs_hz=float(rng.choice([1, 10, 100, 256, 1000, 48000])),
        window_len=window_len,
        payload=payload,
    )


@pytest.fixture
def rng():
    return random.Random(20260810)
