import numpy as np
import pytest

from eventsound.events import EventStream, PatchSet, RegionSpec
from eventsound.learned import init_params, loss_and_grad

# one line per acceptance criterion, filled by tests/test_acceptance.py
ACCEPTANCE: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE, key=lambda s: int(s.split()[0][1:])):
            terminalreporter.write_line(line)


def random_stream(rng, n, width=16, height=12, t_max=10_000):
    return EventStream(
        width, height,
        np.sort(rng.integers(0, t_max, n)),
        rng.integers(0, width, n),
        rng.integers(0, height, n),
        rng.choice(np.array([-1, 1], dtype=np.int8), n),
    )


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def sine_audio(freq=440.0, seconds=0.5, fs=20_000, amplitude=1.0):
    from eventsound.dsp import AudioSignal

    t = np.arange(int(round(seconds * fs)) + 1) / fs
    return AudioSignal(fs, amplitude * np.sin(2 * np.pi * freq * t))


def speckle_scene(gain=0.5, direction=(0.0, 1.0), seed=0, **kw):
    """One speckle at the centre of a 32 x 32 sensor; ``gain`` = peak displacement for unit audio."""
    from eventsound.simulator import Speckle, SpeckleSceneConfig

    return SpeckleSceneConfig(speckles=[Speckle((15.5, 15.5), gain=gain, direction=direction)], rng_seed=seed, **kw)


@pytest.fixture(scope="session")
def sine_recording():
    """440 Hz, 0.5 px peak displacement, 0.5 s at 10 kHz frames, noise-free."""
    from eventsound.simulator import simulate_scene

    return simulate_scene(speckle_scene(), sine_audio(), 0.5)


def toy_samples(n, seed=0, speckles=4, config=None):
    """Sine-driven scenes with ``speckles`` randomly oriented speckles, prepared for training."""
    from eventsound.dsp import AudioSignal
    from eventsound.simulator import Speckle, SpeckleSceneConfig, simulate_scene, speckle_layout
    from eventsound.train import TrainConfig, prepare_sample

    config = config or TrainConfig()
    rng = np.random.default_rng(seed)
    fs, dur = 20_000, config.bins / config.sample_rate + 0.007
    t = np.arange(int(fs * dur) + 1) / fs
    out = []
    for i in range(n):
        f = rng.uniform(200, 1200)
        audio = AudioSignal(fs, 0.25 * np.sin(2 * np.pi * f * t + rng.uniform(0, 2 * np.pi)))
        sp = []
        for c in speckle_layout(speckles, 32, 32):
            a = rng.uniform(0, 2 * np.pi)
            sp.append(Speckle(c, 1.0, 2.0, (np.cos(a), np.sin(a)), rng.uniform(0.5, 2)))
        stream, truth = simulate_scene(SpeckleSceneConfig(speckles=sp, rng_seed=i), audio, dur)
        out.append(prepare_sample(stream, truth, config, f"s{seed}_{i}"))
    return out


# ---- learned-model helpers ---------------------------------------------------

def patchset(values, window=(0, 10_000)):
    return PatchSet([np.asarray(v, float) for v in values], [RegionSpec((0, 0), (1, 1))] * len(values), *window)


def random_patches(rng, n=2, t=32, ph=5, pw=5, density=0.2):
    vals = rng.exponential(1.0, (n, t, 2, ph, pw)) * (rng.random((n, t, 2, ph, pw)) < density)
    return patchset(list(vals), (0, int(t * 250)))


def random_params(seed=0, c=4, s=4, heads=2, use_sab=True, use_gate=False):
    rng = np.random.default_rng(seed)
    p = init_params(c, s, heads, delta=0.05, seed=seed, use_sab=use_sab, use_gate=use_gate)
    a = -np.eye(s) + 0.3 * rng.standard_normal((s, s))
    return p.with_tensors({"ssm_a": a, "attn_v": rng.uniform(-.5, .5, (c, c)), "attn_o": rng.uniform(-.5, .5, (c, c)),
                           "gate_w": 0.1 * rng.standard_normal(c), "gate_b": np.array(-3.0)})


def fd_check(params, stats, ref, beta, fs=4000.0, rel_step=1e-5):
    _, g = loss_and_grad(params, stats, ref, fs, beta)
    worst = 0.0
    for name, value in params.tensors().items():
        flat = value.ravel()
        for i in range(flat.size):
            h = rel_step * max(1.0, abs(flat[i]))
            vals = []
            for sign in (1, -1):
                bumped = flat.copy()
                bumped[i] += sign * h
                lv, _ = loss_and_grad(params.with_tensors({name: bumped.reshape(value.shape)}), stats, ref, fs, beta)
                vals.append(lv.total)
            fd = (vals[0] - vals[1]) / (2 * h)
            ad = g.tensors()[name].ravel()[i]
            scale = max(abs(fd), abs(ad))
            if scale > 1e-6:
                worst = max(worst, abs(fd - ad) / scale)
    return worst
