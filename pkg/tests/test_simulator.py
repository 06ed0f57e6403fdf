import numpy as np
import pytest

from conftest import sine_audio, speckle_scene
from eventsound.dsp import AudioSignal, read_wav, spectrum_peak
from eventsound.events import RegionSpec, crop_patches, read_events, voxelize
from eventsound.simulator import (
    DatasetConfig, FrameSequence, ManifestEntry, NoiseConfig, Speckle, SpeckleSceneConfig, VibrationTrack,
    audio_to_displacement, frames_to_events, make_dataset, read_manifest, render_frame, simulate_scene,
)
from eventsound.dsp import write_wav

C = 0.05

# lower flank of the centred speckle: the two flanks respond with opposite
# sign to a vertical shift, so the full-frame sum keeps only the 2f term
FLANK = RegionSpec((16, 24), (32, 16))


# ---- displacement -----------------------------------------------------------

def test_silent_audio_zero_offsets():
    tr = audio_to_displacement(AudioSignal(1000, np.zeros(50)), (0, 1), 1.5, 1000)
    assert not tr.offsets.any()


def test_offset_formula():
    tr = audio_to_displacement(AudioSignal(100, np.full(5, 0.5)), (0.0, 1.0), 2.0, 100)
    np.testing.assert_allclose(tr.offsets[3], [0.0, 1.0])


def test_motion_field_is_gain_times_pressure_step():
    q = np.random.default_rng(0).standard_normal(40)
    d = (0.6, 0.8)
    tr = audio_to_displacement(AudioSignal(200, q), d, 1.7, 200)
    np.testing.assert_allclose(tr.motion(), 1.7 * np.diff(q)[:, None] * np.array(d)[None], atol=1e-12)


def test_resampled_to_frame_rate():
    a = AudioSignal(40, np.arange(9, dtype=float))  # ramp over 0.2 s
    tr = audio_to_displacement(a, (1, 0), 1.0, 20)
    np.testing.assert_allclose(tr.offsets[:, 0], [0, 2, 4, 6, 8])


@pytest.mark.parametrize("kw", [dict(direction=(1, 1)), dict(gain=0.0), dict(frame_rate=2000)])
def test_displacement_argument_errors(kw):
    args = dict(direction=(0, 1), gain=1.0, frame_rate=1000) | kw
    with pytest.raises(ValueError):
        audio_to_displacement(AudioSignal(1000, np.zeros(10)), **args)


def test_track_requires_unit_direction():
    with pytest.raises(ValueError):
        VibrationTrack((0.5, 0.5), 1.0, np.zeros((2, 2)))


# ---- rendering ------------------------------------------------------------------

def shifted_scene(offset):
    tr = VibrationTrack((1.0, 0.0), 1.0, np.array([[0.0, 0.0], offset]))
    return SpeckleSceneConfig(speckles=[Speckle((15.5, 15.5), 0.8, 2.0, track=tr)], background=0.02)


def centroid_above_background(img, bg):
    w = img - bg
    ys, xs = np.indices(img.shape)
    return np.array([(w * xs).sum(), (w * ys).sum()]) / w.sum()


def test_zero_offset_matches_frame_zero():
    sc = shifted_scene([0.0, 0.0])
    np.testing.assert_array_equal(render_frame(sc, 1), render_frame(sc, 0))


def test_subpixel_shift_moves_centroid():
    sc = shifted_scene([0.5, 0.0])
    c0 = centroid_above_background(render_frame(sc, 0), 0.02)
    c1 = centroid_above_background(render_frame(sc, 1), 0.02)
    np.testing.assert_allclose(c1 - c0, [0.5, 0.0], atol=1e-3)


def test_energy_is_displacement_invariant():
    sc = shifted_scene([0.37, 0.0])
    e0 = (render_frame(sc, 0) - 0.02).sum()
    e1 = (render_frame(sc, 1) - 0.02).sum()
    assert abs(e1 - e0) <= 1e-6 * e0


def test_intensity_clamped():
    sc = SpeckleSceneConfig(speckles=[Speckle((5, 5), 1.0, 1.0), Speckle((5, 5), 1.0, 1.0)], background=0.0)
    img = render_frame(sc, 0)
    assert img.max() == 1.0 and img.min() == pytest.approx(1e-4)


# ---- threshold model ----------------------------------------------------------

def step(factor, n=1):
    f0 = np.full((1, n), 0.5)
    return FrameSequence(np.stack([f0, f0 * factor]), 10_000)


def test_constant_frames_no_events():
    frames = FrameSequence(np.full((5, 4, 4), 0.3), 1000)
    assert len(frames_to_events(frames, C)) == 0


def test_two_threshold_step_gives_two_events():
    s = frames_to_events(step(np.exp(2 * C)), C)
    assert list(s.p) == [1, 1]
    # crossings at half and all of the 100 us frame interval
    assert list(s.t) == [50, 100]


def test_sub_threshold_step_silent():
    assert len(frames_to_events(step(np.exp(0.99 * C)), C)) == 0


def test_negative_step():
    s = frames_to_events(step(np.exp(-3 * C)), C)
    assert list(s.p) == [-1, -1, -1]


def test_reference_level_consistency():
    rng = np.random.default_rng(5)
    logs = np.cumsum(rng.normal(0, 0.08, (60, 3, 4)), axis=0) + np.log(0.3)
    frames = FrameSequence(np.clip(np.exp(logs), 1e-4, 1), 1000)
    s = frames_to_events(frames, C)
    net = np.zeros((3, 4))
    np.add.at(net, (s.y, s.x), s.p.astype(float))
    change = np.log(frames.frames[-1]) - np.log(frames.frames[0])
    assert np.all(np.abs(net * C - change) <= C + 1e-12)


def test_events_sorted_and_in_bounds():
    rng = np.random.default_rng(2)
    frames = FrameSequence(rng.uniform(0.1, 1, (10, 5, 6)), 1000)
    s = frames_to_events(frames, C, NoiseConfig(50.0, 0.01), rng_seed=3)
    assert np.all(np.diff(s.t) >= 0)
    assert s.x.max() < 6 and s.y.max() < 5


def test_noise_is_seeded():
    rng = np.random.default_rng(2)
    frames = FrameSequence(rng.uniform(0.1, 1, (10, 5, 6)), 1000)
    noise = NoiseConfig(200.0, 0.01)
    assert frames_to_events(frames, C, noise, 4) == frames_to_events(frames, C, noise, 4)
    assert frames_to_events(frames, C, noise, 4) != frames_to_events(frames, C, noise, 5)


def test_leak_rate():
    frames = FrameSequence(np.full((2, 10, 10), 0.5), 1.0)  # 1 s, 100 pixels
    s = frames_to_events(frames, C, NoiseConfig(leak_event_rate=20.0), rng_seed=0)
    # Poisson mean 2000, sd ~45
    assert abs(len(s) - 2000) < 250
    assert set(np.unique(s.p)) == {-1, 1}


def test_too_few_frames():
    with pytest.raises(ValueError):
        frames_to_events(FrameSequence(np.ones((1, 2, 2)), 10), C)


# ---- scenes -------------------------------------------------------------------------

def test_silent_audio_no_events():
    s, truth = simulate_scene(speckle_scene(), AudioSignal(20_000, np.zeros(2001)), 0.1)
    assert len(s) == 0
    assert len(truth) == 1001 and truth.sample_rate == 10_000


def test_scene_determinism():
    audio = sine_audio(seconds=0.05)
    noisy = speckle_scene(noise=NoiseConfig(10.0, 0.005), seed=9)
    assert simulate_scene(noisy, audio)[0] == simulate_scene(noisy, audio)[0]


def test_truth_is_frame_rate_audio():
    audio = sine_audio(seconds=0.05)
    _, truth = simulate_scene(speckle_scene(), audio, 0.05)
    np.testing.assert_allclose(truth.samples, audio.samples[::2])


def test_duration_longer_than_audio():
    with pytest.raises(ValueError):
        simulate_scene(speckle_scene(), sine_audio(seconds=0.01), 0.02)


def test_sine_events_concentrate_on_speckle(sine_recording):
    stream, _ = sine_recording
    r = np.hypot(stream.x - 15.5, stream.y - 15.5)
    assert np.mean(r < 8) > 0.95


def test_sine_spectrum_peak(sine_recording):
    stream, _ = sine_recording
    v = voxelize(stream, 2000, (0, 500_000))
    d = crop_patches(v, [FLANK]).patches[0]
    d = (d[:, 0] - d[:, 1]).sum(axis=(1, 2))
    peak, _, freqs, _ = spectrum_peak(d, v.sample_rate)
    assert abs(peak - 440) <= freqs[1]


def test_small_signal_regime_peak():
    stream, _ = simulate_scene(speckle_scene(gain=0.2), sine_audio(620.0, 0.25), 0.25)
    v = voxelize(stream, 1000, (0, 250_000))
    d = crop_patches(v, [FLANK]).patches[0]
    peak, _, freqs, _ = spectrum_peak((d[:, 0] - d[:, 1]).sum(axis=(1, 2)), v.sample_rate)
    assert abs(peak - 620) <= freqs[1]


def test_doubling_gain_never_reduces_events():
    audio = sine_audio(300.0, 0.05)
    counts = [len(simulate_scene(speckle_scene(gain=g), audio)[0]) for g in (0.1, 0.2, 0.4, 0.8)]
    assert counts == sorted(counts)


# ---- datasets -----------------------------------------------------------------------

@pytest.fixture
def clip_dir(tmp_path):
    d = tmp_path / "clips"
    d.mkdir()
    for f in (300, 500):
        write_wav(d / f"tone{f}.wav", sine_audio(f, 0.03, 20_000, 0.5))
    return d


def test_dataset_counts_and_determinism(tmp_path, clip_dir):
    cfg = DatasetConfig(repetitions=3, master_seed=11, duration_s=0.02)
    m1 = make_dataset(cfg, clip_dir, tmp_path / "a")
    m2 = make_dataset(cfg, clip_dir, tmp_path / "b")
    entries = read_manifest(m1)
    assert len(entries) == 6
    assert len(list((tmp_path / "a").glob("*.evs"))) == 6
    assert len(list((tmp_path / "a").glob("*.wav"))) == 6
    assert m1.read_text() == m2.read_text()
    for e in entries:
        assert read_events(e.events_path) == read_events(str(e.events_path).replace("/a/", "/b/"))
        assert 0.5 <= e.gain <= 2.0
        assert abs(np.hypot(*e.direction) - 1) < 1e-9
        assert len(read_wav(e.audio_path)) > 0


def test_multi_speckle_directions_independent(tmp_path, clip_dir):
    cfg = DatasetConfig(repetitions=1, speckles=4, duration_s=0.01)
    m = make_dataset(cfg, clip_dir, tmp_path / "k")
    sidecar = next((tmp_path / "k").glob("*.speckles.tsv"))
    rows = np.loadtxt(sidecar)
    assert rows.shape == (4, 5)
    assert len(np.unique(np.round(rows[:, 2], 9))) == 4
    assert np.all((rows[:, 4] >= 0.5) & (rows[:, 4] <= 2))
    assert len(read_manifest(m)) == 2


def test_empty_audio_dir(tmp_path):
    (tmp_path / "none").mkdir()
    with pytest.raises(ValueError):
        make_dataset(DatasetConfig(), tmp_path / "none", tmp_path / "out")


def test_manifest_line_roundtrip():
    e = ManifestEntry("clip_000", 42, (0.6, -0.8), 1.25, "clip_000.evs", "clip_000.wav")
    assert ManifestEntry.from_line(e.to_line()) == e
    assert e.to_line().count("\t") == 6
