"""Synthetic laser-speckle vibration and the log-intensity threshold event model."""
from __future__ import annotations

import logging
import os
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .dsp import AudioSignal, read_wav, write_wav
from .events import EventStream, write_events

logger = logging.getLogger(__name__)

INTENSITY_FLOOR = 1e-4


@dataclass
class VibrationTrack:
    direction: tuple[float, float]
    gain: float
    offsets: np.ndarray  # frames x 2, pixels (dx, dy)

    def __post_init__(self):
        if abs(np.hypot(*self.direction) - 1.0) > 1e-9:
            raise ValueError("direction must be a unit vector")

    def motion(self) -> np.ndarray:
        """Inter-frame displacement field, one row per frame transition."""
        return np.diff(self.offsets, axis=0)


@dataclass
class Speckle:
    center: tuple[float, float]
    amplitude: float = 1.0
    sigma: float = 2.0
    direction: tuple[float, float] = (0.0, 1.0)
    gain: float = 1.0
    track: VibrationTrack | None = None


@dataclass
class NoiseConfig:
    leak_event_rate: float = 0.0
    threshold_jitter_sigma: float = 0.0


@dataclass
class SpeckleSceneConfig:
    width: int = 32
    height: int = 32
    speckles: list[Speckle] = field(default_factory=lambda: [Speckle((15.5, 15.5))])
    background: float = 0.02
    frame_rate: float = 10000.0
    threshold: float = 0.05
    noise: NoiseConfig = field(default_factory=NoiseConfig)
    rng_seed: int = 0

    def __post_init__(self):
        if self.threshold <= 0:
            raise ValueError("threshold must be > 0")
        if not 0 <= self.background < 1:
            raise ValueError("background must lie in [0, 1)")
        for s in self.speckles:
            if not 0 < s.amplitude <= 1:
                raise ValueError("speckle amplitude must lie in (0, 1]")
            if s.sigma <= 0:
                raise ValueError("speckle sigma must be > 0")


@dataclass
class FrameSequence:
    frames: np.ndarray  # n x H x W
    frame_rate: float

    def __len__(self) -> int:
        return len(self.frames)


def resample_linear(audio: AudioSignal, rate: float, n: int | None = None) -> np.ndarray:
    """Linearly interpolate ``audio`` at ``k / rate`` for ``k < n``."""
    if n is None:
        n = int(np.floor((len(audio) - 1) / audio.sample_rate * rate + 1e-9)) + 1
    t = np.arange(n) / rate
    return np.interp(t, audio.times(), audio.samples)


def audio_to_displacement(audio: AudioSignal, direction: Sequence[float], gain: float,
                          frame_rate: float, n_frames: int | None = None) -> VibrationTrack:
    """Per-frame speckle offsets ``gain * q_t * direction``."""
    if frame_rate > audio.sample_rate:
        raise ValueError("frame_rate exceeds the audio sample rate")
    if gain <= 0:
        raise ValueError("gain must be > 0")
    d = np.asarray(direction, dtype=np.float64)
    if abs(np.linalg.norm(d) - 1.0) > 1e-9:
        raise ValueError("direction must be a unit vector")
    q = resample_linear(audio, frame_rate, n_frames)
    return VibrationTrack((float(d[0]), float(d[1])), float(gain), gain * q[:, None] * d[None, :])


def _speckle_offset(s: Speckle, frame_index: int) -> np.ndarray:
    if s.track is None:
        return np.zeros(2)
    return s.track.offsets[frame_index]


def render_frame(scene: SpeckleSceneConfig, frame_index: int) -> np.ndarray:
    """Analytic Gaussian speckles over a flat background, clamped to [floor, 1]."""
    xs = np.arange(scene.width, dtype=np.float64)
    ys = np.arange(scene.height, dtype=np.float64)
    img = np.full((scene.height, scene.width), scene.background)
    for s in scene.speckles:
        ox, oy = _speckle_offset(s, frame_index)
        gx = np.exp(-((xs - s.center[0] - ox) ** 2) / (2 * s.sigma**2))
        gy = np.exp(-((ys - s.center[1] - oy) ** 2) / (2 * s.sigma**2))
        img += s.amplitude * np.outer(gy, gx)
    return np.clip(img, INTENSITY_FLOOR, 1.0)


def frame_time_us(index, frame_rate: float):
    return np.round(np.asarray(index, dtype=np.float64) * 1e6 / frame_rate).astype(np.int64)


class ThresholdEventGenerator:
    """Per-pixel reference-level event model fed one frame at a time.

    Each pixel keeps a reference log intensity. Whenever the current log
    intensity moves at least one threshold away from it, an event of that
    sign is emitted and the reference steps by the threshold. Crossing
    times are interpolated linearly in log intensity between frames.
    """

    def __init__(self, first_frame: np.ndarray, threshold: float, jitter_sigma: float = 0.0,
                 rng: np.random.Generator | None = None, t0_us: int = 0):
        if threshold <= 0:
            raise ValueError("threshold must be > 0")
        self.threshold = float(threshold)
        self.jitter_sigma = float(jitter_sigma)
        self.rng = rng if rng is not None else np.random.default_rng(0)
        self.height, self.width = first_frame.shape
        self.ref = np.log(np.clip(first_frame, INTENSITY_FLOOR, 1.0)).ravel()
        self.prev = self.ref.copy()
        self.prev_t = int(t0_us)
        self.thr = self._draw(self.ref.size)
        self._chunks: list[tuple[np.ndarray, ...]] = []

    def _draw(self, n: int) -> np.ndarray:
        if self.jitter_sigma == 0:
            return np.full(n, self.threshold)
        c = self.threshold + self.jitter_sigma * self.rng.standard_normal(n)
        return np.maximum(c, 0.01 * self.threshold)

    def feed(self, frame: np.ndarray, t_us: int) -> int:
        cur = np.log(np.clip(frame, INTENSITY_FLOOR, 1.0)).ravel()
        prev = self.prev
        dt = t_us - self.prev_t
        span = cur - prev
        emitted = 0
        while True:
            diff = cur - self.ref
            # tolerance absorbs exp/log rounding on exact multiples of the threshold
            fire = np.flatnonzero(np.abs(diff) >= self.thr * (1 - 1e-9))
            if not len(fire):
                break
            sign = np.sign(diff[fire])
            self.ref[fire] += sign * self.thr[fire]
            sp = span[fire]
            with np.errstate(divide="ignore", invalid="ignore"):
                frac = np.where(sp != 0, (self.ref[fire] - prev[fire]) / sp, 1.0)
            frac = np.clip(frac, 0.0, 1.0)
            t = self.prev_t + np.floor(frac * dt).astype(np.int64)
            self._chunks.append((t, fire % self.width, fire // self.width, sign.astype(np.int8)))
            self.thr[fire] = self._draw(len(fire))
            emitted += len(fire)
        self.prev = cur
        self.prev_t = int(t_us)
        return emitted

    def add_leak(self, rate_hz: float, t_start: int, t_end: int) -> None:
        """Poisson background events, independent of the reference levels."""
        if rate_hz <= 0 or t_end <= t_start:
            return
        npix = self.width * self.height
        counts = self.rng.poisson(rate_hz * (t_end - t_start) * 1e-6, size=npix)
        total = int(counts.sum())
        if not total:
            return
        pix = np.repeat(np.arange(npix), counts)
        t = self.rng.integers(t_start, t_end, size=total)
        p = np.where(self.rng.random(total) < 0.5, 1, -1).astype(np.int8)
        self._chunks.append((t, pix % self.width, pix // self.width, p))

    def stream(self) -> EventStream:
        if not self._chunks:
            return EventStream(self.width, self.height)
        t, x, y, p = (np.concatenate(c) for c in zip(*self._chunks))
        order = np.lexsort((p, x, y, t))
        return EventStream(self.width, self.height, t[order], x[order], y[order], p[order])


def frames_to_events(frames: FrameSequence, threshold: float, noise: NoiseConfig | None = None,
                     rng_seed: int = 0) -> EventStream:
    if len(frames) < 2:
        raise ValueError("at least two frames are required")
    noise = noise or NoiseConfig()
    rng = np.random.default_rng(rng_seed)
    gen = ThresholdEventGenerator(frames.frames[0], threshold, noise.threshold_jitter_sigma, rng)
    times = frame_time_us(np.arange(len(frames)), frames.frame_rate)
    for k in range(1, len(frames)):
        gen.feed(frames.frames[k], int(times[k]))
    gen.add_leak(noise.leak_event_rate, 0, int(times[-1]))
    return gen.stream()


def attach_tracks(scene: SpeckleSceneConfig, audio: AudioSignal, n_frames: int) -> SpeckleSceneConfig:
    """Copy of ``scene`` with every speckle driven by ``audio``.

    Speckles that already carry a track keep it (trimmed to ``n_frames``).
    """
    speckles = []
    for s in scene.speckles:
        if s.track is None:
            s = replace(s, track=audio_to_displacement(audio, s.direction, s.gain, scene.frame_rate, n_frames))
        elif len(s.track.offsets) < n_frames:
            raise ValueError("speckle track shorter than the simulation")
        else:
            s = replace(s, track=replace(s.track, offsets=s.track.offsets[:n_frames]))
        speckles.append(s)
    return replace(scene, speckles=speckles)


def simulate_scene(scene: SpeckleSceneConfig, audio: AudioSignal,
                   duration_s: float | None = None) -> tuple[EventStream, AudioSignal]:
    """Render the vibrating scene and convert it to events.

    Returns the event stream and the frame-rate audio that drove the motion.
    """
    if duration_s is None:
        duration_s = audio.duration_s
    if duration_s > audio.duration_s + 1e-9:
        raise ValueError("duration exceeds audio length")
    n_frames = int(round(duration_s * scene.frame_rate)) + 1
    max_frames = int(np.floor((len(audio) - 1) / audio.sample_rate * scene.frame_rate + 1e-9)) + 1
    n_frames = min(n_frames, max_frames)
    if n_frames < 2:
        raise ValueError("duration too short for two frames")
    driven = attach_tracks(scene, audio, n_frames)
    rng = np.random.default_rng(scene.rng_seed)
    gen = ThresholdEventGenerator(render_frame(driven, 0), scene.threshold,
                                  scene.noise.threshold_jitter_sigma, rng)
    times = frame_time_us(np.arange(n_frames), scene.frame_rate)
    for k in range(1, n_frames):
        gen.feed(render_frame(driven, k), int(times[k]))
    gen.add_leak(scene.noise.leak_event_rate, 0, int(times[-1]))
    truth = AudioSignal(scene.frame_rate, resample_linear(audio, scene.frame_rate, n_frames))
    return gen.stream(), truth


# --------------------------------------------------------------------------
# datasets


@dataclass
class DatasetConfig:
    repetitions: int = 1
    master_seed: int = 0
    duration_s: float = 0.5
    width: int = 32
    height: int = 32
    speckles: int = 1
    sigma: float = 2.0
    amplitude: float = 1.0
    background: float = 0.02
    frame_rate: float = 10000.0
    threshold: float = 0.05
    peak_pressure: float = 0.25
    gain_min: float = 0.5
    gain_max: float = 2.0
    leak_event_rate: float = 0.0
    threshold_jitter_sigma: float = 0.0
    event_format: str = "binary"


@dataclass
class ManifestEntry:
    id: str
    seed: int
    direction: tuple[float, float]
    gain: float
    events_path: str
    audio_path: str

    def to_line(self) -> str:
        return "\t".join([self.id, str(self.seed), repr(self.direction[0]), repr(self.direction[1]),
                          repr(self.gain), self.events_path, self.audio_path])

    @classmethod
    def from_line(cls, line: str) -> "ManifestEntry":
        parts = line.rstrip("\n").split("\t")
        if len(parts) != 7:
            raise ValueError(f"manifest line has {len(parts)} fields, expected 7")
        return cls(parts[0], int(parts[1]), (float(parts[2]), float(parts[3])), float(parts[4]),
                   parts[5], parts[6])


def read_manifest(path: str | os.PathLike) -> list[ManifestEntry]:
    base = Path(path).parent
    entries = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip() or line.startswith("#"):
                continue
            try:
                e = ManifestEntry.from_line(line)
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from None
            e.events_path = str(base / e.events_path)
            e.audio_path = str(base / e.audio_path)
            entries.append(e)
    return entries


def speckle_layout(k: int, width: int, height: int) -> list[tuple[float, float]]:
    """Centres of ``k`` speckles on a regular grid inside the sensor."""
    cols = int(np.ceil(np.sqrt(k)))
    rows = int(np.ceil(k / cols))
    return [
        ((i % cols + 0.5) * width / cols - 0.5, (i // cols + 0.5) * height / rows - 0.5)
        for i in range(k)
    ]


def random_speckles(rng: np.random.Generator, cfg: DatasetConfig) -> list[Speckle]:
    out = []
    for c in speckle_layout(cfg.speckles, cfg.width, cfg.height):
        angle = rng.uniform(0, 2 * np.pi)
        gain = rng.uniform(cfg.gain_min, cfg.gain_max)
        out.append(Speckle(c, cfg.amplitude, cfg.sigma, (float(np.cos(angle)), float(np.sin(angle))),
                           float(gain)))
    return out


def make_dataset(config: DatasetConfig, audio_dir: str | os.PathLike, out_dir: str | os.PathLike,
                 clips: Iterable[str] | None = None) -> Path:
    """Simulate every clip ``repetitions`` times with random directions and gains.

    Writes one event file and one ground-truth WAV per sample plus a
    tab-separated ``manifest.tsv``; returns the manifest path.
    """
    audio_dir, out_dir = Path(audio_dir), Path(out_dir)
    files = sorted(clips) if clips is not None else sorted(p.name for p in audio_dir.glob("*.wav"))
    if not files:
        raise ValueError(f"no WAV files in {audio_dir}")
    out_dir.mkdir(parents=True, exist_ok=True)
    seeds = np.random.SeedSequence(config.master_seed).generate_state(len(files) * config.repetitions)
    ext = ".evs" if config.event_format == "binary" else ".txt"
    entries = []
    for ci, name in enumerate(files):
        audio = read_wav(audio_dir / name)
        peak = np.max(np.abs(audio.samples))
        if peak > 0:
            audio = AudioSignal(audio.sample_rate, audio.samples * (config.peak_pressure / peak))
        duration = min(config.duration_s, audio.duration_s)
        for r in range(config.repetitions):
            seed = int(seeds[ci * config.repetitions + r])
            rng = np.random.default_rng(seed)
            speckles = random_speckles(rng, config)
            scene = SpeckleSceneConfig(
                config.width, config.height, speckles, config.background, config.frame_rate,
                config.threshold, NoiseConfig(config.leak_event_rate, config.threshold_jitter_sigma), seed,
            )
            stream, truth = simulate_scene(scene, audio, duration)
            sid = f"{Path(name).stem}_{r:03d}"
            write_events(stream, out_dir / (sid + ext), config.event_format)
            write_wav(out_dir / (sid + ".wav"), truth)
            if len(speckles) > 1:
                with open(out_dir / (sid + ".speckles.tsv"), "w", encoding="utf-8") as fh:
                    for s in speckles:
                        fh.write(f"{s.center[0]!r}\t{s.center[1]!r}\t{s.direction[0]!r}\t"
                                 f"{s.direction[1]!r}\t{s.gain!r}\n")
            entries.append(ManifestEntry(sid, seed, speckles[0].direction, speckles[0].gain,
                                         sid + ext, sid + ".wav"))
            logger.info("simulated %s: %d events", sid, len(stream))
    manifest = out_dir / "manifest.tsv"
    with open(manifest, "w", encoding="utf-8") as fh:
        for e in entries:
            fh.write(e.to_line() + "\n")
    return manifest
