"""Command-line entry point: ``eventsound <subcommand> ...``.

Exit codes: 0 success, 2 input or usage error, 3 empty or degenerate data,
4 numeric failure.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import logging
import math
import os
import sys
from fractions import Fraction
from pathlib import Path
from typing import Any, Callable

import numpy as np
from scipy import signal as sps

from .classical import GaborParams, evphase_recover, oracle_recover
from .dsp import (AudioSignal, align, butterworth_highpass, estimate_noise_profile, read_wav, snr,
                  spectral_subtract, stft, stoi, write_wav)
from .events import (EventStream, RegionSpec, VoxelGrid, accumulate_frame, crop_patches, extract_speckle_regions,
                     read_events, voxelize, write_events)
from .learned import load_params, patch_outputs, save_params
from .simulator import (DatasetConfig, NoiseConfig, Speckle, SpeckleSceneConfig, audio_to_displacement,
                        make_dataset, resample_linear, simulate_scene, speckle_layout)
from .train import TrainConfig, TrainingDiverged, smoothed, train, write_loss_log

logger = logging.getLogger("eventsound")

SEED_ENV = "EVENTSOUND_SEED"
EXIT_OK, EXIT_USAGE, EXIT_EMPTY, EXIT_NUMERIC = 0, 2, 3, 4


class CliError(Exception):
    def __init__(self, message: str, code: int = EXIT_USAGE):
        super().__init__(message)
        self.code = code


# --------------------------------------------------------------------------
# key = value configuration files


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"expected a boolean, got {text!r}")


def _pair(kind: Callable[[str], Any]) -> Callable[[str], tuple]:
    def parse(text: str) -> tuple:
        parts = [p.strip() for p in text.split(",")]
        if len(parts) != 2:
            raise ValueError(f"expected two comma-separated values, got {text!r}")
        return kind(parts[0]), kind(parts[1])
    return parse


def _choice(*options: str) -> Callable[[str], str]:
    def parse(text: str) -> str:
        if text not in options:
            raise ValueError(f"expected one of {', '.join(options)}, got {text!r}")
        return text
    return parse


def _format(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (tuple, list)):
        return ", ".join(_format(v) for v in value)
    return str(value)


@dataclasses.dataclass
class Schema:
    """Allowed keys with their parsers and defaults."""

    keys: dict[str, tuple[Callable[[str], Any], Any]]

    @classmethod
    def from_dataclass(cls, dc, rename: dict[str, str] | None = None, skip: tuple[str, ...] = ()) -> "Schema":
        rename = rename or {}
        kinds = {"int": int, "float": float, "str": str, "bool": _bool,
                 "tuple[int, int]": _pair(int), "tuple[float, float]": _pair(float)}
        keys = {}
        for f in dataclasses.fields(dc):
            if f.name in skip:
                continue
            keys[rename.get(f.name, f.name)] = (kinds[str(f.type)], f.default)
        return cls(keys)

    def defaults(self) -> dict[str, Any]:
        return {k: d for k, (_, d) in self.keys.items()}


def parse_config(path: str | os.PathLike | None, schema: Schema,
                 overrides: list[str] | None = None) -> tuple[dict[str, Any], set[str]]:
    """Parse ``key = value`` lines; returns (resolved values, explicitly set keys).

    ``#`` starts a comment. Unknown or repeated keys and malformed values are
    errors that name the file and line.
    """
    values = schema.defaults()
    seen: set[str] = set()

    def apply(key: str, raw: str, where: str):
        if key not in schema.keys:
            raise CliError(f"{where}: unknown key {key!r}")
        try:
            values[key] = schema.keys[key][0](raw)
        except ValueError as e:
            raise CliError(f"{where}: bad value for {key!r}: {e}") from None
        seen.add(key)

    if path is not None:
        try:
            lines = Path(path).read_text(encoding="utf-8").splitlines()
        except OSError as e:
            raise CliError(f"cannot read config {path}: {e.strerror}") from None
        file_keys: set[str] = set()
        for n, line in enumerate(lines, 1):
            body = line.split("#", 1)[0].strip()
            if not body:
                continue
            if "=" not in body:
                raise CliError(f"{path}:{n}: expected 'key = value'")
            key, raw = (s.strip() for s in body.split("=", 1))
            if key in file_keys:
                raise CliError(f"{path}:{n}: duplicate key {key!r}")
            file_keys.add(key)
            apply(key, raw, f"{path}:{n}")
    for item in overrides or []:
        if "=" not in item:
            raise CliError(f"--set {item!r}: expected key=value")
        key, raw = (s.strip() for s in item.split("=", 1))
        apply(key, raw, f"--set {key}")
    return values, seen


def resolve_seed(cli_seed: int | None, values: dict[str, Any], explicit: set[str], key: str = "seed") -> int:
    """``--seed`` beats the config file, which beats the environment default."""
    if cli_seed is not None:
        return cli_seed
    if key in explicit:
        return int(values[key])
    env = os.environ.get(SEED_ENV)
    if env is not None and env.strip():
        try:
            return int(env)
        except ValueError:
            raise CliError(f"{SEED_ENV}={env!r} is not an integer") from None
    return int(values[key])


def write_sidecar(out: str | os.PathLike, command: str, values: dict[str, Any],
                  inputs: dict[str, Any]) -> Path:
    path = Path(f"{out}.config.txt")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"# resolved configuration for '{command}'\n")
        for k, v in inputs.items():
            fh.write(f"# {k}: {_format(v)}\n")
        for k in sorted(values):
            fh.write(f"{k} = {_format(values[k])}\n")
    return path


# --------------------------------------------------------------------------
# input helpers


def _read_wav(path: str) -> AudioSignal:
    try:
        return read_wav(path)
    except FileNotFoundError:
        raise CliError(f"audio file not found: {path}") from None
    except (OSError, EOFError) as e:
        raise CliError(f"cannot read audio {path}: {e}") from None
    except ValueError as e:
        raise CliError(str(e)) from None


def _read_events(path: str) -> EventStream:
    try:
        return read_events(path)
    except FileNotFoundError:
        raise CliError(f"event file not found: {path}") from None
    except (OSError, ValueError) as e:
        raise CliError(f"cannot read events {path}: {e}") from None


def _stem_path(out: str, suffix: str) -> Path:
    p = Path(out)
    return p.with_name(p.stem + suffix)


# --------------------------------------------------------------------------
# simulate

SCENE_SCHEMA = Schema({
    "width": (int, 32),
    "height": (int, 32),
    "background": (float, 0.02),
    "frame_rate": (float, 10000.0),
    "threshold": (float, 0.05),
    "leak_event_rate": (float, 0.0),
    "threshold_jitter_sigma": (float, 0.0),
    "speckles": (int, 1),
    "speckle_sigma": (float, 2.0),
    "speckle_amplitude": (float, 1.0),
    "direction": (_pair(float), (0.0, 1.0)),
    "gain": (float, 0.0),               # 0: derive from peak_displacement
    "peak_displacement": (float, 0.5),  # pixels, at the audio's peak sample
    "duration_s": (float, 0.0),         # 0: whole audio
    "event_format": (_choice("binary", "text"), "binary"),
    "seed": (int, 0),
})


def cmd_simulate(args) -> int:
    values, explicit = parse_config(args.config, SCENE_SCHEMA, args.set)
    values["seed"] = resolve_seed(args.seed, values, explicit)
    audios = [_read_wav(p) for p in args.audio]
    if any(len(a) < 2 for a in audios):
        raise CliError("audio must contain at least two samples", EXIT_EMPTY)
    if values["speckles"] < 1:
        raise CliError("speckles must be >= 1")
    d = np.asarray(values["direction"], dtype=np.float64)
    if not np.all(np.isfinite(d)) or np.linalg.norm(d) == 0:
        raise CliError("direction must be a non-zero vector")
    d = tuple(float(v) for v in d / np.linalg.norm(d))

    gains = []
    for a in audios:
        if values["gain"] > 0:
            gains.append(values["gain"])
        else:
            peak = float(np.max(np.abs(a.samples)))
            if peak == 0:
                raise CliError("audio is silent; set 'gain' explicitly", EXIT_EMPTY)
            gains.append(values["peak_displacement"] / peak)

    fr = values["frame_rate"]
    duration = min(a.duration_s for a in audios)
    if values["duration_s"] > 0:
        duration = min(duration, values["duration_s"])
    n_frames = min(int(round(duration * fr)) + 1,
                   *(int(np.floor((len(a) - 1) / a.sample_rate * fr + 1e-9)) + 1 for a in audios))

    speckles = []
    for i, c in enumerate(speckle_layout(values["speckles"], values["width"], values["height"])):
        k = i % len(audios)
        track = audio_to_displacement(audios[k], d, gains[k], fr, n_frames) if k else None
        speckles.append(Speckle(c, values["speckle_amplitude"], values["speckle_sigma"], d, gains[k], track))
    scene = SpeckleSceneConfig(values["width"], values["height"], speckles, values["background"], fr,
                               values["threshold"],
                               NoiseConfig(values["leak_event_rate"], values["threshold_jitter_sigma"]),
                               values["seed"])
    stream, truth = simulate_scene(scene, audios[0], (n_frames - 1) / fr)
    write_events(stream, args.out, values["event_format"])
    truths = [truth] + [AudioSignal(fr, resample_linear(a, fr, n_frames)) for a in audios[1:]]
    if len(truths) == 1:
        truth_paths = [args.truth or _stem_path(args.out, ".truth.wav")]
    else:
        truth_paths = [_stem_path(args.out, f".truth{i}.wav") for i in range(len(truths))]
    for t, p in zip(truths, truth_paths):
        write_wav(p, t)
    write_sidecar(args.out, "simulate", values, {"audio": args.audio, "out": args.out,
                                                 "truth": [str(p) for p in truth_paths]})
    print(f"{len(stream)} events -> {args.out}")
    return EXIT_OK


# --------------------------------------------------------------------------
# dataset

DATASET_SCHEMA = Schema.from_dataclass(DatasetConfig, rename={"master_seed": "seed"})


def cmd_dataset(args) -> int:
    values, explicit = parse_config(args.config, DATASET_SCHEMA, args.set)
    values["seed"] = resolve_seed(args.seed, values, explicit)
    if values["event_format"] not in ("binary", "text"):
        raise CliError("event_format must be 'binary' or 'text'")
    cfg = DatasetConfig(**{("master_seed" if k == "seed" else k): v for k, v in values.items()})
    if not Path(args.audio_dir).is_dir():
        raise CliError(f"audio directory not found: {args.audio_dir}")
    try:
        manifest = make_dataset(cfg, args.audio_dir, args.out_dir)
    except ValueError as e:
        if "no WAV files" in str(e):
            raise CliError(str(e), EXIT_EMPTY) from None
        raise
    write_sidecar(manifest, "dataset", values, {"audio_dir": args.audio_dir, "out_dir": args.out_dir})
    print(f"manifest -> {manifest}")
    return EXIT_OK


# --------------------------------------------------------------------------
# recover

RECOVER_SCHEMA = Schema({
    "sample_rate": (float, 4000.0),
    "bins": (int, 0),                 # 0: cover the whole recording at sample_rate
    "decay": (float, 0.9),
    "anchor": (float, 1.0),
    "patch_extent": (_pair(int), (16, 16)),
    "min_count": (int, 1),
    "min_area": (int, 4),
    "max_regions": (int, 4),
    "highpass_cutoff": (float, 60.0),
    "highpass_order": (int, 4),
    "highpass_zero_phase": (_bool, False),
    "noise_ms": (float, 100.0),       # leading segment used as the noise profile
    "specsub_window": (int, 256),
    "specsub_hop": (int, 64),
})


def parse_regions(text: str, extent: tuple[int, int]) -> list[RegionSpec]:
    """``"cx,cy[,w,h];..."`` into region boxes."""
    out = []
    for i, item in enumerate(s for s in text.split(";") if s.strip()):
        try:
            nums = [int(v) for v in item.split(",")]
        except ValueError:
            raise CliError(f"--regions: bad region {item.strip()!r}") from None
        if len(nums) == 2:
            out.append(RegionSpec((nums[0], nums[1]), extent, i))
        elif len(nums) == 4:
            out.append(RegionSpec((nums[0], nums[1]), (nums[2], nums[3]), i))
        else:
            raise CliError(f"--regions: expected cx,cy or cx,cy,w,h, got {item.strip()!r}")
    if not out:
        raise CliError("--regions: no regions given")
    return out


def _window_for(stream: EventStream, sample_rate: float, bins: int) -> tuple[int, int, int]:
    if bins <= 0:
        bins = max(2, int(math.ceil((int(stream.t[-1]) + 1) * sample_rate * 1e-6)))
    end = int(round(bins / sample_rate * 1e6))
    return bins, 0, max(end, 1)


def _pool(signals: list[np.ndarray]) -> np.ndarray:
    """Unit-RMS average with every signal's sign matched to the first."""
    ref = signals[0]
    acc = np.zeros_like(ref)
    for s in signals:
        rms = np.sqrt(np.mean(s**2))
        if rms == 0:
            continue
        sign = -1.0 if np.dot(s, ref) < 0 else 1.0
        acc += sign * s / rms
    return acc / len(signals)


def _postprocess(audio: AudioSignal, steps: list[str], values: dict[str, Any]) -> AudioSignal:
    for step in steps:
        if step == "highpass":
            audio = butterworth_highpass(audio, values["highpass_cutoff"], values["highpass_order"],
                                         values["highpass_zero_phase"])
        elif step == "specsub":
            n = int(round(values["noise_ms"] * 1e-3 * audio.sample_rate))
            if n < values["specsub_window"]:
                raise CliError("noise segment shorter than the spectral-subtraction window", EXIT_EMPTY)
            profile = estimate_noise_profile(audio.samples[:n], values["specsub_window"], values["specsub_hop"])
            audio = spectral_subtract(audio, profile, values["specsub_window"], values["specsub_hop"])
    return audio


def _learned_outputs(voxel: VoxelGrid, regions: list[RegionSpec], model_path: str):
    try:
        params = load_params(model_path)
    except FileNotFoundError:
        raise CliError(f"model file not found: {model_path}") from None
    except (OSError, ValueError) as e:
        raise CliError(f"cannot read model {model_path}: {e}") from None
    per, pooled = patch_outputs(crop_patches(voxel, regions), params)
    return list(per), pooled.samples


def cmd_recover(args) -> int:
    if args.method == "learned" and not args.model:
        raise CliError("--method learned requires --model")
    values, _ = parse_config(args.config, RECOVER_SCHEMA, args.set)
    steps = [s.strip() for s in args.postprocess.split(",") if s.strip()] if args.postprocess else []
    for s in steps:
        if s not in ("highpass", "specsub"):
            raise CliError(f"--postprocess: unknown step {s!r} (use highpass, specsub)")
    if values["sample_rate"] <= 0:
        raise CliError("sample_rate must be > 0")
    stream = _read_events(args.events)
    if len(stream) == 0:
        raise CliError(f"{args.events}: no events", EXIT_EMPTY)
    bins, start, end = _window_for(stream, values["sample_rate"], values["bins"])
    voxel = voxelize(stream, bins, (start, end))

    extent = tuple(values["patch_extent"])
    if args.regions == "auto" or (args.regions is None and args.method == "learned"):
        regions = extract_speckle_regions(accumulate_frame(stream, (start, end)), values["min_count"],
                                          values["min_area"], extent)[: values["max_regions"]]
        if not regions:
            raise CliError("no speckle regions found", EXIT_EMPTY)
    elif args.regions:
        regions = parse_regions(args.regions, extent)
        for r in regions:
            if not r.fits(voxel.width, voxel.height):
                raise CliError(f"region {r.id} box {r.box()} outside the {voxel.width}x{voxel.height} sensor")
    else:
        regions = []

    rate = voxel.sample_rate
    if args.method == "learned":
        per_region, pooled = _learned_outputs(voxel, regions, args.model)
    else:
        def one(region):
            if args.method == "oracle":
                return oracle_recover(voxel, region).samples
            return evphase_recover(voxel, GaborParams(), region, values["decay"], values["anchor"]).samples

        per_region = [one(r) for r in regions]
        pooled = _pool(per_region) if per_region else one(None)
    if not np.all(np.isfinite(pooled)):
        raise CliError("recovery produced non-finite samples", EXIT_NUMERIC)

    outputs = [(Path(args.out), pooled)]
    outputs += [(_stem_path(args.out, f".region{i}.wav"), s) for i, s in enumerate(per_region)]
    finished = {}
    for path, samples in outputs:
        audio = _postprocess(AudioSignal(rate, samples), steps, values)
        write_wav(path, audio, normalize=True)
        finished[path] = audio
    if args.stereo:
        if len(per_region) < 2:
            raise CliError("--stereo needs at least two regions", EXIT_EMPTY)
        left, right = (finished[p].samples for p, _ in outputs[1:3])
        write_wav(args.stereo, np.stack([left, right], axis=1), int(round(rate)), normalize=True)
    write_sidecar(args.out, "recover", values, {
        "events": args.events, "method": args.method, "model": args.model, "postprocess": steps,
        "regions": ["{},{},{},{}".format(*r.center, *r.extent) for r in regions], "bins": bins,
        "window_us": (start, end),
    })
    where = f"{len(regions)} region(s)" if regions else "full frame"
    print(f"{where}, {bins} bins at {rate:g} Hz -> {args.out}")
    return EXIT_OK


# --------------------------------------------------------------------------
# train

TRAIN_SCHEMA = Schema.from_dataclass(TrainConfig, rename={"rng_seed": "seed"})


def cmd_train(args) -> int:
    if args.resume:
        raise CliError("--resume is not supported: training always starts from a fresh initialisation")
    values, explicit = parse_config(args.config, TRAIN_SCHEMA, args.set)
    values["seed"] = resolve_seed(args.seed, values, explicit)
    try:
        cfg = TrainConfig(**{("rng_seed" if k == "seed" else k): v for k, v in values.items()})
    except ValueError as e:
        raise CliError(str(e)) from None
    if not Path(args.manifest).is_file():
        raise CliError(f"manifest not found: {args.manifest}")
    try:
        result = train(args.manifest, cfg)
    except TrainingDiverged as e:
        raise CliError(f"training diverged: {e}", EXIT_NUMERIC) from None
    except ValueError as e:
        code = EXIT_EMPTY if "empty" in str(e) or "no speckle" in str(e) else EXIT_USAGE
        raise CliError(str(e), code) from None
    save_params(result.params, args.out)
    log_path = args.log or f"{args.out}.loss.csv"
    write_loss_log(result.log, log_path)
    write_sidecar(args.out, "train", values, {"manifest": args.manifest, "log": log_path})
    if result.log:
        first, last = smoothed(result.log)
        print(f"loss (20-step mean) {first:.4f} -> {last:.4f}; model -> {args.out}")
    return EXIT_OK


# --------------------------------------------------------------------------
# evaluate


def _resample(audio: AudioSignal, rate: float) -> AudioSignal:
    if audio.sample_rate == rate:
        return audio
    frac = Fraction(int(round(rate)), int(round(audio.sample_rate))).limit_denominator(1000)
    return AudioSignal(rate, sps.resample_poly(audio.samples, frac.numerator, frac.denominator))


def cmd_evaluate(args) -> int:
    ref = _read_wav(args.ref)
    est = _read_wav(args.est)
    if len(ref) < 2 or len(est) < 2:
        raise CliError("empty audio", EXIT_EMPTY)
    est = _resample(est, ref.sample_rate)
    n = min(len(ref), len(est))
    r, e = ref.samples[:n], est.samples[:n]
    if not np.any(r):
        raise CliError(f"{args.ref}: reference is silent", EXIT_EMPTY)
    aligned, lag, gain = align(r, e, ref.sample_rate, args.max_lag_ms)
    snr_db = snr(r, aligned)
    score = ""
    if args.speech:
        try:
            score = f"{stoi(r, aligned, ref.sample_rate):.6f}"
        except ValueError as err:
            raise CliError(str(err), EXIT_EMPTY) from None
    lag_ms = lag / ref.sample_rate * 1e3
    row = [f"{snr_db:.6f}", score, f"{lag_ms:.6f}", f"{gain:.6g}"]
    out = args.out or _stem_path(args.est, ".metrics.csv")
    with open(out, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["snr_db", "stoi", "best_lag_ms", "best_gain"])
        w.writerow(row)
    print(f"snr_db={row[0]} stoi={score or '-'} best_lag_ms={row[2]} best_gain={row[3]}")
    return EXIT_OK


# --------------------------------------------------------------------------
# plot


def write_pgm(path: str | os.PathLike, image: np.ndarray) -> None:
    """8-bit binary PGM (P5); ``image`` is rows x cols in [0, 255]."""
    img = np.clip(np.round(image), 0, 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{img.shape[1]} {img.shape[0]}\n255\n".encode("ascii"))
        fh.write(img.tobytes())


def read_pgm(path: str | os.PathLike) -> np.ndarray:
    raw = Path(path).read_bytes()
    parts = raw.split(maxsplit=4)
    if parts[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM")
    w, h = int(parts[1]), int(parts[2])
    return np.frombuffer(parts[4], dtype=np.uint8, count=w * h).reshape(h, w)


def _plot_spectrogram(audio: AudioSignal, args):
    spec = stft(audio, args.window, args.hop)
    db = 20 * np.log10(np.maximum(spec.magnitudes, 1e-12))
    top = db.max()
    image = (np.clip(db, top - args.range_db, top) - (top - args.range_db)) / args.range_db * 255
    freqs = spec.frequencies()
    times = (np.arange(len(db)) * args.hop + args.window / 2) / audio.sample_rate
    rows = []
    for k in range(len(db)):
        rows.append([k, f"{times[k]:.6f}", f"{freqs[np.argmax(spec.magnitudes[k])]:.3f}",
                     *(f"{v:.3f}" for v in db[k])])
    header = ["frame", "time_s", "argmax_hz", *(f"{f:.3f}" for f in freqs)]
    return image.T[::-1], header, rows


def _plot_waveform(audio: AudioSignal, args):
    w, h = args.width, args.height
    x = audio.samples
    peak = np.max(np.abs(x)) or 1.0
    image = np.full((h, w), 255.0)
    edges = np.linspace(0, len(x), w + 1).astype(int)
    for c in range(w):
        seg = x[edges[c]:max(edges[c + 1], edges[c] + 1)]
        lo = int(round((1 - seg.max() / peak) * (h - 1) / 2))
        hi = int(round((1 - seg.min() / peak) * (h - 1) / 2))
        image[lo:hi + 1, c] = 0
    rows = [[f"{t:.6f}", repr(float(v))] for t, v in zip(audio.times(), x)]
    return image, ["time_s", "value"], rows


def _plot_eventframe(stream: EventStream, args):
    end = int(stream.t[-1]) + 1
    counts = accumulate_frame(stream, (0, end))
    top = counts.max()
    image = counts / top * 255 if top else np.zeros_like(counts, dtype=float)
    rows = [[y, x, int(counts[y, x])] for y in range(stream.height) for x in range(stream.width)]
    return image, ["y", "x", "count"], rows


def cmd_plot(args) -> int:
    if args.kind == "eventframe":
        stream = _read_events(args.input)
        if len(stream) == 0:
            raise CliError(f"{args.input}: no events", EXIT_EMPTY)
        image, header, rows = _plot_eventframe(stream, args)
    else:
        audio = _read_wav(args.input)
        if len(audio) == 0:
            raise CliError(f"{args.input}: empty audio", EXIT_EMPTY)
        if args.kind == "spectrogram":
            if len(audio) < args.window:
                raise CliError(f"{args.input}: shorter than the {args.window}-sample window", EXIT_EMPTY)
            image, header, rows = _plot_spectrogram(audio, args)
        else:
            image, header, rows = _plot_waveform(audio, args)
    write_pgm(args.out, image)
    data = args.data or f"{args.out}.csv"
    with open(data, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)
    print(f"{args.kind} -> {args.out} (data: {data})")
    return EXIT_OK


# --------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="eventsound", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, seed: bool = True):
        sp.add_argument("--config", help="key = value configuration file")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
        if seed:
            sp.add_argument("--seed", type=int, help=f"random seed (default: config, then ${SEED_ENV}, then 0)")

    s = sub.add_parser("simulate", help="render a vibrating speckle scene to events")
    common(s)
    s.add_argument("--audio", action="append", required=True,
                   help="driving WAV; repeat to drive speckles round-robin from several sources")
    s.add_argument("--out", required=True, help="output event file")
    s.add_argument("--truth", help="ground-truth WAV (single source only)")
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("dataset", help="simulate every WAV in a directory into a training set")
    common(s)
    s.add_argument("--audio-dir", required=True)
    s.add_argument("--out-dir", required=True)
    s.set_defaults(func=cmd_dataset)

    s = sub.add_parser("recover", help="recover audio from an event file")
    common(s, seed=False)
    s.add_argument("events")
    s.add_argument("--method", choices=("evphase", "oracle", "learned"), default="evphase")
    s.add_argument("--model", help="model file (learned method)")
    s.add_argument("--regions", help="'auto' or 'cx,cy[,w,h];...'")
    s.add_argument("--postprocess", help="comma-separated steps: highpass, specsub")
    s.add_argument("--stereo", help="also write the first two regions as a stereo WAV")
    s.add_argument("--out", required=True, help="pooled output WAV")
    s.set_defaults(func=cmd_recover)

    s = sub.add_parser("train", help="two-phase SGD training from a dataset manifest")
    common(s)
    s.add_argument("--manifest", required=True)
    s.add_argument("--out", required=True, help="output model file")
    s.add_argument("--log", help="loss log CSV (default: <out>.loss.csv)")
    s.add_argument("--resume", action="store_true", help="not supported; rejected with an error")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("evaluate", help="SNR (and STOI) after lag and gain alignment")
    s.add_argument("ref")
    s.add_argument("est")
    s.add_argument("--speech", action="store_true", help="also report STOI")
    s.add_argument("--max-lag-ms", type=float, default=10.0)
    s.add_argument("--out", help="metrics CSV (default: <est>.metrics.csv)")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("plot", help="spectrogram, waveform or accumulated event frame as PGM + CSV")
    s.add_argument("input")
    s.add_argument("--kind", choices=("spectrogram", "eventframe", "waveform"), required=True)
    s.add_argument("--out", required=True, help="output PGM image")
    s.add_argument("--data", help="CSV data dump (default: <out>.csv)")
    s.add_argument("--window", type=int, default=256)
    s.add_argument("--hop", type=int, default=64)
    s.add_argument("--range-db", type=float, default=80.0)
    s.add_argument("--width", type=int, default=512)
    s.add_argument("--height", type=int, default=128)
    s.set_defaults(func=cmd_plot)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except CliError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.code
    except FloatingPointError as e:
        print(f"error: numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
