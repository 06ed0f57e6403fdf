"""Audio I/O, spectral analysis, post-processing filters and evaluation metrics."""
from __future__ import annotations

import os
import wave
from dataclasses import dataclass

import numpy as np
from scipy import signal as sps


@dataclass
class AudioSignal:
    sample_rate: int
    samples: np.ndarray

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64).ravel()
        if self.sample_rate < 1:
            raise ValueError("sample_rate must be >= 1")
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("audio contains non-finite samples")

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def duration_s(self) -> float:
        return len(self.samples) / self.sample_rate

    def times(self) -> np.ndarray:
        return np.arange(len(self.samples)) / self.sample_rate


def _as_audio(x, sample_rate: int | None = None) -> AudioSignal:
    if isinstance(x, AudioSignal):
        return x
    return AudioSignal(sample_rate or 1, x)


# --------------------------------------------------------------------------
# WAV


def read_wav(path: str | os.PathLike) -> AudioSignal:
    """Read a mono PCM-16 WAV file into [-1, 1) floats."""
    try:
        wf = wave.open(os.fspath(path), "rb")
    except (wave.Error, EOFError) as e:
        raise ValueError(f"{path}: not a readable WAV file ({e})") from None
    with wf:
        if wf.getnchannels() != 1:
            raise ValueError(f"{path}: expected mono audio, found {wf.getnchannels()} channels")
        if wf.getsampwidth() != 2:
            raise ValueError(f"{path}: expected 16-bit PCM, found {8 * wf.getsampwidth()}-bit")
        rate = wf.getframerate()
        raw = wf.readframes(wf.getnframes())
    data = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
    return AudioSignal(rate, data)


def write_wav(path: str | os.PathLike, audio: AudioSignal | np.ndarray, sample_rate: int | None = None,
              normalize: bool = False) -> None:
    """Write PCM-16. A 2-D array of shape (n, 2) is written as stereo."""
    if isinstance(audio, AudioSignal):
        data, rate = audio.samples, audio.sample_rate
    else:
        data, rate = np.asarray(audio, dtype=np.float64), sample_rate
    if rate is None:
        raise ValueError("sample_rate required for raw arrays")
    if normalize:
        peak = np.max(np.abs(data)) if data.size else 0.0
        if peak > 0:
            data = data * (0.99 / peak)
    channels = 1 if data.ndim == 1 else data.shape[1]
    if channels not in (1, 2):
        raise ValueError("only mono or stereo output is supported")
    pcm = np.clip(np.round(data * 32767.0), -32768, 32767).astype("<i2")
    with wave.open(os.fspath(path), "wb") as wf:
        wf.setnchannels(channels)
        wf.setsampwidth(2)
        wf.setframerate(int(round(rate)))
        wf.writeframes(pcm.tobytes())


# --------------------------------------------------------------------------
# spectra


@dataclass
class Spectrogram:
    magnitudes: np.ndarray  # frames x bins
    window: int
    hop: int
    sample_rate: float

    def frequencies(self) -> np.ndarray:
        return np.fft.rfftfreq(self.window, 1.0 / self.sample_rate)


def hann(n: int) -> np.ndarray:
    """Periodic Hann window (COLA at hop n/4 and n/2)."""
    return 0.5 - 0.5 * np.cos(2 * np.pi * np.arange(n) / n)


def _frames(x: np.ndarray, window: int, hop: int) -> np.ndarray:
    n = (len(x) - window) // hop + 1
    idx = np.arange(window)[None, :] + hop * np.arange(n)[:, None]
    return x[idx]


def stft_complex(x: np.ndarray, window: int, hop: int) -> np.ndarray:
    if len(x) < window:
        raise ValueError(f"signal of length {len(x)} shorter than window {window}")
    return np.fft.rfft(_frames(np.asarray(x, np.float64), window, hop) * hann(window), axis=-1)


def stft(signal: AudioSignal, window: int, hop: int) -> Spectrogram:
    """Hann-windowed magnitude STFT without padding."""
    if hop < 1 or window < 2:
        raise ValueError("invalid window/hop")
    return Spectrogram(np.abs(stft_complex(signal.samples, window, hop)), window, hop, signal.sample_rate)


def istft(spec: np.ndarray, window: int, hop: int, length: int) -> np.ndarray:
    """Weighted overlap-add inverse of :func:`stft_complex`."""
    w = hann(window)
    frames = np.fft.irfft(spec, n=window, axis=-1) * w
    out = np.zeros(length)
    norm = np.zeros(length)
    for i, fr in enumerate(frames):
        s = i * hop
        out[s:s + window] += fr
        norm[s:s + window] += w * w
    nz = norm > 1e-8
    out[nz] /= norm[nz]
    return out


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


@dataclass
class MelFilterbank:
    weights: np.ndarray  # bands x bins
    centers_hz: np.ndarray
    fmin: float
    fmax: float

    @property
    def bands(self) -> int:
        return self.weights.shape[0]


def mel_filterbank(sample_rate: float, n_fft: int, bands: int = 64, fmin: float = 0.0,
                   fmax: float | None = None) -> MelFilterbank:
    """Unit-peak triangular filters on the HTK Mel scale.

    Filters narrower than the FFT bin spacing may be empty (all zero).
    """
    fmax = sample_rate / 2 if fmax is None else fmax
    edges = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), bands + 2))
    freqs = np.fft.rfftfreq(n_fft, 1.0 / sample_rate)
    lo, ce, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    up = (freqs[None, :] - lo) / (ce - lo)
    down = (hi - freqs[None, :]) / (hi - ce)
    weights = np.maximum(0.0, np.minimum(up, down))
    return MelFilterbank(weights, edges[1:-1].copy(), fmin, fmax)


MEL_SCALES = (64, 128, 256, 512)


def mel_spectrogram(signal: AudioSignal, scale: int, bands: int = 64) -> np.ndarray:
    """Mel magnitudes (frames x bands) with window ``scale`` and hop ``scale // 4``."""
    spec = stft(signal, scale, max(1, scale // 4))
    fb = mel_filterbank(signal.sample_rate, scale, bands)
    return spec.magnitudes @ fb.weights.T


def spectrum_peak(x: np.ndarray, sample_rate: float) -> tuple[float, float, np.ndarray, np.ndarray]:
    """Hann-windowed power spectrum; returns (peak_hz, peak_over_median_db, freqs, power)."""
    x = np.asarray(x, np.float64)
    x = x - x.mean()
    power = np.abs(np.fft.rfft(x * np.hanning(len(x)))) ** 2
    freqs = np.fft.rfftfreq(len(x), 1.0 / sample_rate)
    power[0] = 0.0
    k = int(np.argmax(power))
    floor = np.median(power[1:])
    ratio = 10 * np.log10(power[k] / floor) if floor > 0 else np.inf
    return float(freqs[k]), float(ratio), freqs, power


# --------------------------------------------------------------------------
# post-processing


def butterworth_highpass(signal: AudioSignal, cutoff_hz: float = 60.0, order: int = 4,
                         zero_phase: bool = False) -> AudioSignal:
    """Butterworth high-pass as cascaded second-order sections."""
    nyq = signal.sample_rate / 2
    if not 0 < cutoff_hz < nyq:
        raise ValueError(f"cutoff {cutoff_hz} Hz outside (0, {nyq}) Hz")
    if order < 1:
        raise ValueError("order must be >= 1")
    sos = sps.butter(order, cutoff_hz, btype="highpass", fs=signal.sample_rate, output="sos")
    filt = sps.sosfiltfilt if zero_phase else sps.sosfilt
    return AudioSignal(signal.sample_rate, filt(sos, signal.samples))


def estimate_noise_profile(noise: AudioSignal | np.ndarray, window: int = 256, hop: int = 64) -> np.ndarray:
    """Mean STFT magnitude per bin of a noise-only segment."""
    x = noise.samples if isinstance(noise, AudioSignal) else np.asarray(noise, np.float64)
    return np.abs(stft_complex(x, window, hop)).mean(axis=0)


def spectral_subtract(signal: AudioSignal, noise_profile: np.ndarray, window: int = 256, hop: int = 64,
                      over_subtraction: float = 1.0, floor: float = 0.02) -> AudioSignal:
    """Magnitude spectral subtraction with the noisy phase and overlap-add resynthesis."""
    noise_profile = np.asarray(noise_profile, np.float64)
    if noise_profile.shape != (window // 2 + 1,):
        raise ValueError(f"noise profile has {noise_profile.shape} bins, expected {window // 2 + 1}")
    x = signal.samples
    pad = window
    xp = np.pad(x, (pad, pad + hop))
    spec = stft_complex(xp, window, hop)
    mag = np.abs(spec)
    cleaned = np.maximum(mag - over_subtraction * noise_profile, floor * mag)
    out = istft(cleaned * np.exp(1j * np.angle(spec)), window, hop, len(xp))
    return AudioSignal(signal.sample_rate, out[pad:pad + len(x)])


# --------------------------------------------------------------------------
# metrics

SNR_CAP_DB = 100.0


def snr(ref, est) -> float:
    """10 log10(|ref|^2 / |est - ref|^2) in dB, capped at +100 dB."""
    r = _as_audio(ref).samples
    e = _as_audio(est).samples
    if len(r) != len(e):
        raise ValueError("length mismatch")
    p_ref = float(np.dot(r, r))
    if p_ref == 0:
        raise ValueError("reference is identically zero")
    p_err = float(np.dot(e - r, e - r))
    if p_err == 0:
        return SNR_CAP_DB
    return min(SNR_CAP_DB, 10 * np.log10(p_ref / p_err))


def si_snr_db(est: np.ndarray, ref: np.ndarray) -> float:
    """Scale-invariant SNR (zero-mean), in dB."""
    e = np.asarray(est, np.float64) - np.mean(est)
    r = np.asarray(ref, np.float64) - np.mean(ref)
    target = np.dot(e, r) / np.dot(r, r) * r
    res = e - target
    return float(10 * np.log10(np.dot(target, target) / max(np.dot(res, res), 1e-300)))


def fractional_shift(x: np.ndarray, lag: float) -> np.ndarray:
    """Delay ``x`` by ``lag`` samples (band-limited, via FFT on a zero-padded copy)."""
    n = len(x)
    m = 2 * n
    spec = np.fft.rfft(x, m)
    k = np.fft.rfftfreq(m)
    return np.fft.irfft(spec * np.exp(-2j * np.pi * k * lag), m)[:n]


def align(ref, est, sample_rate: float | None = None, max_lag_ms: float = 10.0,
          subsample: bool = True) -> tuple[np.ndarray, float, float]:
    """Shift and scale ``est`` to best match ``ref``.

    Returns ``(aligned_est, lag_samples, gain)`` where a positive lag means
    ``est`` lagged ``ref``. The lag is searched within +-``max_lag_ms`` on the
    cross-correlation and refined to sub-sample precision by parabolic
    interpolation; the gain is the least-squares scale (may be negative).
    """
    ref_a = _as_audio(ref, sample_rate)
    r = ref_a.samples
    e = _as_audio(est, sample_rate).samples
    fs = sample_rate or ref_a.sample_rate
    if len(r) != len(e):
        raise ValueError("length mismatch")
    n = len(r)
    max_lag = min(int(round(max_lag_ms * 1e-3 * fs)), n - 1)
    xc = sps.correlate(e, r, mode="full", method="fft")
    lags = np.arange(-n + 1, n)
    sel = np.abs(lags) <= max_lag
    lags, xc = lags[sel], xc[sel]
    k = int(np.argmax(np.abs(xc)))
    lag = float(lags[k])
    if subsample and 0 < k < len(xc) - 1:
        y0, y1, y2 = np.abs(xc[k - 1:k + 2])
        den = y0 - 2 * y1 + y2
        if den != 0:
            lag += float(np.clip(0.5 * (y0 - y2) / den, -0.5, 0.5))
    shifted = fractional_shift(e, -lag) if lag != int(lag) else np.roll(e, -int(lag))
    if lag == int(lag) and lag != 0:
        if lag > 0:
            shifted[-int(lag):] = 0.0
        else:
            shifted[:-int(lag)] = 0.0
    den = float(np.dot(shifted, shifted))
    gain = float(np.dot(shifted, r) / den) if den > 0 else 0.0
    return gain * shifted, lag, gain


# --------------------------------------------------------------------------
# STOI

_STOI_FS = 10000
_STOI_FRAME = 256
_STOI_NFFT = 512
_STOI_BANDS = 15
_STOI_FMIN = 150.0
_STOI_SEG = 30
_STOI_BETA_DB = -15.0
_STOI_DYN_RANGE = 40.0


def _third_octave_matrix(fs: int, nfft: int, bands: int, fmin: float) -> np.ndarray:
    f = np.linspace(0, fs, nfft + 1)[: nfft // 2 + 1]
    k = np.arange(bands)
    lo = fmin * 2.0 ** ((2 * k - 1) / 6.0)
    hi = fmin * 2.0 ** ((2 * k + 1) / 6.0)
    obm = np.zeros((bands, len(f)))
    for i in range(bands):
        a = int(np.argmin((f - lo[i]) ** 2))
        b = int(np.argmin((f - hi[i]) ** 2))
        obm[i, a:b] = 1.0
    return obm


def _stoi_frames(x: np.ndarray, n: int, hop: int) -> np.ndarray:
    # the last full frame is excluded, as in the reference MATLAB code
    starts = np.arange(0, len(x) - n, hop)
    return x[starts[:, None] + np.arange(n)[None, :]]


def _remove_silent_frames(x: np.ndarray, y: np.ndarray, dyn_range: float, n: int, hop: int):
    w = np.hanning(n + 2)[1:-1]
    xf = _stoi_frames(x, n, hop) * w
    yf = _stoi_frames(y, n, hop) * w
    energy = 20 * np.log10(np.linalg.norm(xf, axis=1) + np.finfo(float).eps)
    keep = (np.max(energy) - dyn_range - energy) < 0
    xf, yf = xf[keep], yf[keep]
    m = len(xf)
    length = (m - 1) * hop + n if m else 0
    xs = np.zeros(length)
    ys = np.zeros(length)
    for i in range(m):
        xs[i * hop:i * hop + n] += xf[i]
        ys[i * hop:i * hop + n] += yf[i]
    return xs, ys


def stoi(ref, est, fs: int | None = None) -> float:
    """Short-time objective intelligibility of ``est`` against clean ``ref``.

    Classic (non-extended) STOI: 10 kHz resampling, silent-frame removal,
    15 one-third-octave bands from 150 Hz, 384 ms segments and clipped
    envelope correlation.
    """
    r_a = _as_audio(ref, fs)
    x = r_a.samples
    y = _as_audio(est, fs).samples
    fs = fs or r_a.sample_rate
    if len(x) != len(y):
        raise ValueError("length mismatch")
    if fs != _STOI_FS:
        from math import gcd

        g = gcd(int(fs), _STOI_FS)
        x = sps.resample_poly(x, _STOI_FS // g, int(fs) // g)
        y = sps.resample_poly(y, _STOI_FS // g, int(fs) // g)
    min_len = int(0.384 * _STOI_FS)
    if len(x) < min_len:
        raise ValueError("signal too short for STOI (needs >= 384 ms)")
    hop = _STOI_FRAME // 2
    x, y = _remove_silent_frames(x, y, _STOI_DYN_RANGE, _STOI_FRAME, hop)
    if len(x) <= _STOI_FRAME:
        raise ValueError("signal too short for STOI after silence removal")
    w = np.hanning(_STOI_FRAME + 2)[1:-1]
    xs = np.fft.rfft(_stoi_frames(x, _STOI_FRAME, hop) * w, n=_STOI_NFFT).T
    ys = np.fft.rfft(_stoi_frames(y, _STOI_FRAME, hop) * w, n=_STOI_NFFT).T
    if xs.shape[1] < _STOI_SEG:
        raise ValueError("signal too short for STOI after silence removal")
    obm = _third_octave_matrix(_STOI_FS, _STOI_NFFT, _STOI_BANDS, _STOI_FMIN)
    xb = np.sqrt(obm @ np.abs(xs) ** 2)
    yb = np.sqrt(obm @ np.abs(ys) ** 2)
    n_seg = xb.shape[1] - _STOI_SEG + 1
    idx = np.arange(_STOI_SEG)[None, :] + np.arange(n_seg)[:, None]
    xseg = xb[:, idx].transpose(1, 0, 2)  # segments x bands x frames
    yseg = yb[:, idx].transpose(1, 0, 2)
    eps = np.finfo(float).eps
    norm = np.linalg.norm(xseg, axis=2, keepdims=True) / (np.linalg.norm(yseg, axis=2, keepdims=True) + eps)
    y_norm = yseg * norm
    clip = 10 ** (-_STOI_BETA_DB / 20)
    y_prime = np.minimum(y_norm, xseg * (1 + clip))
    y_prime = y_prime - y_prime.mean(axis=2, keepdims=True)
    xc = xseg - xseg.mean(axis=2, keepdims=True)
    y_prime = y_prime / (np.linalg.norm(y_prime, axis=2, keepdims=True) + eps)
    xc = xc / (np.linalg.norm(xc, axis=2, keepdims=True) + eps)
    return float(np.sum(y_prime * xc) / (xc.shape[0] * xc.shape[1]))


# --------------------------------------------------------------------------
# propagation phase


def phase_delay(sig_a, sig_b, freq_hz: float, sample_rate: float | None = None) -> tuple[float, float]:
    """Delay of ``sig_b`` relative to ``sig_a`` around ``freq_hz``.

    Both signals are band-passed to +-10 % of the frequency; the delay is the
    peak of their normalized cross-correlation within one period (parabolic
    sub-sample refinement). Returns ``(delay_s, phase_rad)`` with the phase
    wrapped to (-pi, pi].
    """
    a_sig = _as_audio(sig_a, sample_rate)
    a = a_sig.samples
    b = _as_audio(sig_b, sample_rate).samples
    fs = sample_rate or a_sig.sample_rate
    if len(a) != len(b):
        raise ValueError("length mismatch")
    sos = sps.butter(4, [0.9 * freq_hz, 1.1 * freq_hz], btype="bandpass", fs=fs, output="sos")
    fa = sps.sosfiltfilt(sos, a - a.mean())
    fb = sps.sosfiltfilt(sos, b - b.mean())
    for raw, filt in ((a, fa), (b, fb)):
        total = float(np.dot(raw - raw.mean(), raw - raw.mean()))
        if total == 0 or np.dot(filt, filt) < 1e-6 * total:
            raise ValueError(f"insufficient energy near {freq_hz} Hz")
    n = len(a)
    xc = sps.correlate(fb, fa, mode="full", method="fft") / np.sqrt(np.dot(fa, fa) * np.dot(fb, fb))
    lags = np.arange(-n + 1, n)
    period = fs / freq_hz
    sel = np.abs(lags) <= int(np.ceil(period))
    lags, xc = lags[sel], xc[sel]
    k = int(np.argmax(xc))
    lag = float(lags[k])
    if 0 < k < len(xc) - 1:
        y0, y1, y2 = xc[k - 1:k + 2]
        den = y0 - 2 * y1 + y2
        if den != 0:
            lag += float(np.clip(0.5 * (y0 - y2) / den, -0.5, 0.5))
    delay = lag / fs
    phase = 2 * np.pi * freq_hz * delay
    phase = float(np.pi - np.mod(np.pi - phase, 2 * np.pi))
    return delay, phase
