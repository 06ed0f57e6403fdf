"""Learned recovery: patch featurizer, spatial attention and a zero-order-hold SSM.

The forward pass is written once in float64 torch; gradients come from
reverse-mode autodiff of that code, including the truncated series used for
the matrix exponential.
"""
from __future__ import annotations

import math
import os
import struct
from dataclasses import dataclass, fields, replace

import numpy as np
import torch

from .dsp import MEL_SCALES, AudioSignal, hann, mel_filterbank
from .events import PatchSet

N_STATS = 6
DTYPE = torch.float64

# --------------------------------------------------------------------------
# parameters


@dataclass
class ModelParams:
    feat_w: np.ndarray   # C x 6
    attn_q: np.ndarray   # C x C, head h uses columns h*C/H:(h+1)*C/H
    attn_k: np.ndarray
    attn_v: np.ndarray
    attn_o: np.ndarray   # C x C
    ssm_a: np.ndarray    # S x S
    ssm_b: np.ndarray    # S x C
    ssm_c: np.ndarray    # 1 x S
    log_delta: np.ndarray  # scalar, delta = exp(log_delta)
    gate_w: np.ndarray   # C
    gate_b: np.ndarray   # scalar
    stat_scale: np.ndarray | None = None  # fixed divisor per statistic, not trained
    heads: int = 2
    use_sab: bool = False
    use_gate: bool = False

    TENSORS = ("feat_w", "attn_q", "attn_k", "attn_v", "attn_o", "ssm_a", "ssm_b", "ssm_c",
               "log_delta", "gate_w", "gate_b")

    def __post_init__(self):
        for name in self.TENSORS:
            setattr(self, name, np.asarray(getattr(self, name), dtype=np.float64))
        if self.stat_scale is None:
            self.stat_scale = np.ones(N_STATS)
        self.stat_scale = np.asarray(self.stat_scale, dtype=np.float64)
        if self.stat_scale.shape != (N_STATS,) or np.any(self.stat_scale <= 0):
            raise ValueError("stat_scale must hold 6 positive values")
        c, s = self.channels, self.state_size
        if self.feat_w.shape != (c, N_STATS):
            raise ValueError("feat_w must be C x 6")
        if c % self.heads:
            raise ValueError("C must be divisible by the head count")
        for name in ("attn_q", "attn_k", "attn_v", "attn_o"):
            if getattr(self, name).shape != (c, c):
                raise ValueError(f"{name} must be C x C")
        if self.ssm_a.shape != (s, s) or self.ssm_b.shape != (s, c) or self.ssm_c.shape != (1, s):
            raise ValueError("inconsistent SSM shapes")
        if self.gate_w.shape != (c,) or self.log_delta.shape != () or self.gate_b.shape != ():
            raise ValueError("inconsistent gate/delta shapes")

    @property
    def channels(self) -> int:
        return self.feat_w.shape[0]

    @property
    def state_size(self) -> int:
        return self.ssm_a.shape[0]

    @property
    def delta(self) -> float:
        return float(np.exp(self.log_delta))

    def tensors(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in self.TENSORS}

    def with_tensors(self, values: dict[str, np.ndarray]) -> "ModelParams":
        return replace(self, **values)

    def zeros_like(self) -> "ModelParams":
        return self.with_tensors({k: np.zeros_like(v) for k, v in self.tensors().items()})


def _uniform(rng: np.random.Generator, shape, bound: float) -> np.ndarray:
    return rng.uniform(-bound, bound, size=shape)


def init_attention(params: ModelParams, rng: np.random.Generator, qk_scale: float = 0.1) -> ModelParams:
    """Fresh attention weights: small random query/key, identity value/output maps.

    Near-uniform attention with identity maps reproduces the mean-pooled
    model exactly, so the block starts from the phase-1 solution.
    """
    c = params.channels
    b = qk_scale / math.sqrt(c)
    eye = np.eye(c)
    return params.with_tensors({
        "attn_q": _uniform(rng, (c, c), b), "attn_k": _uniform(rng, (c, c), b),
        "attn_v": eye.copy(), "attn_o": eye.copy(),
    })


SSM_TIME_UNIT_S = 0.005


def init_params(channels: int = 8, state_size: int = 8, heads: int = 2, delta: float = 0.05,
                seed: int = 0, use_sab: bool = False, use_gate: bool = False,
                stat_scale: np.ndarray | None = None) -> ModelParams:
    """Stable initial parameters.

    ``delta`` is one bin expressed in SSM time units (default: 250 us bins,
    5 ms units), so ``A = -I`` forgets the input over about 1 / delta bins.
    """
    rng = np.random.default_rng(seed)
    c, s = channels, state_size
    b = 1 / math.sqrt(c)
    small = 1 / math.sqrt(s)
    p = ModelParams(
        feat_w=_uniform(rng, (c, N_STATS), 1 / math.sqrt(N_STATS)),
        attn_q=_uniform(rng, (c, c), b), attn_k=_uniform(rng, (c, c), b),
        attn_v=_uniform(rng, (c, c), b), attn_o=_uniform(rng, (c, c), b),
        ssm_a=-np.eye(s),
        ssm_b=_uniform(rng, (s, c), small),
        ssm_c=_uniform(rng, (1, s), small),
        log_delta=np.array(math.log(delta)),
        gate_w=np.zeros(c), gate_b=np.array(math.log(math.expm1(delta))),
        stat_scale=stat_scale, heads=heads, use_sab=use_sab, use_gate=use_gate,
    )
    return p


def bin_delta(sample_rate: float, time_unit_s: float = SSM_TIME_UNIT_S) -> float:
    """Discretization step for bins at ``sample_rate`` in SSM time units."""
    return 1.0 / (sample_rate * time_unit_s)


def statistic_scale(stats: np.ndarray) -> np.ndarray:
    """RMS of each statistic over the bins where it is non-zero (1 if never)."""
    flat = np.asarray(stats, np.float64).reshape(-1, N_STATS)
    nz = np.maximum((flat != 0).sum(axis=0), 1)
    rms = np.sqrt((flat**2).sum(axis=0) / nz)
    return np.where(rms > 0, rms, 1.0)


# --------------------------------------------------------------------------
# features


def patch_statistics(patches: PatchSet) -> np.ndarray:
    """Per patch and bin: ``[m+, m-, x+ - cx, y+ - cy, x- - cx, y- - cy]``.

    Masses are summed voxel values; centroid offsets are mass-weighted and
    relative to the patch centre, and are zero when the mass is zero.
    """
    out = []
    for patch in patches.patches:
        _, _, ph, pw = patch.shape
        xs = np.arange(pw) - pw // 2
        ys = np.arange(ph) - ph // 2
        mass = patch.sum(axis=(2, 3))                       # T x 2
        mx = (patch.sum(axis=2) * xs).sum(axis=2)           # T x 2
        my = (patch.sum(axis=3) * ys).sum(axis=2)
        with np.errstate(divide="ignore", invalid="ignore"):
            cx = np.where(mass > 0, mx / mass, 0.0)
            cy = np.where(mass > 0, my / mass, 0.0)
        out.append(np.stack([mass[:, 0], mass[:, 1], cx[:, 0], cy[:, 0], cx[:, 1], cy[:, 1]], axis=1))
    return np.stack(out)


@dataclass
class PatchFeatures:
    values: np.ndarray  # N x T x C


def extract_patch_features(patches: PatchSet, feat_w: np.ndarray,
                           stat_scale: np.ndarray | None = None) -> PatchFeatures:
    """Linear, bias-free map of the per-bin statistics; empty bins give zero features."""
    feat_w = np.asarray(feat_w, np.float64)
    if feat_w.ndim != 2 or feat_w.shape[1] != N_STATS:
        raise ValueError(f"featurizer weights must have {N_STATS} columns")
    stats = patch_statistics(patches)
    if stat_scale is not None:
        stats = stats / np.asarray(stat_scale, np.float64)
    return PatchFeatures(stats @ feat_w.T)


# --------------------------------------------------------------------------
# torch building blocks


def _t(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x
    return torch.as_tensor(np.asarray(x, dtype=np.float64), dtype=DTYPE)


def attention_t(f: torch.Tensor, q, k, v, o, heads: int) -> torch.Tensor:
    """Multi-head self-attention over patches, independently per bin; f is N x T x C."""
    n, t, c = f.shape
    if n == 0:
        raise ValueError("at least one patch is required")
    dh = c // heads
    x = f.transpose(0, 1)                                     # T x N x C

    def split(w):
        return (x @ w).reshape(t, n, heads, dh).transpose(1, 2)  # T x H x N x dh

    qh, kh, vh = split(q), split(k), split(v)
    scores = qh @ kh.transpose(-1, -2) / math.sqrt(dh)
    scores = scores - scores.amax(dim=-1, keepdim=True).detach()
    w = torch.exp(scores)
    w = w / w.sum(dim=-1, keepdim=True)
    out = (w @ vh).transpose(1, 2).reshape(t, n, c) @ o
    return out.transpose(0, 1)


_TAYLOR_ORDER = 18


def _expm_phi_t(m: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """``exp(M)`` and ``phi(M) = sum_k M^k / (k+1)!`` by scaling and squaring.

    Works on batches (... x S x S). The argument is scaled so every matrix
    has 1-norm <= 1/2 before an order-18 Taylor series (truncation below
    1e-16); squaring uses ``phi(2M) = phi(M) (exp(M) + I) / 2``.
    """
    norm = m.detach().abs().sum(dim=-2).amax().item() if m.numel() else 0.0
    if not math.isfinite(norm):
        raise FloatingPointError("non-finite matrix in the SSM discretization")
    squarings = max(0, int(math.ceil(math.log2(norm / 0.5)))) if norm > 0.5 else 0
    ms = m / (2.0 ** squarings)
    eye = torch.eye(m.shape[-1], dtype=m.dtype).expand_as(m)
    term = eye
    e = eye
    phi = eye
    for k in range(1, _TAYLOR_ORDER + 1):
        term = term @ ms / k
        e = e + term
        phi = phi + term / (k + 1)
    for _ in range(squarings):
        phi = phi @ (e + eye) / 2
        e = e @ e
    return e, phi


def discretize_t(a: torch.Tensor, b: torch.Tensor, delta: torch.Tensor):
    """Zero-order hold: ``(exp(dA), phi(dA) d B)`` with batched ``delta`` allowed."""
    d = delta[..., None, None]
    e, phi = _expm_phi_t(d * a)
    return e, phi @ (d * b)


def linear_scan_t(abar: torch.Tensor, u: torch.Tensor) -> torch.Tensor:
    """States of ``h_t = abar_t h_{t-1} + u_t`` with ``h_{-1} = 0``.

    ``u`` is N x T x S. ``abar`` is either S x S (shared by all steps) or
    N x T x S x S. Log-depth doubling over the time axis.
    """
    n, t, s = u.shape
    h = u
    shared = abar.dim() == 2
    m = abar
    shift = 1
    while shift < t:
        if shared:
            prev = h[:, :-shift] @ m.T
            h = torch.cat([h[:, :shift], h[:, shift:] + prev], dim=1)
            m = m @ m
        else:
            prev = (m[:, shift:] @ h[:, :-shift, :, None])[..., 0]
            h = torch.cat([h[:, :shift], h[:, shift:] + prev], dim=1)
            m = torch.cat([m[:, :shift], m[:, shift:] @ m[:, :-shift]], dim=1)
        shift *= 2
    return h


def ssm_t(g: torch.Tensor, a, b, c, log_delta, gate_w=None, gate_b=None):
    """Per-patch SSM outputs (N x T) and their mean over patches (T)."""
    if g.shape[-1] != b.shape[1]:
        raise ValueError("feature width does not match the SSM input matrix")
    if gate_w is None:
        abar, bbar = discretize_t(a, b, torch.exp(log_delta))
        u = g @ bbar.T
    else:
        delta = torch.nn.functional.softplus(g @ gate_w + gate_b)     # N x T
        abar, bbar = discretize_t(a, b, delta)                         # N x T x S x S / S x C
        u = (bbar @ g[..., None])[..., 0]
    h = linear_scan_t(abar, u)
    o = (h @ c.T)[..., 0]
    return o, o.mean(dim=0)


def forward_t(stats: torch.Tensor, tp: dict[str, torch.Tensor], params: ModelParams):
    f = (stats / _t(params.stat_scale)) @ tp["feat_w"].T
    if params.use_sab:
        f = attention_t(f, tp["attn_q"], tp["attn_k"], tp["attn_v"], tp["attn_o"], params.heads)
    gate = (tp["gate_w"], tp["gate_b"]) if params.use_gate else (None, None)
    return ssm_t(f, tp["ssm_a"], tp["ssm_b"], tp["ssm_c"], tp["log_delta"], *gate)


# --------------------------------------------------------------------------
# public numpy-level operations


def spatial_aggregate(f, params: ModelParams) -> np.ndarray:
    """Attention over patches at every bin; ``f`` is N x T x C."""
    f = f.values if isinstance(f, PatchFeatures) else f
    f = np.asarray(f, np.float64)
    if f.ndim != 3 or f.shape[0] == 0:
        raise ValueError("features must be N x T x C with N >= 1")
    if f.shape[2] != params.channels:
        raise ValueError("feature width does not match the attention parameters")
    with torch.no_grad():
        out = attention_t(_t(f), _t(params.attn_q), _t(params.attn_k), _t(params.attn_v),
                          _t(params.attn_o), params.heads)
    return out.numpy()


def ssm_discretize(a, b, delta: float) -> tuple[np.ndarray, np.ndarray]:
    """``(exp(delta A), (delta A)^-1 (exp(delta A) - I) delta B)`` via the series form."""
    a = np.atleast_2d(np.asarray(a, np.float64))
    b = np.asarray(b, np.float64)
    b = b.reshape(a.shape[0], -1)
    if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b)) and np.isfinite(delta)):
        raise ValueError("non-finite SSM input")
    if delta <= 0:
        raise ValueError("delta must be > 0")
    with torch.no_grad():
        abar, bbar = discretize_t(_t(a), _t(b), _t(float(delta)))
    return abar.numpy(), bbar.numpy()


def ssm_states(g, params: ModelParams) -> np.ndarray:
    """Hidden states ``h`` (N x T x S) of the time-invariant recurrence."""
    g = np.asarray(g, np.float64)
    if g.ndim != 3 or g.shape[2] != params.channels:
        raise ValueError("features must be N x T x C with C matching the SSM")
    with torch.no_grad():
        abar, bbar = discretize_t(_t(params.ssm_a), _t(params.ssm_b), torch.exp(_t(params.log_delta)))
        return linear_scan_t(abar, _t(g) @ bbar.T).numpy()


def ssm_forward(g, params: ModelParams, sample_rate: float = 1.0) -> tuple[np.ndarray, AudioSignal]:
    g = np.asarray(g, np.float64)
    if g.ndim != 3 or g.shape[2] != params.channels:
        raise ValueError("features must be N x T x C with C matching the SSM")
    gate = (_t(params.gate_w), _t(params.gate_b)) if params.use_gate else (None, None)
    with torch.no_grad():
        o, pooled = ssm_t(_t(g), _t(params.ssm_a), _t(params.ssm_b), _t(params.ssm_c),
                          _t(params.log_delta), *gate)
    return o.numpy(), AudioSignal(sample_rate, pooled.numpy())


def patch_outputs(patches: PatchSet, params: ModelParams) -> tuple[np.ndarray, AudioSignal]:
    """Per-patch outputs (N x T) and their mean, the model's recovered audio."""
    stats = _t(patch_statistics(patches))
    tp = {k: _t(v) for k, v in params.tensors().items()}
    with torch.no_grad():
        per, pooled = forward_t(stats, tp, params)
    return per.numpy(), AudioSignal(patches.sample_rate, pooled.numpy())


def model_forward(patches: PatchSet, params: ModelParams) -> AudioSignal:
    return patch_outputs(patches, params)[1]


# --------------------------------------------------------------------------
# losses

SISNR_EPS = 1e-12
MEL_FLOOR = 1e-7
MEL_BANDS = 64


def _samples(x) -> torch.Tensor:
    if isinstance(x, AudioSignal):
        return _t(x.samples)
    return _t(x)


def sisnr_t(est: torch.Tensor, ref: torch.Tensor, eps: float = SISNR_EPS, zero_mean: bool = True):
    if est.shape != ref.shape:
        raise ValueError("est and ref lengths differ")
    if est.shape[-1] < 2:
        raise ValueError("signals need at least two samples")
    if zero_mean:
        est = est - est.mean()
        ref = ref - ref.mean()
    ref_energy = (ref * ref).sum()
    if ref_energy.item() == 0:
        raise ValueError("reference is identically zero")
    alpha = (est * ref).sum() / ref_energy
    target = alpha * ref
    res = est - target
    return -10 * torch.log10((target * target).sum() / ((res * res).sum() + eps))


def loss_sisnr(est, ref, eps: float = SISNR_EPS, zero_mean: bool = True) -> float:
    """Negative scale-invariant SNR in dB."""
    with torch.no_grad():
        return float(sisnr_t(_samples(est), _samples(ref), eps, zero_mean))


_FB_CACHE: dict[tuple, torch.Tensor] = {}


def _mel_weights(sample_rate: float, scale: int, bands: int) -> torch.Tensor:
    key = (float(sample_rate), scale, bands)
    if key not in _FB_CACHE:
        _FB_CACHE[key] = _t(mel_filterbank(sample_rate, scale, bands).weights)
    return _FB_CACHE[key]


def mel_t(x: torch.Tensor, sample_rate: float, scale: int, bands: int = MEL_BANDS) -> torch.Tensor:
    hop = max(1, scale // 4)
    frames = x.unfold(-1, scale, hop) * _t(hann(scale))
    spec = torch.fft.rfft(frames, dim=-1).abs()
    return spec @ _mel_weights(sample_rate, scale, bands).T


def _l2(x: torch.Tensor) -> torch.Tensor:
    sq = (x * x).sum()
    # subgradient 0 at the origin instead of NaN
    return torch.where(sq > 0, torch.sqrt(torch.where(sq > 0, sq, torch.ones_like(sq))), sq)


def spec_t(est: torch.Tensor, ref: torch.Tensor, sample_rate: float, scales=MEL_SCALES,
           bands: int = MEL_BANDS, floor: float = MEL_FLOOR) -> torch.Tensor:
    if est.shape != ref.shape:
        raise ValueError("est and ref lengths differ")
    if est.shape[-1] < max(scales):
        raise ValueError(f"signal shorter than the largest window {max(scales)}")
    total = est.new_zeros(())
    for s in scales:
        se = mel_t(est, sample_rate, s, bands)
        sr = mel_t(ref, sample_rate, s, bands)
        alpha = math.sqrt(s / 2)
        log_diff = torch.log(torch.clamp(se, min=floor)) - torch.log(torch.clamp(sr, min=floor))
        total = total + (se - sr).abs().sum() + alpha * _l2(log_diff)
    return total


def spectral_weight(scale: int) -> float:
    return math.sqrt(scale / 2)


def loss_spec(est, ref, sample_rate: float | None = None, scales=MEL_SCALES) -> float:
    """Multi-scale Mel reconstruction loss (L1 on magnitudes + weighted L2 on logs)."""
    if sample_rate is None:
        if not isinstance(est, AudioSignal):
            raise ValueError("sample_rate required for raw arrays")
        sample_rate = est.sample_rate
    if isinstance(est, AudioSignal) and isinstance(ref, AudioSignal) and est.sample_rate != ref.sample_rate:
        raise ValueError("sample rates differ")
    with torch.no_grad():
        return float(spec_t(_samples(est), _samples(ref), sample_rate, scales))


def total_t(est, ref, sample_rate, beta):
    ls = sisnr_t(est, ref)
    if beta == 0:
        return ls, ls, est.new_zeros(())
    lp = spec_t(est, ref, sample_rate)
    return ls + beta * lp, ls, lp


def loss_total(est, ref, beta: float = 1e-4, sample_rate: float | None = None) -> float:
    if sample_rate is None:
        sample_rate = est.sample_rate if isinstance(est, AudioSignal) else 1.0
    with torch.no_grad():
        return float(total_t(_samples(est), _samples(ref), sample_rate, beta)[0])


# --------------------------------------------------------------------------
# gradients


@dataclass
class LossValues:
    total: float
    sisnr: float
    spec: float


def loss_and_grad(params: ModelParams, stats: np.ndarray, ref: np.ndarray, sample_rate: float,
                  beta: float = 1e-4) -> tuple[LossValues, ModelParams]:
    """Loss and reverse-mode gradient for precomputed patch statistics (N x T x 6)."""
    tp = {k: _t(v).clone().requires_grad_(True) for k, v in params.tensors().items()}
    _, pooled = forward_t(_t(stats), tp, params)
    total, ls, lp = total_t(pooled, _t(ref), sample_rate, beta)
    if not torch.isfinite(total):
        raise FloatingPointError("non-finite loss")
    total.backward()
    grads = {k: (v.grad.numpy().copy() if v.grad is not None else np.zeros_like(params.tensors()[k]))
             for k, v in tp.items()}
    return LossValues(total.item(), ls.item(), lp.item()), params.with_tensors(grads)


def grad(params: ModelParams, batch: tuple[PatchSet, AudioSignal], beta: float = 1e-4) -> ModelParams:
    """Gradient of the total loss for one (patches, reference audio) pair."""
    patches, ref = batch
    ref_samples = ref.samples if isinstance(ref, AudioSignal) else np.asarray(ref, np.float64)
    _, g = loss_and_grad(params, patch_statistics(patches), ref_samples, patches.sample_rate, beta)
    return g


# --------------------------------------------------------------------------
# serialization

MODEL_MAGIC = b"EVM1"
MODEL_VERSION = 1
_MODEL_HEADER = struct.Struct("<4sHIIII")  # magic, version, C, S, H, flags


def save_params(params: ModelParams, path: str | os.PathLike) -> None:
    flags = int(params.use_sab) | (int(params.use_gate) << 1)
    with open(path, "wb") as fh:
        fh.write(_MODEL_HEADER.pack(MODEL_MAGIC, MODEL_VERSION, params.channels, params.state_size,
                                    params.heads, flags))
        for name in ModelParams.TENSORS + ("stat_scale",):
            fh.write(np.ascontiguousarray(getattr(params, name), dtype="<f8").tobytes())


def _tensor_shapes(c: int, s: int) -> dict[str, tuple]:
    return {
        "feat_w": (c, N_STATS), "attn_q": (c, c), "attn_k": (c, c), "attn_v": (c, c), "attn_o": (c, c),
        "ssm_a": (s, s), "ssm_b": (s, c), "ssm_c": (1, s), "log_delta": (), "gate_w": (c,), "gate_b": (), "stat_scale": (N_STATS,),
    }


def load_params(path: str | os.PathLike) -> ModelParams:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < _MODEL_HEADER.size or raw[:4] != MODEL_MAGIC:
        raise ValueError(f"{path}: not a model file")
    _, version, c, s, h, flags = _MODEL_HEADER.unpack_from(raw)
    if version != MODEL_VERSION:
        raise ValueError(f"{path}: unsupported model version {version}")
    off = _MODEL_HEADER.size
    values = {}
    for name, shape in _tensor_shapes(c, s).items():
        n = int(np.prod(shape, dtype=np.int64))
        if off + 8 * n > len(raw):
            raise ValueError(f"{path}: truncated at tensor {name}")
        values[name] = np.frombuffer(raw, dtype="<f8", count=n, offset=off).reshape(shape).copy()
        off += 8 * n
    if off != len(raw):
        raise ValueError(f"{path}: {len(raw) - off} trailing bytes")
    return ModelParams(**values, heads=h, use_sab=bool(flags & 1), use_gate=bool(flags & 2))


def param_fields() -> list[str]:
    return [f.name for f in fields(ModelParams)]
