"""Non-learned recovery: Gabor phase tracking on event frames and direct event integration."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import signal as sps

from .dsp import AudioSignal
from .events import RegionSpec, VoxelGrid


@dataclass(frozen=True)
class GaborParams:
    n: int = 13
    sigma: float = 3.0
    lambd: float = 32.0
    gamma: float = 1.0
    phi: float = 0.0
    theta: float = np.pi / 2

    def __post_init__(self):
        if self.n < 3 or self.n % 2 == 0:
            raise ValueError("kernel size n must be odd and >= 3")
        if self.sigma <= 0 or self.lambd <= 0:
            raise ValueError("sigma and lambda must be > 0")


@dataclass
class PhaseSignal:
    """Unwrapped (accumulated) phase and the response amplitude per bin."""

    values: np.ndarray
    weights: np.ndarray

    def increments(self) -> np.ndarray:
        return np.diff(self.values, prepend=0.0)


def gabor_kernel(params: GaborParams = GaborParams(), dc_subtract: bool = True) -> np.ndarray:
    """Complex Gabor kernel; the real part is made zero-mean by default."""
    r = np.arange(params.n) - params.n // 2
    x, y = np.meshgrid(r, r)
    xr = x * np.cos(params.theta) + y * np.sin(params.theta)
    yr = -x * np.sin(params.theta) + y * np.cos(params.theta)
    envelope = np.exp(-(xr**2 + params.gamma**2 * yr**2) / (2 * params.sigma**2))
    k = envelope * np.exp(1j * (2 * np.pi * xr / params.lambd + params.phi))
    if dc_subtract:
        k = k - k.real.mean()
    return k


def _region_view(voxel: VoxelGrid, region: RegionSpec) -> np.ndarray:
    if not region.fits(voxel.width, voxel.height):
        raise ValueError(f"region {region.box()} outside the voxel grid")
    x0, y0, x1, y1 = region.box()
    view = voxel.values[:, :, y0:y1, x0:x1]
    if view.size == 0:
        raise ValueError("empty region")
    return view


def gabor_phase(voxel: VoxelGrid, params: GaborParams, region: RegionSpec, decay: float = 0.9,
                     anchor: float = 1.0) -> PhaseSignal:
    """Amplitude-weighted mean phase increment of the running Gabor response.

    The signed event image of every bin is filtered with the kernel and fed
    into a leaky accumulator ``R``. With ``anchor > 0`` the accumulator
    relaxes toward the filtered accumulated event frame of the region
    (scaled by ``anchor``) instead of toward zero, so the response keeps a
    static carrier whose phase is modulated by the events. ``anchor = 0``
    is the plain leaky accumulator.
    """
    if not 0 <= decay < 1:
        raise ValueError("decay must lie in [0, 1)")
    view = _region_view(voxel, region)
    kernel = gabor_kernel(params)
    signed = view[:, 0] - view[:, 1]
    filtered = sps.fftconvolve(signed, kernel[None], mode="same", axes=(1, 2))
    if anchor > 0:
        reference = anchor * sps.fftconvolve(view.sum(axis=(0, 1)), kernel, mode="same")
    else:
        reference = np.zeros(signed.shape[1:], dtype=complex)
    resp = reference.copy()
    values = np.zeros(len(signed))  # per-bin increments until the final cumsum
    weights = np.zeros(len(signed))
    relax = (1 - decay) * reference
    for t in range(len(signed)):
        new = decay * resp + relax + filtered[t]
        amp = np.abs(new)
        total = amp.sum()
        if total > 0:
            dphi = np.angle(new * np.conj(resp))  # wrapped to (-pi, pi]
            values[t] = np.dot(amp.ravel(), dphi.ravel()) / total
        weights[t] = total
        resp = new
    return PhaseSignal(np.cumsum(values), weights)


def evphase_recover(voxel: VoxelGrid, params: GaborParams = GaborParams(), region: RegionSpec | None = None,
                    decay: float = 0.9, anchor: float = 1.0) -> AudioSignal:
    """Recover a signal proportional to surface velocity from Gabor phase increments.

    The output is defined up to scale and sign, one sample per voxel bin.
    """
    if region is None:
        region = full_region(voxel)
    s = gabor_phase(voxel, params, region, decay, anchor).increments()
    s = s - s.mean()
    return AudioSignal(voxel.sample_rate, s)


def oracle_recover(voxel: VoxelGrid, region: RegionSpec | None = None) -> AudioSignal:
    """Cumulative signed event count over the region, mean removed.

    Each event marks one threshold step of log intensity, so the running sum
    follows the displacement up to sign, scale and offset. The region should
    cover one flank of a speckle: both flanks together cancel.
    """
    if region is None:
        region = full_region(voxel)
    view = _region_view(voxel, region)
    d = (view[:, 0] - view[:, 1]).sum(axis=(1, 2))
    out = np.cumsum(d)
    return AudioSignal(voxel.sample_rate, out - out.mean())


def full_region(voxel: VoxelGrid) -> RegionSpec:
    return RegionSpec((voxel.width // 2, voxel.height // 2), (voxel.width, voxel.height))
