"""Sound recovery from event-camera recordings of vibrating laser speckle."""
from .classical import GaborParams, evphase_recover, gabor_kernel, gabor_phase, oracle_recover
from .dsp import (AudioSignal, align, butterworth_highpass, mel_spectrogram, phase_delay, read_wav, snr,
                  spectral_subtract, stft, stoi, write_wav)
from .events import (EventStream, PatchSet, RegionSpec, VoxelGrid, accumulate_frame, crop_patches,
                     extract_speckle_regions, read_events, voxelize, write_events)
from .learned import (ModelParams, init_params, load_params, loss_sisnr, loss_spec, loss_total, model_forward,
                      save_params, spatial_aggregate, ssm_discretize, ssm_forward)
from .simulator import DatasetConfig, Speckle, SpeckleSceneConfig, make_dataset, simulate_scene
from .train import TrainConfig, train, train_samples

__version__ = "0.1.0"

__all__ = [
    "GaborParams",
    "evphase_recover",
    "gabor_kernel",
    "gabor_phase",
    "oracle_recover",
    "AudioSignal",
    "align",
    "butterworth_highpass",
    "mel_spectrogram",
    "phase_delay",
    "read_wav",
    "snr",
    "spectral_subtract",
    "stft",
    "stoi",
    "write_wav",
    "EventStream",
    "PatchSet",
    "RegionSpec",
    "VoxelGrid",
    "accumulate_frame",
    "crop_patches",
    "extract_speckle_regions",
    "read_events",
    "voxelize",
    "write_events",
    "ModelParams",
    "init_params",
    "load_params",
    "loss_sisnr",
    "loss_spec",
    "loss_total",
    "model_forward",
    "save_params",
    "spatial_aggregate",
    "ssm_discretize",
    "ssm_forward",
    "DatasetConfig",
    "Speckle",
    "SpeckleSceneConfig",
    "make_dataset",
    "simulate_scene",
    "TrainConfig",
    "train",
    "train_samples",
]
