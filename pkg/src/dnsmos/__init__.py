"""Non-intrusive speech quality (MOS) estimation with multi-stage self-teaching."""

from dnsmos.audio import AudioClip, load_wav, prepare_clip, write_wav
from dnsmos.features import extract_features, mel_filterbank_matrix, power_spectrogram
from dnsmos.nnet import (
    TABLE1,
    Architecture,
    DnsmosModel,
    FitConfig,
    fit,
    forward,
    init_model,
    load_model,
    mse_loss,
    predict_batch,
    save_model,
)
from dnsmos.selfteach import BlendSpec, blend_targets, train_pipeline

__version__ = "0.1.0"

__all__ = [
    "AudioClip",
    "Architecture",
    "BlendSpec",
    "DnsmosModel",
    "FitConfig",
    "TABLE1",
    "blend_targets",
    "extract_features",
    "fit",
    "forward",
    "init_model",
    "load_model",
    "load_wav",
    "mel_filterbank_matrix",
    "mse_loss",
    "power_spectrogram",
    "predict_batch",
    "prepare_clip",
    "save_model",
    "train_pipeline",
    "write_wav",
]
