"""Log-power mel spectrogram features (900 frames x 120 mel bands, dB)."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np

from dnsmos.audio import CLIP_SAMPLES, SAMPLE_RATE, AudioClip
from dnsmos.errors import CorruptHeader, WrongLength

FRAME_LENGTH = 320  # 20 ms
HOP_LENGTH = 160  # 10 ms
N_FFT = 512
N_BINS = N_FFT // 2 + 1
N_MELS = 120
N_FRAMES = -(-CLIP_SAMPLES // HOP_LENGTH)  # 900
F_MIN_HZ = 0.0
F_MAX_HZ = 8000.0
POWER_FLOOR = 1e-12
FLOOR_DB = 10.0 * np.log10(POWER_FLOOR)

DUMP_MAGIC = b"DMFT"
DUMP_VERSION = 1


@dataclass(frozen=True, eq=False)
class MelFilterbank:
    weights: np.ndarray  # (n_mels, n_bins)
    centers_hz: np.ndarray
    f_min_hz: float = F_MIN_HZ
    f_max_hz: float = F_MAX_HZ
    scale: str = "htk"


@dataclass(frozen=True, eq=False)
class FeatureMatrix:
    values: np.ndarray  # (900, 120) float32, dB
    clip_id: str = ""

    @property
    def shape(self):
        return self.values.shape


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


@lru_cache(maxsize=None)
def mel_filterbank_matrix(n_mels: int = N_MELS, n_fft: int = N_FFT, sample_rate: int = SAMPLE_RATE,
                          f_min: float = F_MIN_HZ, f_max: float = F_MAX_HZ) -> MelFilterbank:
    """Unnormalized triangular HTK-mel filterbank.

    Edges are equally spaced on the mel scale. At 120 bands the lowest
    triangles are narrower than one FFT bin, so each triangle's half-widths
    are widened to at least one bin spacing; this keeps every band
    non-empty and leaves wider filters untouched.
    """
    bin_hz = sample_rate / n_fft
    freqs = np.arange(n_fft // 2 + 1) * bin_hz
    edges = mel_to_hz(np.linspace(hz_to_mel(f_min), hz_to_mel(f_max), n_mels + 2))
    centers = edges[1:-1]
    left = np.minimum(edges[:-2], centers - bin_hz)
    right = np.maximum(edges[2:], centers + bin_hz)

    f = freqs[None, :]
    rising = (f - left[:, None]) / (centers - left)[:, None]
    falling = (right[:, None] - f) / (right - centers)[:, None]
    weights = np.maximum(0.0, np.minimum(rising, falling))
    weights.setflags(write=False)
    centers.setflags(write=False)
    return MelFilterbank(weights=weights, centers_hz=centers, f_min_hz=f_min, f_max_hz=f_max)


@lru_cache(maxsize=None)
def _window() -> np.ndarray:
    n = np.arange(FRAME_LENGTH)
    w = 0.5 - 0.5 * np.cos(2.0 * np.pi * n / FRAME_LENGTH)  # periodic Hann
    w.setflags(write=False)
    return w


def _check_canonical(clip: AudioClip):
    if clip.sample_rate_hz != SAMPLE_RATE or len(clip) != CLIP_SAMPLES:
        raise WrongLength(
            f"expected {CLIP_SAMPLES} samples at {SAMPLE_RATE} Hz, got {len(clip)} at {clip.sample_rate_hz} Hz"
        )


def frame_signal(x: np.ndarray) -> np.ndarray:
    """(N_FRAMES, FRAME_LENGTH) frames starting every hop, zero-padded past the end."""
    padded = np.zeros(HOP_LENGTH * (N_FRAMES - 1) + FRAME_LENGTH)
    padded[:x.shape[0]] = x
    return np.lib.stride_tricks.sliding_window_view(padded, FRAME_LENGTH)[::HOP_LENGTH]


def power_spectrogram(clip: AudioClip) -> np.ndarray:
    _check_canonical(clip)
    frames = frame_signal(clip.samples) * _window()
    spec = np.fft.rfft(frames, n=N_FFT, axis=1)
    return spec.real ** 2 + spec.imag ** 2


def extract_features(clip: AudioClip) -> FeatureMatrix:
    """10*log10 of floored mel power; no normalization of any kind."""
    power = power_spectrogram(clip)
    mel = power @ mel_filterbank_matrix().weights.T
    values = 10.0 * np.log10(np.maximum(mel, POWER_FLOOR))
    return FeatureMatrix(values.astype(np.float32), clip.source_id)


def save_features(features: FeatureMatrix, path) -> None:
    rows, cols = features.values.shape
    header = struct.pack("<4sIII", DUMP_MAGIC, DUMP_VERSION, rows, cols)
    Path(path).write_bytes(header + np.ascontiguousarray(features.values, dtype="<f4").tobytes())


def load_features(path) -> FeatureMatrix:
    path = Path(path)
    data = path.read_bytes()
    if len(data) < 16:
        raise CorruptHeader("feature dump shorter than its header")
    magic, version, rows, cols = struct.unpack("<4sIII", data[:16])
    if magic != DUMP_MAGIC or version != DUMP_VERSION:
        raise CorruptHeader(f"bad feature dump header in {path}")
    if len(data) != 16 + 4 * rows * cols:
        raise CorruptHeader(f"feature dump {path} has wrong payload size")
    values = np.frombuffer(data, dtype="<f4", offset=16).reshape(rows, cols).astype(np.float32)
    return FeatureMatrix(values, path.stem)
