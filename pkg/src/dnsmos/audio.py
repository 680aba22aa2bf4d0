"""WAV loading, mono mixdown, resampling and 9 s clip preparation."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from math import gcd
from pathlib import Path

import numpy as np
from scipy.signal import firwin, resample_poly

from dnsmos.errors import CorruptHeader, EmptyClip, UnsupportedFormat, UnsupportedRate

SAMPLE_RATE = 16000
CLIP_SECONDS = 9
CLIP_SAMPLES = SAMPLE_RATE * CLIP_SECONDS  # 144000
SUPPORTED_RATES = (8000, 16000, 44100, 48000)

# polyphase low-pass: taps per output phase and Kaiser shape
RESAMPLER_TAPS_PER_PHASE = 64
RESAMPLER_KAISER_BETA = 8.0
RESAMPLER_TAG = "polyphase-kaiser8-64"

POLICIES = ("pad-or-trim", "segment-average")

_FORMAT_PCM = 0x0001
_FORMAT_FLOAT = 0x0003
_FORMAT_EXTENSIBLE = 0xFFFE


@dataclass(frozen=True, eq=False)
class AudioClip:
    samples: np.ndarray
    sample_rate_hz: int = SAMPLE_RATE
    source_id: str = ""
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim != 1:
            raise ValueError("AudioClip samples must be one-dimensional")
        if not np.all(np.isfinite(samples)):
            raise ValueError("AudioClip samples must be finite")
        samples.setflags(write=False)
        object.__setattr__(self, "samples", samples)

    def __len__(self):
        return self.samples.shape[0]

    @property
    def duration_s(self) -> float:
        return len(self) / self.sample_rate_hz

    def with_samples(self, samples, **meta) -> "AudioClip":
        return AudioClip(samples, self.sample_rate_hz, self.source_id, {**self.metadata, **meta})


def _parse_fmt(body: bytes):
    if len(body) < 16:
        raise CorruptHeader("fmt chunk shorter than 16 bytes")
    tag, channels, rate, _byte_rate, block_align, bits = struct.unpack("<HHIIHH", body[:16])
    if tag == _FORMAT_EXTENSIBLE:
        if len(body) < 40:
            raise CorruptHeader("truncated WAVE_FORMAT_EXTENSIBLE fmt chunk")
        tag = struct.unpack("<H", body[24:26])[0]
    return tag, channels, rate, block_align, bits


def decode_wav(data: bytes, source_id: str = "") -> AudioClip:
    """Decode an in-memory RIFF/WAVE file to a mono 16 kHz clip."""
    if len(data) < 12 or data[:4] != b"RIFF" or data[8:12] != b"WAVE":
        raise CorruptHeader("not a RIFF/WAVE container")

    fmt = None
    payload = None
    pos = 12
    while pos + 8 <= len(data):
        chunk_id = data[pos:pos + 4]
        size = struct.unpack("<I", data[pos + 4:pos + 8])[0]
        body = data[pos + 8:pos + 8 + size]
        if chunk_id == b"fmt ":
            fmt = _parse_fmt(body)
        elif chunk_id == b"data":
            payload = body  # a short body means a truncated stream; keep whole frames
            break
        pos += 8 + size + (size & 1)

    if fmt is None:
        raise CorruptHeader("missing fmt chunk")
    if payload is None:
        raise CorruptHeader("missing data chunk")

    tag, channels, rate, block_align, bits = fmt
    if tag == _FORMAT_PCM and bits == 16:
        dtype = np.dtype("<i2")
    elif tag == _FORMAT_FLOAT and bits == 32:
        dtype = np.dtype("<f4")
    else:
        raise UnsupportedFormat(f"format tag {tag:#06x} with {bits} bits per sample")
    if channels == 0:
        raise CorruptHeader("zero channels")
    if channels > 2:
        raise UnsupportedFormat(f"{channels} channels (at most 2 supported)")
    if block_align != channels * dtype.itemsize:
        raise CorruptHeader(f"block align {block_align} inconsistent with format")
    if rate not in SUPPORTED_RATES:
        raise UnsupportedRate(f"{rate} Hz not in {SUPPORTED_RATES}")

    n_frames = len(payload) // block_align
    raw = np.frombuffer(payload[:n_frames * block_align], dtype=dtype).reshape(n_frames, channels)
    if dtype.kind == "i":
        x = raw.astype(np.float64) / 32768.0
    else:
        x = raw.astype(np.float64)
        if not np.all(np.isfinite(x)):
            raise CorruptHeader("non-finite float samples")
        np.clip(x, -1.0, 1.0, out=x)

    mono = x[:, 0] if channels == 1 else 0.5 * (x[:, 0] + x[:, 1])
    meta = {"original_rate_hz": rate, "channels": channels, "resampler": None}
    if rate != SAMPLE_RATE:
        mono = resample(mono, rate, SAMPLE_RATE)
        meta["resampler"] = RESAMPLER_TAG
    return AudioClip(mono, SAMPLE_RATE, source_id, meta)


def load_wav(path) -> AudioClip:
    path = Path(path)
    return decode_wav(path.read_bytes(), source_id=path.stem)


def resampler_kernel(up: int, down: int) -> np.ndarray:
    """Linear-phase low-pass prototype for an up/down polyphase resampler."""
    max_rate = max(up, down)
    n_taps = RESAMPLER_TAPS_PER_PHASE * max_rate + 1
    return firwin(n_taps, 1.0 / max_rate, window=("kaiser", RESAMPLER_KAISER_BETA))


def resample(x: np.ndarray, rate_in: int, rate_out: int) -> np.ndarray:
    if rate_in == rate_out:
        return np.asarray(x, dtype=np.float64)
    g = gcd(rate_in, rate_out)
    up, down = rate_out // g, rate_in // g
    return resample_poly(np.asarray(x, dtype=np.float64), up, down, window=resampler_kernel(up, down))


def write_wav(path, samples, sample_rate_hz: int = SAMPLE_RATE, fmt: str = "float32") -> None:
    """Write mono or (n, 2) stereo samples as PCM16 or IEEE float32."""
    Path(path).write_bytes(encode_wav(samples, sample_rate_hz, fmt))


def encode_wav(samples, sample_rate_hz: int = SAMPLE_RATE, fmt: str = "float32") -> bytes:
    x = np.asarray(samples, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    channels = x.shape[1]
    if fmt == "float32":
        tag, width = _FORMAT_FLOAT, 4
        payload = x.astype("<f4").tobytes()
    elif fmt == "pcm16":
        tag, width = _FORMAT_PCM, 2
        payload = np.clip(np.round(x * 32768.0), -32768, 32767).astype("<i2").tobytes()
    else:
        raise ValueError(f"unknown sample format {fmt!r}")
    block = channels * width
    fmt_chunk = struct.pack("<4sIHHIIHH", b"fmt ", 16, tag, channels, sample_rate_hz,
                            sample_rate_hz * block, block, 8 * width)
    data_chunk = struct.pack("<4sI", b"data", len(payload)) + payload
    if len(payload) & 1:
        data_chunk += b"\0"
    body = b"WAVE" + fmt_chunk + data_chunk
    return struct.pack("<4sI", b"RIFF", len(body)) + body


def prepare_clip(clip: AudioClip, policy: str = "pad-or-trim"):
    """Bring a 16 kHz clip to the canonical 144000-sample length.

    ``pad-or-trim`` returns one clip (zero-padded or truncated at the tail).
    ``segment-average`` returns a list of non-overlapping 9 s windows, the
    last one zero-padded; callers average the per-window scores.
    """
    if policy not in POLICIES:
        raise ValueError(f"unknown policy {policy!r}; expected one of {POLICIES}")
    if clip.sample_rate_hz != SAMPLE_RATE:
        raise UnsupportedRate(f"clip is at {clip.sample_rate_hz} Hz, expected {SAMPLE_RATE}")
    n = len(clip)
    if n == 0:
        raise EmptyClip(f"clip {clip.source_id!r} has no samples")

    if policy == "pad-or-trim":
        if n == CLIP_SAMPLES:
            return clip
        return clip.with_samples(_fit_length(clip.samples, CLIP_SAMPLES))

    n_segments = -(-n // CLIP_SAMPLES)
    return [
        clip.with_samples(_fit_length(clip.samples[k * CLIP_SAMPLES:(k + 1) * CLIP_SAMPLES], CLIP_SAMPLES),
                          segment=k)
        for k in range(n_segments)
    ]


def _fit_length(x: np.ndarray, n: int) -> np.ndarray:
    if x.shape[0] >= n:
        return x[:n]
    out = np.zeros(n, dtype=np.float64)
    out[:x.shape[0]] = x
    return out
