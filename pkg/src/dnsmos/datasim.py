"""Synthetic noisy-speech clips with hidden ground-truth MOS and noisy crowd ratings.

Each clip is a harmonic "speech surrogate" mixed with white, pink or
babble-like noise at a drawn SNR, then passed through a simulated noise
suppressor that attenuates the noise by ``15 * quality`` dB. The hidden
oracle MOS is a logistic function of the resulting effective SNR, and
ratings are drawn around it with a per-run bias and per-vote rater noise.
"""

from __future__ import annotations

import csv
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import expit

from dnsmos.audio import CLIP_SAMPLES, SAMPLE_RATE, AudioClip, write_wav

NOISE_TYPES = ("white", "pink", "babble")
CATEGORIES = ("English", "Non-English", "Tonal", "Emotional", "Singing")
SUPPRESSION_DB_PER_QUALITY = 15.0

# per-category surrogate style: f0 range, f0 excursion (semitones), AM depth,
# syllable rate (Hz), formant centers (Hz)
_STYLES = {
    "English": dict(f0=(100.0, 220.0), glide=2.0, am=0.9, rate=4.0, formants=(500.0, 1500.0, 2500.0)),
    "Non-English": dict(f0=(110.0, 240.0), glide=2.5, am=0.9, rate=5.0, formants=(400.0, 1200.0, 2800.0)),
    "Tonal": dict(f0=(110.0, 260.0), glide=7.0, am=0.85, rate=4.5, formants=(550.0, 1600.0, 2600.0)),
    "Emotional": dict(f0=(150.0, 300.0), glide=5.0, am=1.0, rate=3.0, formants=(700.0, 1800.0, 3000.0)),
    "Singing": dict(f0=(130.0, 300.0), glide=1.0, am=0.4, rate=1.0, formants=(600.0, 1100.0, 2900.0)),
}


@dataclass(frozen=True)
class SynthSpec:
    n_clips: int = 200
    snr_range_db: tuple = (-5.0, 20.0)
    n_suppressors: int = 20
    noise_types: tuple = NOISE_TYPES
    categories: tuple = CATEGORIES
    level_range_dbfs: tuple = (-30.0, -10.0)
    seed: int = 0

    def __post_init__(self):
        if self.n_clips < 1:
            raise ValueError("n_clips must be >= 1")
        lo, hi = self.snr_range_db
        if not lo < hi:
            raise ValueError("snr_range_db must be a non-degenerate (low, high) interval")
        if self.n_suppressors < 1:
            raise ValueError("n_suppressors must be >= 1")
        unknown = set(self.noise_types) - set(NOISE_TYPES)
        if unknown or not self.noise_types:
            raise ValueError(f"unknown noise types {sorted(unknown)}")
        if not self.categories or set(self.categories) - set(_STYLES):
            raise ValueError(f"categories must be drawn from {sorted(_STYLES)}")

    def suppressor_qualities(self) -> np.ndarray:
        """Quality in [0, 1] for each suppressor id, evenly spread and seed-shuffled."""
        q = np.linspace(0.0, 1.0, self.n_suppressors) if self.n_suppressors > 1 else np.array([0.5])
        return np.random.default_rng([self.seed, 0x5EED]).permutation(q)


@dataclass(frozen=True, eq=False)
class GeneratedClip:
    clip: AudioClip
    speech: np.ndarray  # clean component at output gain
    noise: np.ndarray  # unsuppressed noise at output gain (clip = speech + noise_gain * noise)
    noise_gain: float
    metadata: dict = field(default_factory=dict)


@dataclass(frozen=True)
class SimulatedRating:
    clip_id: str
    oracle_mos: float
    votes: tuple
    run_id: str
    run_bias: float

    @property
    def mean(self) -> float:
        return float(np.mean(self.votes))

    @property
    def num_votes(self) -> int:
        return len(self.votes)

    @property
    def std(self) -> float:
        return float(np.std(self.votes, ddof=1)) if len(self.votes) > 1 else 0.0


def _key(s: str) -> int:
    return zlib.crc32(s.encode())


def suppressor_id(j: int) -> str:
    return f"ns{j:03d}"


def clip_id(index: int) -> str:
    return f"clip{index:06d}"


def _speech_surrogate(rng, style: dict, n: int) -> np.ndarray:
    t = np.arange(n) / SAMPLE_RATE
    f0_base = rng.uniform(*style["f0"])
    # slow pitch contour: a few random-phase sinusoids, excursion in semitones
    contour = sum(np.sin(2 * np.pi * rng.uniform(0.2, 1.5) * t + rng.uniform(0, 2 * np.pi)) for _ in range(3)) / 3
    f0 = f0_base * 2.0 ** (style["glide"] * contour / 12.0)
    phase = 2 * np.pi * np.cumsum(f0) / SAMPLE_RATE
    formants = np.array(style["formants"]) * rng.uniform(0.9, 1.1, size=3)

    x = np.zeros(n)
    n_harm = int(4000.0 // style["f0"][0])
    for k in range(1, n_harm + 1):
        fk = k * f0_base
        if fk > 7000.0:
            break
        envelope = 0.1 + sum(np.exp(-0.5 * ((fk - fc) / 150.0) ** 2) for fc in formants)
        x += envelope / k * np.sin(k * phase)

    # syllabic amplitude modulation with pauses
    syll = 0.5 + 0.5 * np.sin(2 * np.pi * style["rate"] * t + rng.uniform(0, 2 * np.pi))
    gate_rate = 0.5
    gate = (np.sin(2 * np.pi * gate_rate * t + rng.uniform(0, 2 * np.pi)) > -0.6).astype(float)
    am = (1.0 - style["am"]) + style["am"] * syll ** 2
    return x * am * gate


def _noise(rng, kind: str, n: int) -> np.ndarray:
    if kind == "white":
        return rng.standard_normal(n)
    if kind == "pink":
        spec = np.fft.rfft(rng.standard_normal(n))
        f = np.arange(spec.shape[0])
        spec[1:] /= np.sqrt(f[1:])
        spec[0] = 0.0
        return np.fft.irfft(spec, n)
    # babble surrogate: sum of amplitude-modulated tones
    t = np.arange(n) / SAMPLE_RATE
    out = np.zeros(n)
    for _ in range(24):
        f = rng.uniform(150.0, 3500.0)
        mod = 0.5 + 0.5 * np.sin(2 * np.pi * rng.uniform(1.0, 6.0) * t + rng.uniform(0, 2 * np.pi))
        out += mod * np.sin(2 * np.pi * f * t + rng.uniform(0, 2 * np.pi))
    return out


def _power(x: np.ndarray) -> float:
    return float(np.mean(x * x))


def oracle_mos(snr_db, suppressor_quality):
    """Hidden ground truth: 1 + 4 * logistic((snr + 15 * quality - 10) / 6)."""
    snr_eff = np.asarray(snr_db, dtype=np.float64) + SUPPRESSION_DB_PER_QUALITY * np.asarray(suppressor_quality)
    value = 1.0 + 4.0 * expit((snr_eff - 10.0) / 6.0)
    return float(value) if value.ndim == 0 else value


def _draw_metadata(spec: SynthSpec, index: int, rng) -> dict:
    if not 0 <= index < spec.n_clips:
        raise IndexError(f"index {index} outside [0, {spec.n_clips})")
    j = index % spec.n_suppressors
    quality = float(spec.suppressor_qualities()[j])
    category = spec.categories[int(rng.integers(len(spec.categories)))]
    noise_type = spec.noise_types[int(rng.integers(len(spec.noise_types)))]
    snr_db = float(rng.uniform(*spec.snr_range_db))
    level_dbfs = float(rng.uniform(*spec.level_range_dbfs))
    return {
        "clip_id": clip_id(index),
        "snr_db": snr_db,
        "suppressor_id": suppressor_id(j),
        "suppressor_quality": quality,
        "category": category,
        "noise_type": noise_type,
        "level_dbfs": level_dbfs,
        "oracle_mos": oracle_mos(snr_db, quality),
    }


def clip_metadata(spec: SynthSpec, index: int) -> dict:
    """The metadata ``gen_clip(spec, index)`` would attach, without synthesizing audio."""
    return _draw_metadata(spec, index, np.random.default_rng([spec.seed, index]))


def gen_clip(spec: SynthSpec, index: int, snr_db: float | None = None) -> GeneratedClip:
    """Deterministically synthesize clip ``index``; ``snr_db`` overrides the drawn SNR.

    ``snr_db=float('inf')`` yields noise-free speech.
    """
    rng = np.random.default_rng([spec.seed, index])
    meta = _draw_metadata(spec, index, rng)
    if snr_db is not None:
        meta["snr_db"] = float(snr_db)
        meta["oracle_mos"] = oracle_mos(min(float(snr_db), 1e3), meta["suppressor_quality"])
    snr_db = meta["snr_db"]

    speech = _speech_surrogate(rng, _STYLES[meta["category"]], CLIP_SAMPLES)
    noise = _noise(rng, meta["noise_type"], CLIP_SAMPLES)
    if np.isinf(snr_db) and snr_db > 0:
        noise = np.zeros(CLIP_SAMPLES)
    else:
        noise *= np.sqrt(_power(speech) / _power(noise) / 10.0 ** (snr_db / 10.0))
    noise_gain = 10.0 ** (-SUPPRESSION_DB_PER_QUALITY * meta["suppressor_quality"] / 20.0)
    mix = speech + noise_gain * noise
    scale = 10.0 ** (meta["level_dbfs"] / 20.0) / np.max(np.abs(mix))
    speech, noise, mix = speech * scale, noise * scale, mix * scale
    return GeneratedClip(AudioClip(mix, SAMPLE_RATE, meta["clip_id"], dict(meta)), speech, noise, noise_gain, meta)


def simulate_ratings(oracle: float, n_votes: int, rater_sigma: float, run_bias_sigma: float, seed: int,
                     run_id: str = "run0", clip_id: str = "") -> SimulatedRating:
    """Votes ``clamp(oracle + b + N(0, rater_sigma), 1, 5)``.

    The run bias ``b ~ N(0, run_bias_sigma)`` depends only on ``(seed, run_id)``,
    so clips rated in the same run share it.
    """
    if n_votes < 1:
        raise ValueError("n_votes must be >= 1")
    bias = float(np.random.default_rng([seed, _key(run_id)]).normal(0.0, run_bias_sigma)) if run_bias_sigma > 0 else 0.0
    noise = np.random.default_rng([seed, _key(run_id), _key(clip_id)]).normal(0.0, 1.0, size=n_votes)
    votes = np.clip(oracle + bias + rater_sigma * noise, 1.0, 5.0)
    return SimulatedRating(clip_id, float(oracle), tuple(float(v) for v in votes), run_id, bias)


@dataclass(frozen=True)
class RatingConfig:
    votes_range: tuple = (5, 10)  # inclusive
    rater_sigma: float = 1.0
    run_bias_sigma: float = 0.25
    n_runs: int = 4
    seed: int = 0


def rate_clip(meta: dict, config: RatingConfig, index: int, run_prefix: str = "run") -> SimulatedRating:
    rng = np.random.default_rng([config.seed, index, 0xB07E])
    n_votes = int(rng.integers(config.votes_range[0], config.votes_range[1] + 1))
    run_id = f"{run_prefix}{int(rng.integers(config.n_runs))}"
    return simulate_ratings(meta["oracle_mos"], n_votes, config.rater_sigma, config.run_bias_sigma,
                            config.seed, run_id=run_id, clip_id=meta["clip_id"])


MANIFEST_FIELDS = ("clip_id", "path", "mos", "num_votes", "std", "suppressor_id", "category")
ORACLE_FIELDS = ("clip_id", "oracle_mos", "snr_db", "suppressor_quality", "noise_type", "level_dbfs",
                 "run_id", "run_bias")


@dataclass
class SimulatedDataset:
    manifest_path: Path
    oracle_path: Path
    rows: list
    oracle_rows: list


def make_dataset(spec: SynthSpec, rating_config: RatingConfig, out_dir) -> SimulatedDataset:
    """Write ``clips/*.wav``, ``manifest.csv`` and the hidden ``oracle.csv`` under ``out_dir``."""
    out_dir = Path(out_dir)
    (out_dir / "clips").mkdir(parents=True, exist_ok=True)
    rows, oracle_rows = [], []
    for index in range(spec.n_clips):
        g = gen_clip(spec, index)
        meta = g.metadata
        rel = f"clips/{meta['clip_id']}.wav"
        write_wav(out_dir / rel, g.clip.samples.astype(np.float32))
        r = rate_clip(meta, rating_config, index)
        rows.append({
            "clip_id": meta["clip_id"], "path": rel, "mos": repr(r.mean), "num_votes": str(r.num_votes),
            "std": repr(r.std), "suppressor_id": meta["suppressor_id"], "category": meta["category"],
        })
        oracle_rows.append({
            "clip_id": meta["clip_id"], "oracle_mos": repr(meta["oracle_mos"]), "snr_db": repr(meta["snr_db"]),
            "suppressor_quality": repr(meta["suppressor_quality"]), "noise_type": meta["noise_type"],
            "level_dbfs": repr(meta["level_dbfs"]), "run_id": r.run_id, "run_bias": repr(r.run_bias),
        })
    manifest_path = out_dir / "manifest.csv"
    oracle_path = out_dir / "oracle.csv"
    _write_csv(manifest_path, MANIFEST_FIELDS, rows)
    _write_csv(oracle_path, ORACLE_FIELDS, oracle_rows)
    return SimulatedDataset(manifest_path, oracle_path, rows, oracle_rows)


def _write_csv(path: Path, fields, rows) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields, lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)
