"""The single inference path shared by the CLI and the HTTP service."""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor

import numpy as np

from dnsmos.audio import AudioClip, prepare_clip
from dnsmos.features import extract_features
from dnsmos.nnet import DnsmosModel, predict_batch


def score_clip(model: DnsmosModel, clip: AudioClip, clamp: bool = False, segment_average: bool = False) -> float:
    """MOS for one 16 kHz clip. Segment scores are averaged before any clamp."""
    if segment_average:
        segments = prepare_clip(clip, "segment-average")
    else:
        segments = [prepare_clip(clip, "pad-or-trim")]
    feats = np.stack([extract_features(s).values for s in segments])
    mos = float(np.mean(predict_batch(model, feats)))
    if clamp:
        mos = min(5.0, max(1.0, mos))
    return mos


def score_many(model: DnsmosModel, loaders, clamp: bool = False, segment_average: bool = False,
               jobs: int = 1) -> list:
    """Score clips produced by zero-argument ``loaders``; output order follows input order."""
    def one(load):
        return score_clip(model, load(), clamp, segment_average)

    if jobs <= 1:
        return [one(load) for load in loaders]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(one, loaders))
