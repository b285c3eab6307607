"""Glue between data, encoders and metrics used by the CLI and the benchmarks."""

from __future__ import annotations

from typing import Callable, Dict, Mapping, Optional, Sequence

import numpy as np

from .audio import AudioConfig, MelFrames, mel_frontend
from .dataset import AnnotatedClip
from .encoders import EncoderParams, encode_audio, encode_text
from .evaluation import (EventList, default_thresholds, detections_per_threshold,
                         retrieval_metrics, score_track, segment_pauroc)
from .losses import pool_frames
from .psds import psds
from .training import TrainExample, weak_caption_of


def compute_mels(clips: Sequence[AnnotatedClip], load: Callable[[int], object],
                 config: Optional[AudioConfig] = None) -> Dict[str, MelFrames]:
    """Mel features per clip id; ``load(i)`` returns the Waveform of ``clips[i]``."""
    cfg = config or AudioConfig()
    return {clip.clip_id: mel_frontend(load(i), cfg.hop, cfg.mel_bins)
            for i, clip in enumerate(clips)}


def training_examples(clips: Sequence[AnnotatedClip],
                      mels: Mapping[str, MelFrames]) -> list:
    return [TrainExample(c.clip_id, mels[c.clip_id].frames,
                         [(r.onset, r.offset, r.text) for r in c.regions],
                         c.weak_caption, mels[c.clip_id].hop)
            for c in clips]


def score_tracks(params: EncoderParams, mels: Mapping[str, MelFrames],
                 descriptions: Mapping[str, str]) -> list:
    queries = {cls: encode_text(params, text) for cls, text in descriptions.items()}
    tracks = []
    for clip_id in sorted(mels):
        frames = encode_audio(params, mels[clip_id])
        for cls in sorted(queries):
            tracks.append(score_track(frames, queries[cls], clip_id, descriptions[cls], cls))
    return tracks


def detection_report(params: EncoderParams, mels: Mapping[str, MelFrames], truth: EventList,
                     descriptions: Mapping[str, str], durations: Mapping[str, float],
                     thresholds: Optional[Sequence[float]] = None, max_fpr: float = 0.1,
                     segment: float = 1.0, dtc: float = 0.7, gtc: float = 0.7,
                     max_efpr: float = 100.0) -> dict:
    """Segment pAUROC and PSDS1 of text-queried detection on ``mels``' clips."""
    ids = set(mels)
    truth = EventList([e for e in truth if e.clip_id in ids and e.label in descriptions])
    tracks = score_tracks(params, mels, descriptions)
    grid = default_thresholds() if thresholds is None else np.asarray(thresholds)
    pauroc = segment_pauroc(tracks, truth, max_fpr, segment)
    report = psds(detections_per_threshold(tracks, grid), truth,
                  {k: durations[k] for k in ids}, dtc, gtc, max_efpr)
    return {
        "pauroc": pauroc.to_dict(),
        "psds1": report.psds,
        "psds1_per_class": report.per_class,
        "psds_params": {"dtc": dtc, "gtc": gtc, "max_efpr_per_hour": max_efpr,
                        "variance_penalty": 0.0, "cross_trigger": 0.0,
                        "thresholds": [float(t) for t in grid]},
        "clips": len(ids),
    }


def retrieval_report(params: EncoderParams, examples: Sequence[TrainExample]) -> dict:
    """Text-to-audio retrieval with each clip's weak caption as its query."""
    audio = np.array([pool_frames(encode_audio(params, ex.mel).matrix) for ex in examples])
    text = np.array([encode_text(params, weak_caption_of(ex)).vector for ex in examples])
    return retrieval_metrics(text @ audio.T)
