"""Polyphonic sound detection score with intersection-based matching.

Cross-trigger cost is not modelled; the variance penalty defaults to 0.
"""

from __future__ import annotations

import math
from collections import defaultdict
from dataclasses import dataclass
from typing import Dict, List, Mapping, Sequence

import numpy as np

from .dataset import merge_overlapping_regions
from .evaluation import EventList


def _overlap(a: tuple, spans: Sequence[tuple]) -> float:
    return sum(max(0.0, min(a[1], off) - max(a[0], on)) for on, off in spans)


def match_class(detections: Sequence[tuple], truths: Sequence[tuple], dtc: float, gtc: float):
    """Intersection-criteria matching within one (clip, class).

    Returns ``(n_detected_truths, n_false_positives)``.
    """
    gt_union = merge_overlapping_regions(truths)
    valid = []
    false_pos = 0
    for d in detections:
        if _overlap(d, gt_union) / (d[1] - d[0]) >= dtc:
            valid.append(d)
        else:
            false_pos += 1
    det_union = merge_overlapping_regions(valid)
    hit = sum(1 for g in truths if _overlap(g, det_union) / (g[1] - g[0]) >= gtc)
    return hit, false_pos


@dataclass
class OperatingPoint:
    threshold: float
    tp: Dict[str, int]
    fp: Dict[str, int]
    tpr: Dict[str, float]
    efpr: Dict[str, float]


def operating_points(detections_per_threshold: Mapping[float, EventList], truth: EventList,
                     audio_durations: Mapping[str, float], dtc: float = 0.7,
                     gtc: float = 0.7) -> List[OperatingPoint]:
    if len(truth) == 0:
        raise ValueError("PSDS is undefined without ground-truth events")
    hours = math.fsum(audio_durations.values()) / 3600.0
    if hours <= 0:
        raise ValueError("total audio duration must be positive")
    missing = {e.clip_id for e in truth} - set(audio_durations)
    if missing:
        raise ValueError(f"no duration for clips {sorted(missing)[:5]}")
    classes = truth.labels()
    gt: Dict[tuple, list] = defaultdict(list)
    n_gt: Dict[str, int] = defaultdict(int)
    for e in truth:
        gt[(e.clip_id, e.label)].append((e.onset, e.offset))
        n_gt[e.label] += 1
    points = []
    for th in sorted(detections_per_threshold, reverse=True):
        dets: Dict[tuple, list] = defaultdict(list)
        for e in detections_per_threshold[th]:
            if e.label in n_gt:
                dets[(e.clip_id, e.label)].append((e.onset, e.offset))
        tp = dict.fromkeys(classes, 0)
        fp = dict.fromkeys(classes, 0)
        for key in set(dets) | set(gt):
            hit, false_pos = match_class(dets.get(key, []), gt.get(key, []), dtc, gtc)
            tp[key[1]] += hit
            fp[key[1]] += false_pos
        points.append(OperatingPoint(
            th, tp, fp, {c: tp[c] / n_gt[c] for c in classes},
            {c: fp[c] / hours for c in classes}))
    return points


def _step_curve(efpr: np.ndarray, tpr: np.ndarray, grid: np.ndarray) -> np.ndarray:
    """Best TPR reachable with eFPR <= each grid value (0 where nothing qualifies)."""
    order = np.argsort(efpr, kind="mergesort")
    x, y = efpr[order], np.maximum.accumulate(tpr[order])
    idx = np.searchsorted(x, grid, side="right") - 1
    return np.where(idx >= 0, y[np.maximum(idx, 0)], 0.0)


def _area(grid: np.ndarray, values: np.ndarray, max_efpr: float) -> float:
    widths = np.diff(np.r_[grid, max_efpr])
    return float(np.sum(widths * values) / max_efpr)


@dataclass
class PsdsReport:
    psds: float
    per_class: Dict[str, float]
    thresholds: List[float]
    dtc: float
    gtc: float
    max_efpr: float
    variance_penalty: float

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def psds(detections_per_threshold: Mapping[float, EventList], truth: EventList,
         audio_durations: Mapping[str, float], dtc: float = 0.7, gtc: float = 0.7,
         max_efpr: float = 100.0, variance_penalty: float = 0.0) -> PsdsReport:
    """Normalised area under the class-averaged TPR vs eFPR (per hour) curve.

    Each class curve is the step function "best TPR with eFPR <= x" over
    the given operating points; the effective curve is their mean minus
    ``variance_penalty`` times their standard deviation.
    """
    points = operating_points(detections_per_threshold, truth, audio_durations, dtc, gtc)
    classes = truth.labels()
    tpr = np.array([[p.tpr[c] for p in points] for c in classes]).reshape(len(classes), -1)
    efpr = np.array([[p.efpr[c] for p in points] for c in classes]).reshape(len(classes), -1)
    grid = np.unique(np.r_[0.0, efpr.ravel()])
    grid = grid[grid < max_efpr]
    if points:
        curves = np.array([_step_curve(efpr[k], tpr[k], grid) for k in range(len(classes))])
    else:
        curves = np.zeros((len(classes), len(grid)))
    effective = curves.mean(axis=0) - variance_penalty * curves.std(axis=0)
    per_class = {c: _area(grid, curves[k], max_efpr) for k, c in enumerate(classes)}
    return PsdsReport(_area(grid, effective, max_efpr), per_class,
                      sorted(detections_per_threshold, reverse=True), dtc, gtc, max_efpr,
                      variance_penalty)


def psds1(detections_per_threshold: Mapping[float, EventList], truth: EventList,
          audio_durations: Mapping[str, float], dtc: float = 0.7, gtc: float = 0.7,
          max_efpr: float = 100.0, variance_penalty: float = 0.0) -> float:
    return psds(detections_per_threshold, truth, audio_durations, dtc, gtc, max_efpr,
                variance_penalty).psds
