"""Text-queried detection: score tracks, segment-level pAUROC, event extraction,
retrieval metrics and the TSV formats shared with external tools."""

from __future__ import annotations

import csv
import json
import math
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Union

import numpy as np

from .encoders import FrameEmbeddings, TextEmbedding


@dataclass(frozen=True)
class ScoreTrack:
    scores: np.ndarray
    frame_duration: float
    clip_id: str
    query: str
    class_id: Optional[str] = None

    @property
    def label(self) -> str:
        return self.class_id if self.class_id is not None else self.query

    @property
    def duration(self) -> float:
        return len(self.scores) * self.frame_duration


@dataclass(frozen=True)
class Event:
    clip_id: str
    onset: float
    offset: float
    label: str

    def __post_init__(self):
        if not self.onset < self.offset:
            raise ValueError(f"event onset {self.onset} must precede offset {self.offset}")


@dataclass
class EventList:
    events: List[Event] = field(default_factory=list)
    role: str = "ground_truth"  # or "detection"

    def __iter__(self):
        return iter(self.events)

    def __len__(self) -> int:
        return len(self.events)

    def labels(self) -> list:
        return sorted({e.label for e in self.events})

    def by_clip_label(self) -> Dict[tuple, List[Event]]:
        out: Dict[tuple, List[Event]] = defaultdict(list)
        for e in self.events:
            out[(e.clip_id, e.label)].append(e)
        return out


def score_track(frames: FrameEmbeddings, query: TextEmbedding, clip_id: str = "",
                query_text: str = "", class_id: Optional[str] = None) -> ScoreTrack:
    """Per-frame cosine similarity between unit frame embeddings and a unit query."""
    matrix = frames.matrix if isinstance(frames, FrameEmbeddings) else np.asarray(frames)
    vec = query.vector if isinstance(query, TextEmbedding) else np.asarray(query)
    if matrix.shape[1] != vec.shape[0]:
        raise ValueError(f"dimension mismatch: frames D={matrix.shape[1]}, query D={vec.shape[0]}")
    hop = frames.frame_duration if isinstance(frames, FrameEmbeddings) else 0.02
    scores = np.clip(matrix @ vec, -1.0, 1.0)
    return ScoreTrack(scores, hop, clip_id, query_text, class_id)


# --------------------------------------------------------------------------
# Segment-level pAUROC
# --------------------------------------------------------------------------


def roc_points(scores: np.ndarray, labels: np.ndarray):
    """ROC vertices (fpr, tpr) from the strictest threshold down, starting at (0, 0)."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=bool)
    order = np.argsort(-scores, kind="mergesort")
    s, y = scores[order], labels[order]
    # one vertex per distinct score (ties move diagonally)
    last = np.r_[np.flatnonzero(np.diff(s) != 0), len(s) - 1]
    tp = np.cumsum(y)[last]
    fp = np.cumsum(~y)[last]
    tpr = np.r_[0.0, tp / max(y.sum(), 1)]
    fpr = np.r_[0.0, fp / max((~y).sum(), 1)]
    return fpr, tpr


def partial_auc(fpr: np.ndarray, tpr: np.ndarray, max_fpr: float) -> float:
    """Trapezoidal ROC area over ``[0, max_fpr]``, divided by ``max_fpr``."""
    stop = np.searchsorted(fpr, max_fpr, side="right")
    xs, ys = list(fpr[:stop]), list(tpr[:stop])
    if stop < len(fpr) and xs[-1] < max_fpr:
        x0, x1, y0, y1 = fpr[stop - 1], fpr[stop], tpr[stop - 1], tpr[stop]
        xs.append(max_fpr)
        ys.append(y0 + (y1 - y0) * (max_fpr - x0) / (x1 - x0))
    return float(np.trapezoid(ys, xs) / max_fpr)


def segment_scores_and_labels(tracks: Sequence[ScoreTrack], truth: EventList,
                              segment: float = 1.0):
    """Per label: (segment max-scores, segment positive flags) over all clips."""
    gt = truth.by_clip_label()
    out: Dict[str, tuple] = {}
    for track in tracks:
        n_seg = max(1, math.ceil(track.duration / segment - 1e-9))
        seg_of_frame = np.minimum(
            np.floor(np.arange(len(track.scores)) * track.frame_duration / segment + 1e-9)
            .astype(int), n_seg - 1)
        seg_scores = np.full(n_seg, -np.inf)
        np.maximum.at(seg_scores, seg_of_frame, track.scores)
        labels = np.zeros(n_seg, dtype=bool)
        for e in gt.get((track.clip_id, track.label), []):
            first = max(0, math.floor(e.onset / segment))
            last = min(n_seg, math.ceil(e.offset / segment))
            labels[first:last] = True
        s, y = out.setdefault(track.label, ([], []))
        s.append(seg_scores)
        y.append(labels)
    return {k: (np.concatenate(s), np.concatenate(y)) for k, (s, y) in out.items()}


@dataclass
class PaurocReport:
    per_class: Dict[str, float]
    macro: float
    excluded: List[str]
    max_fpr: float
    segment: float

    def to_dict(self) -> dict:
        return {"macro": self.macro, "per_class": self.per_class, "excluded": self.excluded,
                "max_fpr": self.max_fpr, "segment_s": self.segment}


def segment_pauroc(tracks: Sequence[ScoreTrack], truth: EventList, max_fpr: float = 0.1,
                   segment: float = 1.0) -> PaurocReport:
    """Segment-level partial AUROC per class and their unweighted mean.

    A segment is positive if any ground-truth event of the class overlaps
    it; its score is the maximum frame score inside it. Classes without
    positive or without negative segments are excluded and listed.
    """
    if not 0 < max_fpr <= 1:
        raise ValueError("max_fpr must lie in (0, 1]")
    per_class, excluded = {}, []
    for label, (scores, labels) in sorted(segment_scores_and_labels(tracks, truth, segment).items()):
        if labels.all() or not labels.any():
            excluded.append(label)
            continue
        fpr, tpr = roc_points(scores, labels)
        per_class[label] = partial_auc(fpr, tpr, max_fpr)
    macro = float(np.mean(list(per_class.values()))) if per_class else float("nan")
    return PaurocReport(per_class, macro, excluded, max_fpr, segment)


# --------------------------------------------------------------------------
# Event extraction
# --------------------------------------------------------------------------


def extract_events(track: ScoreTrack, threshold: float) -> EventList:
    """Maximal runs of frames with score >= threshold, as [start*d, end*d) events."""
    active = np.r_[False, np.asarray(track.scores) >= threshold, False].astype(np.int8)
    edges = np.diff(active)
    starts, ends = np.flatnonzero(edges == 1), np.flatnonzero(edges == -1)
    d = track.frame_duration
    return EventList([Event(track.clip_id, s * d, e * d, track.label)
                      for s, e in zip(starts, ends)], role="detection")


def default_thresholds(n: int = 50) -> np.ndarray:
    """``n`` evenly spaced cosine thresholds over [-1, 1], highest first."""
    return np.linspace(1.0, -1.0, n)


def detections_per_threshold(tracks: Sequence[ScoreTrack],
                             thresholds: Iterable[float]) -> Dict[float, EventList]:
    out = {}
    for th in thresholds:
        events = []
        for track in tracks:
            events.extend(extract_events(track, th).events)
        out[float(th)] = EventList(events, role="detection")
    return out


# --------------------------------------------------------------------------
# Retrieval
# --------------------------------------------------------------------------


def retrieval_ranks(similarity: np.ndarray, targets: Sequence[int]) -> np.ndarray:
    """1-based rank of each text's correct audio (ties go to the lower audio index)."""
    sim = np.asarray(similarity, dtype=np.float64)
    targets = np.asarray(targets)
    ranks = np.empty(len(targets), dtype=int)
    for i, j in enumerate(targets):
        row = sim[i]
        higher = np.sum(row > row[j])
        tied_before = np.sum(row[:j] == row[j])
        ranks[i] = 1 + higher + tied_before
    return ranks


def retrieval_metrics(similarity: np.ndarray, targets: Optional[Sequence[int]] = None) -> dict:
    """Text-to-audio mAP@10 and R@1/5/10 with one relevant audio per text.

    ``targets[i]`` is the audio index matching text ``i``; defaults to the
    diagonal.
    """
    sim = np.asarray(similarity)
    if targets is None:
        targets = np.arange(sim.shape[0])
    ranks = retrieval_ranks(sim, targets)
    ap = np.where(ranks <= 10, 1.0 / ranks, 0.0)
    return {"mAP@10": float(np.mean(ap)),
            "R@1": float(np.mean(ranks <= 1)),
            "R@5": float(np.mean(ranks <= 5)),
            "R@10": float(np.mean(ranks <= 10))}


# --------------------------------------------------------------------------
# TSV formats
# --------------------------------------------------------------------------


def read_events(path: Union[str, Path], role: str = "ground_truth") -> EventList:
    """Rows ``clip_id<TAB>onset<TAB>offset<TAB>class``; a header row is skipped."""
    events = []
    with open(path, encoding="utf-8", newline="") as fh:
        for n, row in enumerate(csv.reader(fh, delimiter="\t")):
            if not row or not "".join(row).strip():
                continue
            if len(row) != 4:
                raise ValueError(f"{path}:{n + 1}: expected 4 columns, got {len(row)}")
            try:
                onset, offset = float(row[1]), float(row[2])
            except ValueError:
                if n == 0:
                    continue
                raise ValueError(f"{path}:{n + 1}: bad onset/offset") from None
            events.append(Event(row[0], onset, offset, row[3]))
    return EventList(events, role)


def write_events(path: Union[str, Path], events: EventList) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write("filename\tonset\toffset\tevent_label\n")
        for e in events:
            fh.write(f"{e.clip_id}\t{e.onset:.3f}\t{e.offset:.3f}\t{e.label}\n")


def read_class_descriptions(path: Union[str, Path]) -> Dict[str, str]:
    out = {}
    with open(path, encoding="utf-8") as fh:
        for n, line in enumerate(fh):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 2 or not parts[1].strip():
                raise ValueError(f"{path}:{n + 1}: expected 'class_id<TAB>description'")
            out[parts[0]] = parts[1].strip()
    return out


def write_class_descriptions(path: Union[str, Path], descriptions: Mapping[str, str]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for cls, text in descriptions.items():
            fh.write(f"{cls}\t{text}\n")


def write_report(path: Union[str, Path], report: dict) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
        fh.write("\n")
