"""Strongly annotated clips: data model, manifest I/O, statistics and splits."""

from __future__ import annotations

import json
import math
import string
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence, Union

import numpy as np

# One frame of slack for offsets past the clip end (annotation tool rounding).
OFFSET_SLACK = 0.02
PROCESSED_DURATION = (15.0, 30.0)
HIST_MAX_SECONDS = 30


class ManifestError(ValueError):
    """Base class for manifest problems; carries the 0-based record index."""

    def __init__(self, message: str, index: Optional[int] = None,
                 clip_id: Optional[str] = None, field_name: Optional[str] = None):
        self.index = index
        self.clip_id = clip_id
        self.field_name = field_name
        where = []
        if index is not None:
            where.append(f"record {index}")
        if clip_id is not None:
            where.append(f"clip {clip_id!r}")
        if field_name is not None:
            where.append(f"field {field_name!r}")
        prefix = ", ".join(where)
        super().__init__(f"{prefix}: {message}" if prefix else message)


class ManifestParseError(ManifestError):
    pass


class ManifestValidationError(ManifestError):
    pass


@dataclass(frozen=True)
class Region:
    onset: float
    offset: float
    text: str
    annotator_id: Optional[str] = None

    def __post_init__(self):
        if not (math.isfinite(self.onset) and math.isfinite(self.offset)):
            raise ValueError(f"non-finite region bounds ({self.onset}, {self.offset})")
        if self.onset < 0:
            raise ValueError(f"region onset {self.onset} is negative")
        if not self.offset > self.onset:
            raise ValueError(f"region offset {self.offset} must exceed onset {self.onset}")
        if not self.text.strip():
            raise ValueError("region text is empty")

    @property
    def duration(self) -> float:
        return self.offset - self.onset


@dataclass(frozen=True)
class AnnotatedClip:
    clip_id: str
    duration: float
    subclass: Optional[str] = None
    regions: tuple = ()
    weak_caption: Optional[str] = None
    audio_path: Optional[str] = None

    def __post_init__(self):
        object.__setattr__(self, "regions", tuple(self.regions))
        if not self.duration > 0:
            raise ValueError(f"clip duration {self.duration} must be positive")
        for j, r in enumerate(self.regions):
            if r.offset > self.duration + OFFSET_SLACK:
                raise ValueError(
                    f"region {j} offset {r.offset} exceeds clip duration "
                    f"{self.duration} by more than {OFFSET_SLACK} s")


@dataclass
class Ontology:
    """Two-level class tree: superclasses and their leaf subclasses."""

    superclasses: list
    subclasses: list  # (name, parent) pairs

    def __post_init__(self):
        names = list(self.superclasses) + [name for name, _ in self.subclasses]
        dupes = [n for n, c in Counter(names).items() if c > 1]
        if dupes:
            raise ValueError(f"duplicate ontology names: {sorted(dupes)}")
        known = set(self.superclasses)
        for name, parent in self.subclasses:
            if parent not in known:
                raise ValueError(f"subclass {name!r} has unknown parent {parent!r}")

    def parent(self, subclass: str) -> str:
        for name, parent in self.subclasses:
            if name == subclass:
                return parent
        raise KeyError(subclass)

    def leaves(self) -> list:
        return [name for name, _ in self.subclasses]

    @classmethod
    def from_dict(cls, data: dict) -> "Ontology":
        subclasses = [(leaf, parent) for parent, leaves in data.items() for leaf in leaves]
        return cls(list(data), subclasses)


@dataclass
class DatasetSplit:
    train_ids: list
    test_ids: list
    warnings: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"train": list(self.train_ids), "test": list(self.test_ids),
                "warnings": list(self.warnings)}

    @classmethod
    def from_dict(cls, data: dict) -> "DatasetSplit":
        return cls(list(data["train"]), list(data["test"]), list(data.get("warnings", [])))


# --------------------------------------------------------------------------
# Manifest I/O
# --------------------------------------------------------------------------


def format_seconds(value: float) -> str:
    """Shortest round-tripping decimal with at least 3 fractional digits."""
    return np.format_float_positional(float(value), unique=True, trim="k", min_digits=3)


def _encode_clip(clip: AnnotatedClip) -> str:
    dump = lambda v: json.dumps(v, ensure_ascii=False)  # noqa: E731
    regions = ", ".join(
        "{" + f'"onset_s": {format_seconds(r.onset)}, "offset_s": {format_seconds(r.offset)}, '
        f'"text": {dump(r.text)}, "annotator": {dump(r.annotator_id)}' + "}"
        for r in clip.regions
    )
    return (
        "{" + f'"clip_id": {dump(clip.clip_id)}, "audio_path": {dump(clip.audio_path)}, '
        f'"duration_s": {format_seconds(clip.duration)}, "subclass": {dump(clip.subclass)}, '
        f'"weak_caption": {dump(clip.weak_caption)}, "regions": [{regions}]' + "}"
    )


def save_manifest(clips: Iterable[AnnotatedClip], path: Union[str, Path]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for clip in clips:
            fh.write(_encode_clip(clip) + "\n")


def _decode_record(index: int, record: dict,
                   duration_range: Optional[tuple]) -> AnnotatedClip:
    if not isinstance(record, dict):
        raise ManifestParseError("record is not an object", index)
    clip_id = record.get("clip_id")
    if not isinstance(clip_id, str) or not clip_id:
        raise ManifestValidationError("missing clip_id", index, field_name="clip_id")
    try:
        duration = float(record["duration_s"])
    except (KeyError, TypeError, ValueError):
        raise ManifestValidationError("missing or non-numeric duration", index, clip_id,
                                      "duration_s") from None
    if duration_range is not None:
        lo, hi = duration_range
        if not lo <= duration <= hi:
            raise ManifestValidationError(
                f"duration {duration} outside [{lo}, {hi}]", index, clip_id, "duration_s")
    regions = []
    for j, raw in enumerate(record.get("regions") or []):
        name = f"regions[{j}]"
        try:
            region = Region(float(raw["onset_s"]), float(raw["offset_s"]), str(raw["text"]),
                            raw.get("annotator"))
        except (KeyError, TypeError) as exc:
            raise ManifestValidationError(f"malformed region ({exc})", index, clip_id,
                                          name) from None
        except ValueError as exc:
            raise ManifestValidationError(str(exc), index, clip_id, name) from None
        if region.offset > duration + OFFSET_SLACK:
            raise ManifestValidationError(
                f"offset {region.offset} exceeds duration {duration}", index, clip_id, name)
        regions.append(region)
    return AnnotatedClip(clip_id, duration, record.get("subclass"), tuple(regions),
                         record.get("weak_caption"), record.get("audio_path"))


def load_manifest(path: Union[str, Path],
                  duration_range: Optional[tuple] = PROCESSED_DURATION) -> list:
    """Read a JSON-lines manifest and validate every clip.

    Pass ``duration_range=None`` to accept clips of any positive duration
    (e.g. before preprocessing).
    """
    clips = []
    seen = set()
    with open(path, encoding="utf-8") as fh:
        index = -1
        for line in fh:
            if not line.strip():
                continue
            index += 1
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ManifestParseError(str(exc), index) from None
            clip = _decode_record(index, record, duration_range)
            if clip.clip_id in seen:
                raise ManifestValidationError("duplicate clip_id", index, clip.clip_id,
                                              "clip_id")
            seen.add(clip.clip_id)
            clips.append(clip)
    return clips


# --------------------------------------------------------------------------
# Intervals and coverage
# --------------------------------------------------------------------------


def merge_overlapping_regions(regions: Iterable) -> list:
    """Union of regions as sorted, disjoint ``(onset, offset)`` pairs.

    Accepts :class:`Region` objects or plain pairs. Touching intervals merge.
    """
    spans = sorted((r.onset, r.offset) if isinstance(r, Region) else (r[0], r[1])
                   for r in regions)
    merged: list = []
    for on, off in spans:
        if merged and on <= merged[-1][1]:
            if off > merged[-1][1]:
                merged[-1] = (merged[-1][0], off)
        else:
            merged.append((on, off))
    return merged


def coverage(clip: AnnotatedClip) -> float:
    covered = sum(off - on for on, off in merge_overlapping_regions(clip.regions))
    return min(1.0, max(0.0, covered / clip.duration))


# --------------------------------------------------------------------------
# Statistics
# --------------------------------------------------------------------------

_PUNCT = string.punctuation + "‘’“”…"


def caption_tokens(text: str) -> list:
    """Case-folded whitespace tokens with leading/trailing punctuation removed."""
    tokens = (tok.strip(_PUNCT) for tok in text.casefold().split())
    return [tok for tok in tokens if tok]


@dataclass
class StatsReport:
    clips: int
    regions: int
    regions_per_clip: float
    audio_hours: float
    region_hours: float
    mean_coverage: float
    caption_words_mean: float
    caption_words_std: float
    vocabulary_size: int
    duration_histogram: list  # counts for [0,1), [1,2), ..., [29,30), [30, inf)

    def to_dict(self) -> dict:
        return dict(self.__dict__)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def to_table(self) -> str:
        rows = [
            ("clips", f"{self.clips}"),
            ("regions", f"{self.regions}"),
            ("regions per clip", f"{self.regions_per_clip:.2f}"),
            ("audio hours", f"{self.audio_hours:.2f}"),
            ("region hours", f"{self.region_hours:.2f}"),
            ("mean coverage", f"{100 * self.mean_coverage:.2f}%"),
            ("caption words", f"{self.caption_words_mean:.2f} +- {self.caption_words_std:.2f}"),
            ("vocabulary", f"{self.vocabulary_size}"),
        ]
        width = max(len(k) for k, _ in rows)
        lines = [f"{k.ljust(width)}  {v}" for k, v in rows]
        lines.append("")
        lines.append("region duration histogram (s)")
        for b, count in enumerate(self.duration_histogram):
            label = f"[{b},{b + 1})" if b < HIST_MAX_SECONDS else f">={HIST_MAX_SECONDS}"
            lines.append(f"  {label.ljust(8)} {count}")
        return "\n".join(lines)


def duration_histogram(durations: Iterable[float]) -> list:
    counts = [0] * (HIST_MAX_SECONDS + 1)
    for d in durations:
        counts[min(int(math.floor(d)), HIST_MAX_SECONDS)] += 1
    return counts


def dataset_stats(clips: Sequence[AnnotatedClip], remove_stop_words: bool = False) -> StatsReport:
    if not clips:
        raise ValueError("dataset_stats needs at least one clip")
    regions = [r for c in clips for r in c.regions]
    words = np.array([len(r.text.split()) for r in regions], dtype=float)
    vocab = {tok for r in regions for tok in caption_tokens(r.text)}
    if remove_stop_words:
        from sklearn.feature_extraction.text import ENGLISH_STOP_WORDS
        vocab -= ENGLISH_STOP_WORDS
    # fsum keeps the float totals independent of clip order
    return StatsReport(
        clips=len(clips),
        regions=len(regions),
        regions_per_clip=len(regions) / len(clips),
        audio_hours=math.fsum(c.duration for c in clips) / 3600.0,
        region_hours=math.fsum(r.duration for r in regions) / 3600.0,
        mean_coverage=math.fsum(coverage(c) for c in clips) / len(clips),
        caption_words_mean=math.fsum(words) / len(words) if len(words) else 0.0,
        caption_words_std=float(np.std(np.sort(words))) if len(words) else 0.0,
        vocabulary_size=len(vocab),
        duration_histogram=duration_histogram(r.duration for r in regions),
    )


# --------------------------------------------------------------------------
# Splits
# --------------------------------------------------------------------------


def _largest_remainder(counts: dict, fraction: float) -> dict:
    quotas = {k: n * fraction for k, n in counts.items()}
    alloc = {k: math.floor(q) for k, q in quotas.items()}
    total = math.floor(sum(counts.values()) * fraction + 0.5)
    short = total - sum(alloc.values())
    by_remainder = sorted(quotas, key=lambda k: (-(quotas[k] - alloc[k]), k))
    for k in by_remainder[:max(short, 0)]:
        alloc[k] += 1
    return alloc


def stratified_split(clips: Sequence[AnnotatedClip], test_fraction: float, seed: int,
                     ontology: Optional[Ontology] = None) -> DatasetSplit:
    """Partition clip ids so each subclass keeps (close to) ``test_fraction`` in test.

    Per-subclass test counts use largest-remainder rounding, so the total
    equals ``round(len(clips) * test_fraction)`` and every subclass is within
    one clip of its exact quota.
    """
    if not 0.0 < test_fraction < 1.0:
        raise ValueError(f"test_fraction must be in (0, 1), got {test_fraction}")
    groups: dict = defaultdict(list)
    for clip in clips:
        if clip.subclass is None:
            raise ValueError(f"clip {clip.clip_id!r} has no subclass")
        groups[clip.subclass].append(clip.clip_id)
    warnings = []
    if ontology is not None:
        for leaf in ontology.leaves():
            if leaf not in groups:
                warnings.append(f"subclass {leaf!r} has no clips; skipped")
    alloc = _largest_remainder({k: len(v) for k, v in groups.items()}, test_fraction)
    rng = np.random.default_rng(seed)
    train, test = [], []
    for subclass in sorted(groups):
        ids = sorted(groups[subclass])
        order = rng.permutation(len(ids))
        chosen = {ids[i] for i in order[:alloc[subclass]]}
        for cid in ids:
            (test if cid in chosen else train).append(cid)
    return DatasetSplit(train, test, warnings)
