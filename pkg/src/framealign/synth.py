"""Synthetic strongly-captioned corpus: a desk-scale stand-in for real data.

Every class is an acoustically distinct template placed over a noise floor;
regions carry templated captions and each class has a one-sentence
description used as the detection query.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Dict, List, Optional, Union

import numpy as np
from scipy.signal import butter, sosfilt

from .audio import Waveform, write_wav
from .dataset import AnnotatedClip, Region, format_seconds, save_manifest
from .evaluation import Event, EventList, write_class_descriptions, write_events

KINDS = ("tone", "chirp", "noise", "warble", "clicks")

CAPTIONS = {
    "tone": ["a low tone hums steadily", "a steady low tone sounds", "a low tone drones on"],
    "chirp": ["a whistle rises in pitch", "a rising whistle sweeps upward",
              "a whistle glides up in pitch"],
    "noise": ["a burst of hissing noise", "steam hisses loudly", "a hissing noise bursts out"],
    "warble": ["an alarm warbles", "a warbling alarm rings", "an alarm warbles urgently"],
    "clicks": ["a clock ticks rapidly", "rapid ticking of a clock", "a clock ticks fast"],
}

DESCRIPTIONS = {
    "tone": "A low tone is humming.",
    "chirp": "A whistle is rising in pitch.",
    "noise": "Something is hissing.",
    "warble": "An alarm is warbling.",
    "clicks": "A clock is ticking.",
}


@dataclass(frozen=True)
class SynthSpec:
    classes: int = 5
    clips_per_class: int = 40
    clip_duration: tuple = (15.0, 30.0)
    event_duration: tuple = (1.0, 5.0)
    events_per_clip: tuple = (1, 3)
    noise_floor_db: float = -40.0
    sample_rate: int = 32000
    seed: int = 7

    def __post_init__(self):
        if self.classes < 1 or self.clips_per_class < 1:
            raise ValueError("class and clip counts must be positive")
        lo, hi = self.clip_duration
        if not 15.0 <= lo <= hi <= 30.0:
            raise ValueError("clip durations must lie within [15, 30] s")
        elo, ehi = self.event_duration
        if not 0 < elo <= ehi:
            raise ValueError("invalid event duration range")
        nlo, nhi = self.events_per_clip
        if not 1 <= nlo <= nhi:
            raise ValueError("invalid events-per-clip range")
        if nhi * ehi > lo:
            raise ValueError(f"up to {nhi} events of {ehi} s overflow a {lo} s clip")


@dataclass
class SynthCorpus:
    spec: SynthSpec
    clips: List[AnnotatedClip]
    truth: EventList
    descriptions: Dict[str, str]
    class_of_kind: Dict[str, str]

    def waveform(self, index: int) -> Waveform:
        return render_clip(self.spec, index, self.clips[index], self.truth_for(index))

    def truth_for(self, index: int) -> List[Event]:
        cid = self.clips[index].clip_id
        return [e for e in self.truth if e.clip_id == cid]

    def durations(self) -> Dict[str, float]:
        return {c.clip_id: c.duration for c in self.clips}


def class_name(k: int) -> str:
    return KINDS[k % len(KINDS)] if k < len(KINDS) else f"{KINDS[k % len(KINDS)]}{k // len(KINDS)}"


def _variant(k: int) -> tuple:
    return KINDS[k % len(KINDS)], k // len(KINDS)


def synth_generate(spec: SynthSpec) -> SynthCorpus:
    """Draw the corpus layout (clips, regions, truth); audio is rendered on demand."""
    rng = np.random.default_rng(spec.seed)
    names = [class_name(k) for k in range(spec.classes)]
    clips, events = [], []
    for n in range(spec.classes * spec.clips_per_class):
        primary = n % spec.classes
        duration = round(float(rng.uniform(*spec.clip_duration)), 3)
        count = int(rng.integers(spec.events_per_clip[0], spec.events_per_clip[1] + 1))
        labels = [primary] + [int(rng.integers(spec.classes)) for _ in range(count - 1)]
        regions = []
        for k in labels:
            length = float(rng.uniform(*spec.event_duration))
            onset = round(float(rng.uniform(0.0, duration - length)), 3)
            offset = round(onset + length, 3)
            kind, variant = _variant(k)
            text = CAPTIONS[kind][int(rng.integers(len(CAPTIONS[kind])))]
            if variant:
                text = f"{text} at pitch {variant}"
            regions.append(Region(onset, offset, text, annotator_id="synth"))
            events.append(Event(f"synth_{n:05d}", onset, offset, names[k]))
        regions.sort(key=lambda r: (r.onset, r.offset))
        weak = " then ".join(r.text for r in regions)
        clips.append(AnnotatedClip(f"synth_{n:05d}", duration, names[primary], tuple(regions),
                                   weak, f"audio/synth_{n:05d}.wav"))
    descriptions = {}
    for k, name in enumerate(names):
        kind, variant = _variant(k)
        desc = DESCRIPTIONS[kind]
        descriptions[name] = desc if not variant else f"{desc[:-1]} at pitch {variant}."
    return SynthCorpus(spec, clips, EventList(events), descriptions,
                       {name: _variant(k)[0] for k, name in enumerate(names)})


def render_event(kind: str, variant: int, n: int, sr: int, rng: np.random.Generator) -> np.ndarray:
    t = np.arange(n) / sr
    shift = 2.0 ** (variant / 2.0)
    if kind == "tone":
        x = np.sin(2 * np.pi * 300.0 * shift * t) + 0.3 * np.sin(2 * np.pi * 600.0 * shift * t)
    elif kind == "chirp":
        f0, f1 = 1500.0 * shift, 4000.0 * shift
        phase = 2 * np.pi * (f0 * t + 0.5 * (f1 - f0) * t ** 2 / max(t[-1], 1e-9))
        x = np.sin(phase)
    elif kind == "noise":
        lo = min(7000.0 * shift, 0.4 * sr)
        sos = butter(4, [lo, min(lo * 1.5, 0.45 * sr)], btype="band", fs=sr, output="sos")
        x = sosfilt(sos, rng.standard_normal(n))
        x /= np.max(np.abs(x)) + 1e-12
    elif kind == "warble":
        x = np.sin(2 * np.pi * 1000.0 * shift * t) * (0.5 + 0.5 * np.sin(2 * np.pi * 6.0 * t))
    elif kind == "clicks":
        x = np.zeros(n)
        period = int(sr / 12.0)
        k = np.arange(256)
        burst = np.exp(-k / 48.0) * np.sin(2 * np.pi * 5000.0 * shift * k / sr)
        for s in range(0, n - 256, period):
            x[s:s + 256] += burst
        x /= np.max(np.abs(x)) + 1e-12
    else:
        raise ValueError(f"unknown template {kind!r}")
    fade = min(n // 2, int(0.01 * sr))
    if fade:
        ramp = np.linspace(0.0, 1.0, fade)
        x[:fade] *= ramp
        x[n - fade:] *= ramp[::-1]
    return x


def render_clip(spec: SynthSpec, index: int, clip: AnnotatedClip, events: List[Event]) -> Waveform:
    sr = spec.sample_rate
    rng = np.random.default_rng([spec.seed, index])
    n = int(round(clip.duration * sr))
    x = rng.standard_normal(n) * 10.0 ** (spec.noise_floor_db / 20.0)
    names = [class_name(k) for k in range(spec.classes)]
    for e in events:
        kind, variant = _variant(names.index(e.label))
        start, stop = int(round(e.onset * sr)), min(n, int(round(e.offset * sr)))
        gain = float(rng.uniform(0.3, 0.6))
        x[start:stop] += gain * render_event(kind, variant, stop - start, sr, rng)
    return Waveform(x, sr)


def write_corpus(corpus: SynthCorpus, out_dir: Union[str, Path]) -> Path:
    """Write WAVs, manifest.jsonl, ground_truth.tsv, class_descriptions.tsv, durations.tsv."""
    out = Path(out_dir)
    (out / "audio").mkdir(parents=True, exist_ok=True)
    for i, clip in enumerate(corpus.clips):
        write_wav(out / clip.audio_path, corpus.waveform(i))
    save_manifest(corpus.clips, out / "manifest.jsonl")
    write_events(out / "ground_truth.tsv", corpus.truth)
    write_class_descriptions(out / "class_descriptions.tsv", corpus.descriptions)
    with open(out / "durations.tsv", "w", encoding="utf-8") as fh:
        for clip in corpus.clips:
            fh.write(f"{clip.clip_id}\t{format_seconds(clip.duration)}\n")
    with open(out / "synth_spec.json", "w", encoding="utf-8") as fh:
        json.dump(asdict(corpus.spec), fh, indent=2)
        fh.write("\n")
    return out
