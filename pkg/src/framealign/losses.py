"""Frame-wise and global (clip-level) contrastive objectives with exact gradients."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import List, Sequence

import numpy as np
from scipy.special import logsumexp, softmax

from .encoders import FrameEmbeddings, TextEmbedding, l2_normalize, l2_normalize_backward


@dataclass(frozen=True)
class FrameSpan:
    """Half-open frame range ``[t_on, t_off)``."""

    t_on: int
    t_off: int

    def __post_init__(self):
        if not 0 <= self.t_on < self.t_off:
            raise ValueError(f"invalid frame span [{self.t_on}, {self.t_off})")

    def __len__(self) -> int:
        return self.t_off - self.t_on


def _floor_div(x: float, step: float) -> int:
    # largest k with k*step <= x in floating point
    k = math.floor(x / step)
    while k * step > x:
        k -= 1
    while (k + 1) * step <= x:
        k += 1
    return k


def _ceil_div(x: float, step: float) -> int:
    # smallest k with k*step >= x in floating point
    k = math.ceil(x / step)
    while k * step < x:
        k += 1
    while (k - 1) * step >= x:
        k -= 1
    return k


def region_to_frames(onset: float, offset: float, frame_duration: float,
                     num_frames: int) -> FrameSpan:
    """Frames touched by ``[onset, offset)``: floor(onset/d) .. ceil(offset/d), clamped to T.

    If clamping empties the span, the single frame nearest the region
    midpoint is returned.
    """
    if not onset < offset:
        raise ValueError(f"onset {onset} must precede offset {offset}")
    if onset < 0:
        raise ValueError(f"onset {onset} is negative")
    if frame_duration <= 0 or num_frames < 1:
        raise ValueError("frame_duration and num_frames must be positive")
    t_on = min(max(_floor_div(onset, frame_duration), 0), num_frames)
    t_off = min(max(_ceil_div(offset, frame_duration), 0), num_frames)
    if t_on >= t_off:
        mid = math.floor(0.5 * (onset + offset) / frame_duration)
        mid = min(max(mid, 0), num_frames - 1)
        return FrameSpan(mid, mid + 1)
    return FrameSpan(t_on, t_off)


def frame_similarity(frame: np.ndarray, text: np.ndarray, tau: float) -> float:
    return float(np.dot(frame, text) / tau)


def frame_posterior(frame: np.ndarray, positive: np.ndarray, negatives: Sequence[np.ndarray],
                    tau: float) -> float:
    """Softmax probability of ``positive`` among ``{positive} | negatives``."""
    cands = np.vstack([positive] + list(negatives))
    logits = cands @ frame / tau
    weights = np.exp(logits - logits.max())
    return float(weights[0] / weights.sum())


# --------------------------------------------------------------------------
# Frame-wise loss
# --------------------------------------------------------------------------


@dataclass
class BatchAssembly:
    """Frame embeddings of N clips plus, per clip, ``(FrameSpan, text vector)`` regions."""

    clips: List[np.ndarray]
    regions: List[list]
    tau: float

    def __post_init__(self):
        self.clips = [c.matrix if isinstance(c, FrameEmbeddings) else np.asarray(c, float)
                      for c in self.clips]
        self.regions = [[(span, t.vector if isinstance(t, TextEmbedding) else np.asarray(t, float))
                         for span, t in regs] for regs in self.regions]
        if len(self.clips) != len(self.regions):
            raise ValueError("need one region list per clip")
        if not self.tau > 0:
            raise ValueError(f"temperature must be positive, got {self.tau}")
        for i, (frames, regs) in enumerate(zip(self.clips, self.regions)):
            for span, _ in regs:
                if span.t_off > frames.shape[0]:
                    raise ValueError(f"clip {i}: span [{span.t_on}, {span.t_off}) outside "
                                     f"[0, {frames.shape[0]}]")


@dataclass
class FrameLossGrad:
    clips: List[np.ndarray]
    texts: List[List[np.ndarray]] = field(default_factory=list)


def frame_wise_loss(batch: BatchAssembly):
    """Mean over regions of the length-normalised frame NLL.

    For each region frame ``t`` in ``[t_on, t_off)`` the candidates are the
    region text plus every region text of the *other* clips in the batch.
    Returns ``(loss, FrameLossGrad)`` with gradients for every frame matrix
    and every region text vector.
    """
    tau = batch.tau
    texts = [np.array([t for _, t in regs]).reshape(len(regs), -1) for regs in batch.regions]
    n_regions = sum(len(r) for r in batch.regions)
    if n_regions == 0:
        raise ValueError("batch has no regions")
    grad_clips = [np.zeros_like(c) for c in batch.clips]
    grad_texts = [np.zeros_like(t) for t in texts]
    total = 0.0
    for i, (frames, regs) in enumerate(zip(batch.clips, batch.regions)):
        if not regs:
            continue
        others = [k for k in range(len(texts)) if k != i and len(texts[k])]
        negatives = np.vstack([texts[k] for k in others]) if others else texts[i][:0]
        for j, (span, positive) in enumerate(regs):
            seg = frames[span.t_on:span.t_off]
            cands = np.vstack([positive[None, :], negatives])
            logits = seg @ cands.T / tau
            lse = logsumexp(logits, axis=1)
            total -= np.sum(logits[:, 0] - lse) / len(span)
            g = softmax(logits, axis=1)
            g[:, 0] -= 1.0
            g /= len(span) * n_regions
            grad_clips[i][span.t_on:span.t_off] += g @ cands / tau
            dcands = g.T @ seg / tau
            grad_texts[i][j] += dcands[0]
            row = 1
            for k in others:
                n = len(texts[k])
                grad_texts[k] += dcands[row:row + n]
                row += n
    grads = FrameLossGrad(grad_clips, [[g for g in gt] for gt in grad_texts])
    return total / n_regions, grads


# --------------------------------------------------------------------------
# Global (clip-level) loss
# --------------------------------------------------------------------------


def pool_frames(frames: np.ndarray) -> np.ndarray:
    """Clip embedding: mean of the frame embeddings, re-normalised."""
    return l2_normalize(np.asarray(frames).mean(axis=0))


def pool_frames_backward(frames: np.ndarray, grad: np.ndarray) -> np.ndarray:
    frames = np.asarray(frames)
    dm = l2_normalize_backward(frames.mean(axis=0), grad)
    return np.broadcast_to(dm / frames.shape[0], frames.shape).copy()


def global_clap_loss(audio_globals: np.ndarray, text_globals: np.ndarray, tau: float):
    """Symmetric InfoNCE with matching pairs on the diagonal.

    Returns ``(loss, (grad_audio, grad_text))``.
    """
    a = np.asarray(audio_globals, dtype=np.float64)
    t = np.asarray(text_globals, dtype=np.float64)
    if a.shape != t.shape or a.ndim != 2:
        raise ValueError(f"shape mismatch {a.shape} vs {t.shape}")
    n = a.shape[0]
    if n < 2:
        raise ValueError("global contrastive loss needs at least 2 pairs")
    if not tau > 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    logits = a @ t.T / tau
    diag = np.diag(logits)
    a2t = np.mean(logsumexp(logits, axis=1) - diag)
    t2a = np.mean(logsumexp(logits, axis=0) - diag)
    eye = np.eye(n)
    g = 0.5 * (softmax(logits, axis=1) + softmax(logits, axis=0) - 2.0 * eye) / n
    return 0.5 * (a2t + t2a), (g @ t / tau, g.T @ a / tau)
