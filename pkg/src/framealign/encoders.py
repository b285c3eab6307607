"""Toy dual encoders producing unit-norm frame and text embeddings.

Audio: mel -> linear -> causal mixer (learned K-tap moving average) -> linear -> l2 norm.
Text: hashed bag of words -> embedding sum -> linear -> l2 norm.

Both sides have hand-written backward passes; gradients are plain dicts
keyed like :attr:`EncoderParams.tensors`.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, Optional, Sequence, Union

import numpy as np

from .audio import MelFrames
from .dataset import caption_tokens

Gradient = Dict[str, np.ndarray]

NORM_FLOOR = 1e-12
CHECKPOINT_MAGIC = b"FACKPT01"

AUDIO_KEYS = ("audio_in", "audio_in_bias", "mixer", "audio_out", "audio_out_bias")
TEXT_KEYS = ("text_table", "text_proj", "text_bias")


@dataclass(frozen=True)
class EncoderConfig:
    mel_bins: int = 64
    dim: int = 64
    hidden: int = 64
    text_hidden: int = 64
    buckets: int = 2 ** 14
    mixer_window: int = 5
    hop: float = 0.02
    seed: int = 0

    def __post_init__(self):
        if self.dim < 2:
            raise ValueError("embedding dimension must be at least 2")
        if self.mixer_window < 1:
            raise ValueError("mixer_window must be positive")


@dataclass
class EncoderParams:
    config: EncoderConfig
    tensors: Dict[str, np.ndarray] = field(default_factory=dict)

    def __getitem__(self, key: str) -> np.ndarray:
        return self.tensors[key]

    def copy(self) -> "EncoderParams":
        return EncoderParams(self.config, {k: v.copy() for k, v in self.tensors.items()})

    def zeros_like(self) -> Gradient:
        return {k: np.zeros_like(v) for k, v in self.tensors.items()}

    def all_finite(self) -> bool:
        return all(np.all(np.isfinite(v)) for v in self.tensors.values())


@dataclass(frozen=True)
class FrameEmbeddings:
    matrix: np.ndarray  # (T, D), unit rows
    frame_duration: float

    @property
    def num_frames(self) -> int:
        return self.matrix.shape[0]


@dataclass(frozen=True)
class TextEmbedding:
    vector: np.ndarray  # (D,), unit norm


def init_params(config: Optional[EncoderConfig] = None) -> EncoderParams:
    cfg = config or EncoderConfig()
    rng = np.random.default_rng(cfg.seed)
    t = {
        "audio_in": rng.normal(0.0, cfg.mel_bins ** -0.5, (cfg.mel_bins, cfg.hidden)),
        "audio_in_bias": np.zeros(cfg.hidden),
        "mixer": np.full(cfg.mixer_window, 1.0 / cfg.mixer_window),
        "audio_out": rng.normal(0.0, cfg.hidden ** -0.5, (cfg.hidden, cfg.dim)),
        "audio_out_bias": np.zeros(cfg.dim),
        "text_table": rng.normal(0.0, 1.0, (cfg.buckets, cfg.text_hidden)),
        "text_proj": rng.normal(0.0, cfg.text_hidden ** -0.5, (cfg.text_hidden, cfg.dim)),
        "text_bias": np.zeros(cfg.dim),
    }
    return EncoderParams(cfg, t)


# --------------------------------------------------------------------------
# Shared pieces
# --------------------------------------------------------------------------


def l2_normalize(z: np.ndarray) -> np.ndarray:
    norm = np.linalg.norm(z, axis=-1, keepdims=True)
    return z / np.maximum(norm, NORM_FLOOR)


def l2_normalize_backward(z: np.ndarray, grad: np.ndarray) -> np.ndarray:
    """Vector-Jacobian product of ``z / |z|``: (g - v (v.g)) / |z|."""
    norm = np.maximum(np.linalg.norm(z, axis=-1, keepdims=True), NORM_FLOOR)
    v = z / norm
    return (grad - v * np.sum(v * grad, axis=-1, keepdims=True)) / norm


def causal_mix(h: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """y[t] = sum_k weights[k] * h[t - k], zero before the first frame."""
    out = np.zeros_like(h)
    T = h.shape[0]
    for k, w in enumerate(weights):
        if k >= T:
            break
        out[k:] += w * h[:T - k]
    return out


def _causal_mix_backward(h, weights, grad):
    dh = np.zeros_like(h)
    dw = np.zeros_like(weights)
    T = h.shape[0]
    for k, w in enumerate(weights):
        if k >= T:
            break
        dh[:T - k] += w * grad[k:]
        dw[k] = np.sum(grad[k:] * h[:T - k])
    return dh, dw


def _check_upstream(grad: np.ndarray) -> None:
    if not np.all(np.isfinite(grad)):
        raise ValueError("non-finite upstream gradient")


# --------------------------------------------------------------------------
# Audio side
# --------------------------------------------------------------------------


def _mel_array(params: EncoderParams, mel) -> np.ndarray:
    x = mel.frames if isinstance(mel, MelFrames) else np.asarray(mel, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 1:
        raise ValueError(f"mel input must be (T >= 1, M), got shape {x.shape}")
    if x.shape[1] != params.config.mel_bins:
        raise ValueError(f"mel has {x.shape[1]} bins, encoder expects "
                         f"{params.config.mel_bins}")
    if not np.all(np.isfinite(x)):
        raise ValueError("mel input contains non-finite values")
    return x


def audio_forward(params: EncoderParams, mel):
    """Return ``(unit frame embeddings (T, D), cache)``."""
    x = _mel_array(params, mel)
    p = params.tensors
    h = x @ p["audio_in"] + p["audio_in_bias"]
    y = causal_mix(h, p["mixer"])
    z = y @ p["audio_out"] + p["audio_out_bias"]
    return l2_normalize(z), (x, h, y, z)


def audio_backward(params: EncoderParams, cache, grad: np.ndarray,
                   out: Optional[Gradient] = None) -> Gradient:
    """Accumulate the audio-side parameter gradient into ``out``."""
    _check_upstream(grad)
    out = params.zeros_like() if out is None else out
    x, h, y, z = cache
    p = params.tensors
    dz = l2_normalize_backward(z, grad)
    out["audio_out"] += y.T @ dz
    out["audio_out_bias"] += dz.sum(axis=0)
    dy = dz @ p["audio_out"].T
    dh, dmix = _causal_mix_backward(h, p["mixer"], dy)
    out["mixer"] += dmix
    out["audio_in"] += x.T @ dh
    out["audio_in_bias"] += dh.sum(axis=0)
    return out


def encode_audio(params: EncoderParams, mel) -> FrameEmbeddings:
    emb, _ = audio_forward(params, mel)
    hop = mel.hop if isinstance(mel, MelFrames) else params.config.hop
    return FrameEmbeddings(emb, hop)


# --------------------------------------------------------------------------
# Text side
# --------------------------------------------------------------------------


def text_buckets(text: str, buckets: int) -> np.ndarray:
    """Stable (process-independent) hashed token ids."""
    if not text or not text.strip():
        raise ValueError("text must be non-empty")
    tokens = caption_tokens(text)
    if not tokens:
        raise ValueError(f"text {text!r} has no word tokens")
    return np.array([zlib.crc32(tok.encode("utf-8")) % buckets for tok in tokens])


def text_forward(params: EncoderParams, text: str):
    ids = text_buckets(text, params.config.buckets)
    p = params.tensors
    s = p["text_table"][ids].sum(axis=0)
    z = s @ p["text_proj"] + p["text_bias"]
    return l2_normalize(z), (ids, s, z)


def text_backward(params: EncoderParams, cache, grad: np.ndarray,
                  out: Optional[Gradient] = None) -> Gradient:
    _check_upstream(grad)
    out = params.zeros_like() if out is None else out
    ids, s, z = cache
    dz = l2_normalize_backward(z, grad)
    out["text_proj"] += np.outer(s, dz)
    out["text_bias"] += dz
    ds = params.tensors["text_proj"] @ dz
    np.add.at(out["text_table"], ids, ds)
    return out


def encode_text(params: EncoderParams, text: str) -> TextEmbedding:
    emb, _ = text_forward(params, text)
    return TextEmbedding(emb)


def backward(params: EncoderParams, mels: Sequence = (), texts: Sequence[str] = (),
             audio_grads: Sequence[np.ndarray] = (),
             text_grads: Sequence[np.ndarray] = ()) -> Gradient:
    """Parameter gradient for upstream gradients on a set of encoder outputs.

    ``audio_grads[i]`` is dLoss/d(encode_audio(mels[i]).matrix) and
    ``text_grads[j]`` is dLoss/d(encode_text(texts[j]).vector).
    """
    if len(mels) != len(audio_grads) or len(texts) != len(text_grads):
        raise ValueError("inputs and upstream gradients must pair up")
    out = params.zeros_like()
    for mel, g in zip(mels, audio_grads):
        _, cache = audio_forward(params, mel)
        audio_backward(params, cache, np.asarray(g, dtype=np.float64), out)
    for text, g in zip(texts, text_grads):
        _, cache = text_forward(params, text)
        text_backward(params, cache, np.asarray(g, dtype=np.float64), out)
    return out


# --------------------------------------------------------------------------
# Checkpoints
# --------------------------------------------------------------------------


def save_checkpoint(params: EncoderParams, path: Union[str, Path],
                    metadata: Optional[dict] = None) -> None:
    """Binary checkpoint: magic, JSON metadata block, then named float32 tensors.

    Layout (all integers little-endian)::

        8s magic | u32 meta_len | meta (utf-8 JSON) | u32 n_tensors |
        n x [ u16 name_len | name | u8 ndim | ndim x u32 | float32 data ]
    """
    meta = {"config": asdict(params.config), **(metadata or {})}
    blob = json.dumps(meta, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(struct.pack("<I", len(params.tensors)))
        for name in sorted(params.tensors):
            arr = np.ascontiguousarray(params.tensors[name], dtype="<f4")
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<H", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<B", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes())


def load_checkpoint(path: Union[str, Path]):
    """Return ``(params, metadata)``; tensors come back as float64 copies of the float32 data."""
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:8] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    pos = 8

    def take(fmt):
        nonlocal pos
        values = struct.unpack_from(fmt, data, pos)
        pos += struct.calcsize(fmt)
        return values

    (meta_len,) = take("<I")
    meta = json.loads(data[pos:pos + meta_len].decode("utf-8"))
    pos += meta_len
    (count,) = take("<I")
    tensors = {}
    for _ in range(count):
        (name_len,) = take("<H")
        name = data[pos:pos + name_len].decode("utf-8")
        pos += name_len
        (ndim,) = take("<B")
        shape = take(f"<{ndim}I")
        size = int(np.prod(shape, dtype=np.int64)) * 4
        arr = np.frombuffer(data, dtype="<f4", count=size // 4, offset=pos).reshape(shape)
        pos += size
        tensors[name] = arr.astype(np.float64)
    if pos != len(data):
        raise ValueError(f"{path}: {len(data) - pos} trailing bytes")
    config = EncoderConfig(**meta.pop("config"))
    return EncoderParams(config, tensors), meta
