"""Adam training loop with linear warmup and cosine decay."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Union

import numpy as np

from .encoders import (EncoderConfig, EncoderParams, Gradient, audio_backward, audio_forward,
                       init_params, save_checkpoint, text_backward, text_forward)
from .losses import (BatchAssembly, frame_wise_loss, global_clap_loss, pool_frames,
                     pool_frames_backward, region_to_frames)

logger = logging.getLogger(__name__)

LOSS_KINDS = ("global", "frame_wise")
TEMPERATURE_GRID = (0.01, 0.05, 0.1, 0.2, 0.3, 0.4)
ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 32
    epochs: int = 6
    peak_lr: float = 6e-4
    final_lr: float = 1e-7
    warmup_epochs: float = 1.0
    tau: float = 0.05
    seed: int = 0
    loss_kind: str = "frame_wise"

    def __post_init__(self):
        if not self.peak_lr > self.final_lr > 0:
            raise ValueError("need peak_lr > final_lr > 0")
        if self.batch_size < 2:
            raise ValueError("batch_size must be at least 2")
        if not self.tau > 0:
            raise ValueError("tau must be positive")
        if self.epochs < 1:
            raise ValueError("epochs must be positive")
        if not 0 <= self.warmup_epochs <= self.epochs:
            raise ValueError("warmup_epochs must lie in [0, epochs]")
        if self.loss_kind not in LOSS_KINDS:
            raise ValueError(f"loss_kind must be one of {LOSS_KINDS}")

    @classmethod
    def from_dict(cls, data: Optional[dict]) -> "TrainConfig":
        data = dict(data or {})
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**data)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class OptimizerState:
    m: Dict[str, np.ndarray]
    v: Dict[str, np.ndarray]
    step: int = 0
    skipped: int = 0

    @classmethod
    def zeros(cls, params: EncoderParams) -> "OptimizerState":
        return cls(params.zeros_like(), params.zeros_like())


@dataclass
class TrainExample:
    """One clip ready for training: features plus its (onset, offset, text) regions."""

    clip_id: str
    mel: np.ndarray
    regions: list
    weak_caption: Optional[str] = None
    frame_duration: float = 0.02


def lr_at(step: int, total_steps: int, cfg: TrainConfig) -> float:
    """Linear warmup from 0 to peak, then cosine annealing to ``final_lr``."""
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    warmup = round(total_steps * cfg.warmup_epochs / cfg.epochs)
    if step < warmup:
        return cfg.peak_lr * step / warmup
    if step >= total_steps:
        return cfg.final_lr
    progress = (step - warmup) / (total_steps - warmup)
    return cfg.final_lr + 0.5 * (cfg.peak_lr - cfg.final_lr) * (1.0 + math.cos(math.pi * progress))


def adam_step(params: EncoderParams, grads: Gradient, state: OptimizerState, lr: float):
    """One bias-corrected Adam update; returns new ``(params, state)``.

    A gradient with any non-finite entry skips the update entirely.
    """
    if lr < 0:
        raise ValueError("learning rate must be non-negative")
    if set(grads) != set(params.tensors):
        raise ValueError("gradient keys do not match parameters")
    if not all(np.all(np.isfinite(g)) for g in grads.values()):
        logger.warning("non-finite gradient at step %d; update skipped", state.step)
        return params, replace(state, skipped=state.skipped + 1)
    step = state.step + 1
    c1 = 1.0 - ADAM_BETA1 ** step
    c2 = 1.0 - ADAM_BETA2 ** step
    new_t, new_m, new_v = {}, {}, {}
    for k, p in params.tensors.items():
        g = grads[k]
        if g.shape != p.shape:
            raise ValueError(f"gradient {k} has shape {g.shape}, expected {p.shape}")
        m = ADAM_BETA1 * state.m[k] + (1.0 - ADAM_BETA1) * g
        v = ADAM_BETA2 * state.v[k] + (1.0 - ADAM_BETA2) * g * g
        new_m[k], new_v[k] = m, v
        new_t[k] = p - lr * (m / c1) / (np.sqrt(v / c2) + ADAM_EPS)
    return EncoderParams(params.config, new_t), OptimizerState(new_m, new_v, step, state.skipped)


# --------------------------------------------------------------------------
# Batch loss + gradient
# --------------------------------------------------------------------------


def weak_caption_of(example: TrainExample) -> str:
    if example.weak_caption:
        return example.weak_caption
    ordered = sorted(example.regions, key=lambda r: (r[0], r[1]))
    return " ".join(text.strip() for _, _, text in ordered)


def _encode_texts(params, texts):
    cache = {}
    for text in texts:
        if text not in cache:
            cache[text] = text_forward(params, text)
    return cache


def batch_loss(params: EncoderParams, batch: Sequence[TrainExample], tau: float,
               loss_kind: str, with_grad: bool = True):
    """Loss of one batch and (optionally) its parameter gradient."""
    audio = [audio_forward(params, ex.mel) for ex in batch]
    grads = params.zeros_like() if with_grad else None
    if loss_kind == "frame_wise":
        texts = _encode_texts(params, [r[2] for ex in batch for r in ex.regions])
        regions = []
        for ex, (emb, _) in zip(batch, audio):
            regions.append([(region_to_frames(on, off, ex.frame_duration, emb.shape[0]),
                             texts[text][0]) for on, off, text in ex.regions])
        loss, g = frame_wise_loss(BatchAssembly([a for a, _ in audio], regions, tau))
        if with_grad:
            text_grads: dict = {}
            for ex, gt in zip(batch, g.texts):
                for (_, _, text), gv in zip(ex.regions, gt):
                    text_grads[text] = text_grads.get(text, 0.0) + gv
            for (_, cache), ga in zip(audio, g.clips):
                audio_backward(params, cache, ga, grads)
            for text in sorted(text_grads):
                text_backward(params, texts[text][1], text_grads[text], grads)
    elif loss_kind == "global":
        captions = [weak_caption_of(ex) for ex in batch]
        texts = _encode_texts(params, captions)
        a = np.array([pool_frames(emb) for emb, _ in audio])
        t = np.array([texts[c][0] for c in captions])
        loss, (ga, gt) = global_clap_loss(a, t, tau)
        if with_grad:
            for (emb, cache), g in zip(audio, ga):
                audio_backward(params, cache, pool_frames_backward(emb, g), grads)
            text_grads = {}
            for c, g in zip(captions, gt):
                text_grads[c] = text_grads.get(c, 0.0) + g
            for c in sorted(text_grads):
                text_backward(params, texts[c][1], text_grads[c], grads)
    else:
        raise ValueError(f"unknown loss kind {loss_kind!r}")
    return float(loss), grads


def evaluate_loss(params: EncoderParams, examples: Sequence[TrainExample], cfg: TrainConfig) -> float:
    """Mean batch loss over ``examples`` in order (final partial batch kept if >= 2)."""
    losses = []
    for start in range(0, len(examples), cfg.batch_size):
        batch = examples[start:start + cfg.batch_size]
        if len(batch) >= 2:
            losses.append(batch_loss(params, batch, cfg.tau, cfg.loss_kind, with_grad=False)[0])
    if not losses:
        raise ValueError("need at least 2 validation examples")
    return float(np.mean(losses))


# --------------------------------------------------------------------------
# Training loop
# --------------------------------------------------------------------------


@dataclass
class TrainResult:
    params: EncoderParams
    best_params: EncoderParams
    best_epoch: int
    best_loss: float
    epoch_losses: List[float] = field(default_factory=list)
    val_losses: List[float] = field(default_factory=list)
    log: List[tuple] = field(default_factory=list)  # (step, lr, loss)


def _write_log(path: Path, rows: Sequence[tuple]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["step", "lr", "loss"])
        for step, lr, loss in rows:
            writer.writerow([step, repr(lr), repr(loss)])


def train(examples: Sequence[TrainExample], cfg: TrainConfig,
          params: Optional[EncoderParams] = None,
          encoder_config: Optional[EncoderConfig] = None,
          val_examples: Optional[Sequence[TrainExample]] = None,
          out_dir: Union[str, Path, None] = None) -> TrainResult:
    """Run ``cfg.epochs`` epochs of Adam on shuffled, full batches.

    The partial last batch of every epoch is dropped. The best epoch (by
    validation loss when ``val_examples`` is given, otherwise by mean
    training loss) is kept in ``TrainResult.best_params`` and, with
    ``out_dir``, written to ``best.ckpt`` next to per-epoch checkpoints and
    ``metrics.csv``.
    """
    if not examples:
        raise ValueError("no training examples")
    steps_per_epoch = len(examples) // cfg.batch_size
    if steps_per_epoch == 0:
        raise ValueError(f"{len(examples)} examples do not fill one batch of {cfg.batch_size}")
    if params is None:
        params = init_params(encoder_config or EncoderConfig(seed=cfg.seed))
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    total = steps_per_epoch * cfg.epochs
    state = OptimizerState.zeros(params)
    rng = np.random.default_rng(cfg.seed)
    result = TrainResult(params, params, -1, math.inf)
    step = 0
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(examples))
        losses = []
        for b in range(steps_per_epoch):
            batch = [examples[i] for i in order[b * cfg.batch_size:(b + 1) * cfg.batch_size]]
            loss, grads = batch_loss(params, batch, cfg.tau, cfg.loss_kind)
            lr = lr_at(step + 1, total, cfg)
            params, state = adam_step(params, grads, state, lr)
            step += 1
            losses.append(loss)
            result.log.append((step, lr, loss))
        epoch_loss = float(np.mean(losses))
        result.epoch_losses.append(epoch_loss)
        score = epoch_loss
        if val_examples:
            score = evaluate_loss(params, val_examples, cfg)
            result.val_losses.append(score)
        logger.info("epoch %d: train loss %.6f, selection loss %.6f", epoch + 1, epoch_loss, score)
        meta = {"epoch": epoch + 1, "train": cfg.to_dict(), "selection_loss": score}
        if out is not None:
            save_checkpoint(params, out / f"epoch_{epoch + 1:03d}.ckpt", meta)
        if score < result.best_loss:
            result.best_loss, result.best_epoch, result.best_params = score, epoch + 1, params
            if out is not None:
                save_checkpoint(params, out / "best.ckpt", meta)
    result.params = params
    if out is not None:
        _write_log(out / "metrics.csv", result.log)
    return result


def sweep_temperature(examples: Sequence[TrainExample], cfg: TrainConfig,
                      taus: Sequence[float] = TEMPERATURE_GRID, **kwargs) -> Dict[float, TrainResult]:
    """Train one model per temperature; ``out_dir`` (if given) gets a ``tau_<value>`` subdir each."""
    out_dir = kwargs.pop("out_dir", None)
    results = {}
    for tau in taus:
        sub = Path(out_dir) / f"tau_{tau:g}" if out_dir is not None else None
        results[tau] = train(examples, replace(cfg, tau=tau), out_dir=sub, **kwargs)
    return results
