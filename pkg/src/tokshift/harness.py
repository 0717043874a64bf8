"""Synthetic motion-direction task, SGD training loop and multi-view inference."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np

from . import tensor as tn
from .model import ModelConfig, Parameters, init_params, model_forward

logger = logging.getLogger(__name__)

LABELS = ("left", "right", "up", "down")
_FLIP = np.array([1, 0, 2, 3])  # horizontal mirror swaps left and right
_SPLITS = {"train": 0, "val": 1, "test": 2}


@dataclass(frozen=True)
class SyntheticTask:
    """A bright square translating across a dark frame in one of four directions."""

    seed: int = 0
    frames: int = 8
    height: int = 32
    width: int = 32
    square: int = 6
    speed: int = 2
    noise: float = 0.05

    def __post_init__(self):
        if self.square < 1 or self.speed < 0 or self.noise < 0:
            raise ValueError("square must be >= 1, speed and noise >= 0")
        travel = self.speed * (self.frames - 1) + self.square
        if travel > self.width or travel > self.height:
            raise ValueError(
                f"trajectory of {travel} px leaves the {self.height}x{self.width} frame"
            )

    @property
    def classes(self) -> int:
        return len(LABELS)


def _start_ranges(task: SyntheticTask, label: int) -> tuple[tuple[int, int], tuple[int, int]]:
    # inclusive (y, x) ranges for the top-left corner at frame 0
    travel = task.speed * (task.frames - 1)
    ys = (0, task.height - task.square)
    xs = (0, task.width - task.square)
    if LABELS[label] == "left":
        xs = (travel, xs[1])
    elif LABELS[label] == "right":
        xs = (0, xs[1] - travel)
    elif LABELS[label] == "up":
        ys = (travel, ys[1])
    else:
        ys = (0, ys[1] - travel)
    return ys, xs


_STEP = {"left": (0, -1), "right": (0, 1), "up": (-1, 0), "down": (1, 0)}


def make_clip(task: SyntheticTask, seed, label: int, start: tuple[int, int] | None = None):
    """Render one ``[T, H, W, 3]`` clip; deterministic in ``(task, seed, label)``.

    ``start`` overrides the sampled top-left corner ``(y, x)`` of frame 0.
    """
    if not 0 <= label < len(LABELS):
        raise ValueError(f"label must be in [0, {len(LABELS)}), got {label}")
    rng = np.random.default_rng(seed)
    (y_lo, y_hi), (x_lo, x_hi) = _start_ranges(task, label)
    x0 = int(rng.integers(x_lo, x_hi + 1))
    y0 = int(rng.integers(y_lo, y_hi + 1))
    if start is not None:
        y0, x0 = start
        if not (y_lo <= y0 <= y_hi and x_lo <= x0 <= x_hi):
            raise ValueError(f"start {start} puts the trajectory outside the frame")
    dy, dx = _STEP[LABELS[label]]
    clip = np.zeros((task.frames, task.height, task.width, 3))
    s = task.square
    for t in range(task.frames):
        y, x = y0 + dy * task.speed * t, x0 + dx * task.speed * t
        clip[t, y:y + s, x:x + s, :] = 1.0
    if task.noise > 0:
        clip += rng.normal(0.0, task.noise, clip.shape)
        np.clip(clip, 0.0, 1.0, out=clip)
    return clip, label


def clip_seed(task: SyntheticTask, split: str, index: int) -> list[int]:
    return [task.seed, _SPLITS[split], index]


def dataset_label(index: int, classes: int = 4) -> int:
    # cyclic labels keep every batch of a multiple of `classes` balanced
    return index % classes


def make_batch(task: SyntheticTask, split: str, indices: Sequence[int]) -> tuple[np.ndarray, np.ndarray]:
    clips, labels = [], []
    for i in indices:
        clip, label = make_clip(task, clip_seed(task, split, int(i)), dataset_label(int(i)))
        clips.append(clip)
        labels.append(label)
    return np.stack(clips), np.array(labels)


def augment(clips: np.ndarray, labels: np.ndarray, rng: np.random.Generator, pad: int = 4):
    """Random spatial crop (zero padding) and horizontal flip with left/right remap."""
    B, T, H, W, C = clips.shape
    padded = np.zeros((B, T, H + 2 * pad, W + 2 * pad, C))
    padded[:, :, pad:pad + H, pad:pad + W] = clips
    out = np.empty_like(clips)
    labels = labels.copy()
    offsets = rng.integers(0, 2 * pad + 1, size=(B, 2))
    flips = rng.random(B) < 0.5
    for b in range(B):
        oy, ox = offsets[b]
        crop = padded[b, :, oy:oy + H, ox:ox + W]
        if flips[b]:
            crop = crop[:, :, ::-1]
            labels[b] = _FLIP[labels[b]]
        out[b] = crop
    return out, labels


# ---------------------------------------------------------------------------
# sampling and inference


@dataclass(frozen=True)
class SamplingSpec:
    frames: int = 8
    step: int = 1
    views: int = 1
    crops: int = 1

    def __post_init__(self):
        if min(self.frames, self.step, self.views, self.crops) < 1:
            raise ValueError("frames, step, views and crops must all be >= 1")


def view_starts(n_frames: int, spec: SamplingSpec) -> list[int]:
    """Evenly spaced start frames for ``spec.views`` dense sub-clips."""
    span = spec.frames * spec.step
    if span > n_frames:
        raise ValueError(f"need {span} source frames for T={spec.frames}, S={spec.step}; have {n_frames}")
    room = n_frames - span
    if spec.views == 1:
        return [room // 2]
    gap = room // (spec.views - 1)
    if gap == 0:
        raise ValueError(f"{n_frames} frames cannot hold {spec.views} distinct views")
    return [i * gap for i in range(spec.views)]


def sample_clip(source: np.ndarray, spec: SamplingSpec, start: int = 0) -> np.ndarray:
    """Frames ``start + i * step`` for ``i < frames``."""
    source = np.asarray(source)
    last = start + (spec.frames - 1) * spec.step
    if start < 0 or last >= len(source):
        raise ValueError(
            f"sampling frames {start}..{last} step {spec.step} from a {len(source)}-frame source"
        )
    return source[start:last + 1:spec.step]


def crop_offsets(size: int, window: int, count: int) -> list[int]:
    if window > size:
        raise ValueError(f"crop window {window} larger than source {size}")
    if count == 1:
        return [(size - window) // 2]
    return [round(i * (size - window) / (count - 1)) for i in range(count)]


def multi_view_predict(params: Parameters, config: ModelConfig, source: np.ndarray, spec: SamplingSpec) -> np.ndarray:
    """Mean logits over ``views x crops`` sub-clips (crops run left to right)."""
    source = np.asarray(source, dtype=np.float64)
    if spec.frames != config.frames:
        raise ValueError(f"sampling frames {spec.frames} != model frames {config.frames}")
    y0 = crop_offsets(source.shape[1], config.height, 1)[0]
    xs = crop_offsets(source.shape[2], config.width, spec.crops)
    subclips = []
    for start in view_starts(len(source), spec):
        clip = sample_clip(source, spec, start)
        for x0 in xs:
            subclips.append(clip[:, y0:y0 + config.height, x0:x0 + config.width])
    logits = predict(params, config, np.stack(subclips))
    return logits.mean(axis=0)


def predict(params: Parameters, config: ModelConfig, clips: np.ndarray, batch_size: int = 64) -> np.ndarray:
    """Logits ``[B, classes]`` for a stack of clips, without recording a graph."""
    frozen = {k: tn.Tensor(v.data) for k, v in params.items()}
    frozen = Parameters(frozen)
    out = []
    for i in range(0, len(clips), batch_size):
        logits, _ = model_forward(clips[i:i + batch_size], frozen, config)
        out.append(logits.data)
    return np.concatenate(out)


def topk_hits(logits: np.ndarray, labels: np.ndarray, k: int) -> np.ndarray:
    """Boolean hit per sample; equal logits rank the lower class index first."""
    order = np.argsort(-logits, axis=1, kind="stable")[:, :k]
    return (order == np.asarray(labels)[:, None]).any(axis=1)


def evaluate(params: Parameters, config: ModelConfig, clips: np.ndarray, labels, k: int = 1) -> float:
    """Top-k accuracy over a dataset of clips."""
    labels = np.asarray(labels)
    if len(labels) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    if not 1 <= k <= config.classes:
        raise ValueError(f"k={k} outside [1, {config.classes}]")
    return float(topk_hits(predict(params, config, clips), labels, k).mean())


# ---------------------------------------------------------------------------
# training


@dataclass(frozen=True)
class TrainSchedule:
    epochs: int = 15
    base_lr: float = 0.01
    momentum: float = 0.9
    decay: float = 0.1
    milestones: tuple[int, ...] = (10, 13)
    batch_size: int = 16
    clip_norm: float | None = 1.0

    def __post_init__(self):
        ms = tuple(self.milestones)
        object.__setattr__(self, "milestones", ms)
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if any(b <= a for a, b in zip(ms, ms[1:])):
            raise ValueError(f"milestones must be strictly increasing, got {list(ms)}")
        if ms and ms[-1] >= self.epochs:
            raise ValueError(f"milestone {ms[-1]} is not before the last epoch ({self.epochs})")
        if self.base_lr < 0:
            raise ValueError("base_lr must be >= 0")
        if self.clip_norm is not None and self.clip_norm <= 0:
            raise ValueError("clip_norm must be positive (or None to disable)")

    def lr_at(self, epoch: int) -> float:
        passed = sum(1 for m in self.milestones if epoch >= m)
        return self.base_lr * self.decay**passed


@dataclass(frozen=True)
class EpochMetrics:
    epoch: int
    split: str
    loss: float
    top1: float

    def line(self) -> str:
        return f"{self.epoch}\t{self.split}\t{self.loss:.6f}\t{self.top1:.6f}"


@dataclass
class TrainResult:
    params: Parameters
    metrics: list[EpochMetrics] = field(default_factory=list)


class TrainingDiverged(RuntimeError):
    pass


def _val_metrics(params, config, clips, labels) -> tuple[float, float]:
    losses, hits = 0.0, 0
    for lo in range(0, len(labels), 64):
        logits = predict(params, config, clips[lo:lo + 64])
        batch = labels[lo:lo + 64]
        losses += tn.cross_entropy(tn.Tensor(logits), batch).data[0] * len(batch)
        hits += int(topk_hits(logits, batch, 1).sum())
    return losses / len(labels), hits / len(labels)


def train(
    config: ModelConfig,
    task: SyntheticTask,
    schedule: TrainSchedule,
    seed: int = 0,
    n_train: int = 2048,
    n_val: int = 512,
    augment_data: bool = True,
    on_epoch: Callable[[EpochMetrics], None] | None = None,
    params: Parameters | None = None,
) -> TrainResult:
    """SGD with momentum on mean cross-entropy, step decay at the milestones.

    The global gradient norm is clipped to ``schedule.clip_norm`` before the
    momentum update; without it the randomly initialized model stalls at chance.

    Deterministic for a fixed ``seed``: initialization, data order and
    augmentation all derive from it.
    """
    if (config.frames, config.height, config.width) != (task.frames, task.height, task.width):
        raise ValueError("model and task disagree on clip dimensions")
    if config.classes != task.classes:
        raise ValueError(f"model has {config.classes} classes, task has {task.classes}")
    params = init_params(config, seed) if params is None else params
    velocity = {k: np.zeros_like(t.data) for k, t in params.items()}
    # both splits are fixed sets of clips, so render them once
    train_clips, train_labels = make_batch(task, "train", range(n_train))
    val_clips, val_labels = make_batch(task, "val", range(n_val))
    rng = np.random.default_rng([seed, 7])
    result = TrainResult(params)
    step = 0
    for epoch in range(schedule.epochs):
        lr = schedule.lr_at(epoch)
        order = rng.permutation(n_train)
        total, hits = 0.0, 0
        for lo in range(0, n_train, schedule.batch_size):
            index = order[lo:lo + schedule.batch_size]
            clips, labels = train_clips[index], train_labels[index]
            if augment_data:
                clips, labels = augment(clips, labels, rng)
            logits, _ = model_forward(clips, params, config)
            loss = tn.cross_entropy(logits, labels)
            value = float(loss.data[0])
            if not math.isfinite(value):
                raise TrainingDiverged(f"loss became {value} at epoch {epoch}, step {step}")
            params.zero_grad()
            tn.backward(loss)
            factor = 1.0
            if schedule.clip_norm is not None:
                norm = math.sqrt(sum(float(np.vdot(t.grad, t.grad)) for t in params.values()))
                if norm > schedule.clip_norm:
                    factor = schedule.clip_norm / norm
            for name, t in params.items():
                v = velocity[name]
                v *= schedule.momentum
                v += factor * t.grad
                t.data -= lr * v
            total += value * len(labels)
            hits += int(topk_hits(logits.data, labels, 1).sum())
            step += 1
        for m in (
            EpochMetrics(epoch, "train", total / n_train, hits / n_train),
            EpochMetrics(epoch, "val", *_val_metrics(params, config, val_clips, val_labels)),
        ):
            result.metrics.append(m)
            logger.info(m.line())
            if on_epoch is not None:
                on_epoch(m)
    params.zero_grad()
    return result


def toy_config(variant: str = "token", **overrides) -> ModelConfig:
    """The small model used for the synthetic-task demonstration."""
    from .shift import ShiftSpec

    base = dict(frames=8, height=32, width=32, patch=8, dim=64, depth=4, heads=4, classes=4)
    base.update(overrides)
    return ModelConfig(shift=ShiftSpec(variant=variant), **base)


def iter_val(task: SyntheticTask, n_val: int, chunk: int = 64) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    for lo in range(0, n_val, chunk):
        yield make_batch(task, "val", range(lo, min(lo + chunk, n_val)))
