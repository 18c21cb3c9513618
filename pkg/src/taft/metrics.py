"""Foreground mIoU, binary IoU and the multi-scale episodic evaluation."""

from __future__ import annotations

import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .core import DEFAULT_RIDGE, apply_transform, build_task_transform
from .episodes import DEFAULT_CANVAS, Episode, SplitConfig, episode_seed, sample_episode, write_pgm
from .errors import DimensionError, EvaluationError
from .segnet import HIGH_STRIDE, SegNet, load_checkpoint

EVAL_QUERIES = 5
DEFAULT_SCALES = (0.7, 1.0, 1.3)
# Episode-index stride between classes in the evaluation seed stream.
_CLASS_STRIDE = 1 << 32


@dataclass
class IoUCounts:
    """Pooled pixel counts; ``per_class`` maps class id to [intersection, union]."""

    per_class: dict[int, list[int]] = field(default_factory=dict)
    fg_i: int = 0
    fg_u: int = 0
    bg_i: int = 0
    bg_u: int = 0

    def merge(self, other: IoUCounts) -> IoUCounts:
        out = IoUCounts({k: list(v) for k, v in self.per_class.items()},
                        self.fg_i + other.fg_i, self.fg_u + other.fg_u,
                        self.bg_i + other.bg_i, self.bg_u + other.bg_u)
        for k, (i, u) in other.per_class.items():
            entry = out.per_class.setdefault(k, [0, 0])
            entry[0] += i
            entry[1] += u
        return out

    def __eq__(self, other) -> bool:
        if not isinstance(other, IoUCounts):
            return NotImplemented
        return ({k: tuple(v) for k, v in self.per_class.items()} == {k: tuple(v) for k, v in other.per_class.items()}
                and (self.fg_i, self.fg_u, self.bg_i, self.bg_u) == (other.fg_i, other.fg_u, other.bg_i, other.bg_u))


def accumulate(counts: IoUCounts, pred: np.ndarray, gt: np.ndarray, class_id: int) -> IoUCounts:
    """Add one prediction/ground-truth pair to ``counts`` (in place; returned for chaining)."""
    pred = np.asarray(pred).astype(bool)
    gt = np.asarray(gt).astype(bool)
    if pred.shape != gt.shape:
        raise DimensionError(f"prediction {pred.shape} vs ground truth {gt.shape}")
    inter = int(np.count_nonzero(pred & gt))
    union = int(np.count_nonzero(pred | gt))
    entry = counts.per_class.setdefault(int(class_id), [0, 0])
    entry[0] += inter
    entry[1] += union
    counts.fg_i += inter
    counts.fg_u += union
    counts.bg_i += int(np.count_nonzero(~pred & ~gt))
    counts.bg_u += int(np.count_nonzero(~pred | ~gt))
    return counts


def class_iou(counts: IoUCounts, class_id: int) -> float:
    i, u = counts.per_class.get(class_id, (0, 0))
    if u == 0:
        raise EvaluationError(f"class {class_id} has zero union")
    return i / u


def miou(counts: IoUCounts, class_set: Iterable[int]) -> float:
    classes = list(class_set)
    if not classes:
        raise EvaluationError("empty class set")
    return sum(class_iou(counts, c) for c in classes) / len(classes)


def binary_iou(counts: IoUCounts) -> float:
    if counts.fg_u == 0 or counts.bg_u == 0:
        raise EvaluationError("binary IoU undefined: zero foreground or background union")
    return (counts.fg_i / counts.fg_u + counts.bg_i / counts.bg_u) / 2


# ------------------------------------------------------------- multi-scale


def scaled_size(size: int, scale: float) -> int:
    """Nearest multiple of 16 to ``size * scale``, at least 16."""
    return max(HIGH_STRIDE, int(round(size * scale / HIGH_STRIDE)) * HIGH_STRIDE)


def multi_scale_probabilities(model: SegNet, P: Tensor, images: np.ndarray,
                              scales: Sequence[float]) -> np.ndarray:
    """Scale-averaged ``N x 2 x H x W`` class probabilities for query images."""
    if not scales:
        raise ValueError("at least one scale is required")
    images = np.asarray(images)
    h, w = images.shape[-2:]
    total = None
    with ad.no_grad():
        x_full = Tensor(images)
        for s in sorted(scales):
            sh, sw = scaled_size(h, s), scaled_size(w, s)
            x = x_full if (sh, sw) == (h, w) else ad.bilinear_resize(x_full, sh, sw)
            feats = model.encode(x)
            logits = model.head(apply_transform(P, feats.high_level), feats.low_level)
            probs = ad.softmax_channel(logits)
            if (sh, sw) != (h, w):
                probs = ad.bilinear_resize(probs, h, w)
            total = probs.data.copy() if total is None else total + probs.data
    return total / len(scales)


def multi_scale_predict(model: SegNet, P: Tensor, images: np.ndarray, scales: Sequence[float]) -> np.ndarray:
    """Binary mask(s) from scale-averaged probabilities; ties go to background."""
    probs = multi_scale_probabilities(model, P, images, scales)
    return (probs[..., 0, :, :] > probs[..., 1, :, :]).astype(np.uint8)


def support_transform(model: SegNet, episode: Episode, ridge: float = DEFAULT_RIDGE) -> Tensor:
    with ad.no_grad():
        feats = model.encode(Tensor(episode.support_images))
        return build_task_transform(feats.high_level, episode.support_masks, model.refs, HIGH_STRIDE,
                                    ridge=ridge).P


def evaluation_episodes(split: SplitConfig, shots: int, episodes_per_class: int, seed: int,
                        canvas: int = DEFAULT_CANVAS, queries: int = EVAL_QUERIES,
                        class_ids: Sequence[int] | None = None):
    """Deterministic test-episode stream, class by class."""
    for class_id in (split.test_class_ids if class_ids is None else class_ids):
        for i in range(episodes_per_class):
            s = episode_seed(seed, class_id * _CLASS_STRIDE + i, "eval")
            yield sample_episode(split, "test", shots, queries, s, canvas=canvas, class_id=class_id)


def _evaluate_classes(model: SegNet, split: SplitConfig, class_ids: Sequence[int], shots: int,
                      episodes_per_class: int, scales: Sequence[float], seed: int, ridge: float, canvas: int,
                      queries: int, dump: Path | None) -> IoUCounts:
    counts = IoUCounts()
    stream = evaluation_episodes(split, shots, episodes_per_class, seed, canvas, queries, class_ids)
    for n, episode in enumerate(stream):
        P = support_transform(model, episode, ridge)
        preds = multi_scale_predict(model, P, episode.query_images, scales)
        for q, (pred, gt) in enumerate(zip(preds, episode.query_masks)):
            accumulate(counts, pred, gt, episode.class_id)
            if dump is not None:
                stem = f"c{episode.class_id:02d}_e{n % episodes_per_class:05d}_q{q}"
                write_pgm(dump / f"{stem}_pred.pgm", pred.astype(np.uint8) * 255)
                write_pgm(dump / f"{stem}_gt.pgm", gt.astype(np.uint8) * 255)
    return counts


def evaluate(model: SegNet | str | Path, split: int | SplitConfig, shots: int, episodes_per_class: int,
             scales: Sequence[float] = DEFAULT_SCALES, seed: int = 0, ridge: float = DEFAULT_RIDGE,
             canvas: int = DEFAULT_CANVAS, queries: int = EVAL_QUERIES,
             dump_masks: str | Path | None = None, workers: int = 1) -> dict:
    """Episodic evaluation on the split's test classes; returns the JSON report dict.

    With ``workers > 1`` test classes are evaluated in separate processes and
    their counts merged; the report is identical to the single-worker one.
    """
    start = time.perf_counter()
    if episodes_per_class < 1:
        raise EvaluationError("episodes_per_class must be >= 1")
    split = split if isinstance(split, SplitConfig) else SplitConfig(split)
    source = None
    if not isinstance(model, SegNet):
        source = str(model)
        model = load_checkpoint(model).model
    dump = Path(dump_masks) if dump_masks is not None else None
    if dump is not None:
        dump.mkdir(parents=True, exist_ok=True)

    classes = split.test_class_ids
    args = (shots, episodes_per_class, list(scales), seed, ridge, canvas, queries, dump)
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(_evaluate_classes, *zip(*[(model, split, [c], *args) for c in classes])))
        counts = IoUCounts()
        for part in parts:
            counts = counts.merge(part)
    else:
        counts = _evaluate_classes(model, split, classes, *args)

    return {
        "config": {
            "checkpoint": source,
            "split": split.split_index,
            "shots": shots,
            "queries": queries,
            "episodes_per_class": episodes_per_class,
            "scales": list(scales),
            "scaled_sizes": {str(s): scaled_size(canvas, s) for s in scales},
            "size_rounding": "nearest multiple of 16, minimum 16",
            "seed": seed,
            "ridge": ridge,
            "canvas": canvas,
        },
        "per_class": [{"id": c, "fg_iou": class_iou(counts, c)} for c in classes],
        "miou": miou(counts, classes),
        "binary_iou": binary_iou(counts),
        "episodes": episodes_per_class * len(classes),
        "wall_ms": round((time.perf_counter() - start) * 1000.0, 3),
    }
