"""Task-adaptive feature transformation for 1-way few-shot segmentation.

Support features and soft labels give class prototypes; the prototypes and
the learned reference vectors give a per-task least-squares map ``P`` that
is applied pixel-wise to query features. This module also holds the two
episode losses.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor
from .errors import DegeneratePrototypeError, DegenerateSupportError, DimensionError

WEIGHT_EPS = 1e-6
NORM_EPS = 1e-8
DEFAULT_RIDGE = 1e-6


@dataclass
class SoftLabel:
    """Average-pooled foreground/background masks, ``(..., H_s, W_s)``."""

    fg: np.ndarray
    bg: np.ndarray

    def stacked(self) -> np.ndarray:
        """``(..., 2, H_s, W_s)`` with foreground first."""
        return np.stack([self.fg, self.bg], axis=-3)


@dataclass
class Prototype:
    vector: Tensor
    class_tag: str
    shot_index: int | None = None


@dataclass
class ReferenceSet:
    r_fg: Parameter
    r_bg: Parameter

    @classmethod
    def random(cls, dim: int, rng: np.random.Generator) -> ReferenceSet:
        """Independent random unit vectors, uniform on the sphere."""
        vectors = []
        for _ in range(2):
            v = rng.standard_normal(dim)
            vectors.append(v / np.linalg.norm(v))
        return cls(Parameter(vectors[0], "references", "refs.fg"), Parameter(vectors[1], "references", "refs.bg"))

    def parameters(self) -> list[Parameter]:
        return [self.r_fg, self.r_bg]

    def check_norms(self) -> None:
        for p in self.parameters():
            if not np.linalg.norm(p.data) > 0.0:
                raise DegeneratePrototypeError(f"reference vector {p.name} collapsed to zero norm")


@dataclass
class MatrixPair:
    """Normalized prototype matrix C and reference matrix R (D x 2, fg then bg)."""

    C: Tensor
    R: Tensor


@dataclass
class LossReport:
    seg_loss: Tensor
    aux_loss: Tensor
    query_count: int
    extras: dict = field(default_factory=dict)


def downsample_soft_label(mask: np.ndarray, factor: int) -> SoftLabel:
    """Average-pool a binary mask (and its complement) by ``factor``."""
    mask = np.asarray(mask, dtype=np.float64)
    h, w = mask.shape[-2:]
    if h % factor or w % factor:
        raise DimensionError(f"mask {h}x{w} not divisible by {factor}")
    lead = mask.shape[:-2]
    fg = mask.reshape(*lead, h // factor, factor, w // factor, factor).mean(axis=(-3, -1))
    bg = (1.0 - mask).reshape(*lead, h // factor, factor, w // factor, factor).mean(axis=(-3, -1))
    return SoftLabel(fg=fg, bg=bg)


def compute_class_prototype(feature: Tensor, weights: np.ndarray, class_tag: str = "fg",
                            shot_index: int | None = None) -> Prototype:
    """Weighted mean of the ``D x H_s x W_s`` feature pixels under ``weights``."""
    weights = np.asarray(weights, dtype=np.float64)
    if feature.shape[-2:] != weights.shape:
        raise DimensionError(f"feature grid {feature.shape[-2:]} vs weights {weights.shape}")
    total = float(weights.sum())
    if total <= WEIGHT_EPS:
        raise DegenerateSupportError(f"{class_tag} weight sum {total:.3g} <= {WEIGHT_EPS}")
    d = feature.shape[-3]
    flat = ad.reshape(feature, (d, weights.size))
    vector = ad.reshape(ad.matmul(flat, Tensor(weights.reshape(-1, 1) / total)), (d,))
    return Prototype(vector, class_tag, shot_index)


def aggregate_shot_prototypes(per_shot: list[Prototype]) -> Prototype:
    """Arithmetic mean of the per-shot prototypes of one class."""
    if not per_shot:
        raise ValueError("no shot prototypes to aggregate")
    tags = {p.class_tag for p in per_shot}
    if len(tags) != 1:
        raise ValueError(f"mixed class tags {sorted(tags)}")
    dims = {p.vector.shape for p in per_shot}
    if len(dims) != 1:
        raise DimensionError(f"inconsistent prototype shapes {sorted(dims)}")
    if len(per_shot) == 1:
        return Prototype(per_shot[0].vector, per_shot[0].class_tag)
    stacked = ad.concat([ad.reshape(p.vector, (1, -1)) for p in per_shot], axis=0)
    return Prototype(ad.tmean(stacked, axis=0), per_shot[0].class_tag)


def _unit_column(v: Tensor, what: str) -> Tensor:
    norm = float(np.linalg.norm(v.data))
    if norm <= NORM_EPS:
        raise DegeneratePrototypeError(f"{what} has norm {norm:.3g} <= {NORM_EPS}")
    length = ad.sqrt(ad.tsum(v * v))
    return ad.reshape(v / length, (-1, 1))


def assemble_matrices(c_fg: Prototype, c_bg: Prototype, refs: ReferenceSet) -> MatrixPair:
    C = ad.concat([_unit_column(c_fg.vector, "fg prototype"), _unit_column(c_bg.vector, "bg prototype")], axis=1)
    R = ad.concat([_unit_column(refs.r_fg, "fg reference"), _unit_column(refs.r_bg, "bg reference")], axis=1)
    return MatrixPair(C, R)


def compute_transform(pair: MatrixPair, ridge: float = DEFAULT_RIDGE, cond_cap: float = 1e12) -> Tensor:
    """``P = R (C^T C + ridge * tr(C^T C)/K * I)^-1 C^T`` with K = number of columns."""
    C, R = pair.C, pair.R
    gram = ad.matmul(C.T, C)
    k = gram.shape[0]
    if ridge:
        eye = Tensor(np.eye(k))
        trace = ad.tsum(gram * eye)
        gram = gram + ad.scale(trace * eye, ridge / k)
    return ad.matmul(ad.matmul(R, ad.mat_inverse(gram, cond_cap=cond_cap)), C.T)


def apply_transform(P: Tensor, feature: Tensor) -> Tensor:
    """Pixel-wise ``P @ h``, i.e. a 1x1 convolution with kernel ``P``."""
    d = P.shape[0]
    if feature.shape[-3] != P.shape[1]:
        raise DimensionError(f"P is {P.shape}, feature has {feature.shape[-3]} channels")
    return ad.conv2d(feature, ad.reshape(P, (d, P.shape[1], 1, 1)))


def reference_logits(h_a: Tensor, refs: ReferenceSet) -> Tensor:
    d = refs.r_fg.shape[0]
    if h_a.shape[-3] != d:
        raise DimensionError(f"task-agnostic feature has {h_a.shape[-3]} channels, references {d}")
    kernel = ad.reshape(ad.concat([refs.r_fg, refs.r_bg], axis=0), (2, d, 1, 1))
    return ad.conv2d(h_a, kernel)


def reference_prediction(h_a: Tensor, refs: ReferenceSet) -> Tensor:
    """Softmax over <r_k, h_a(i, j)> for k in (fg, bg), unnormalized references."""
    return ad.softmax_channel(reference_logits(h_a, refs))


def auxiliary_loss(pred: Tensor, labels: SoftLabel) -> Tensor:
    """Sum over queries of the per-query MSE averaged over its 2*H_s*W_s terms."""
    target = labels.stacked()
    if pred.shape != target.shape:
        raise DimensionError(f"prediction {pred.shape} vs labels {target.shape}")
    per_query = 2 * target.shape[-2] * target.shape[-1]
    diff = pred - Tensor(target)
    return ad.scale(ad.tsum(diff * diff), 1.0 / per_query)


def segmentation_loss(logits: Tensor, mask: np.ndarray) -> Tensor:
    """Sum over images of the pixel-mean cross-entropy of ``2 x H x W`` logits."""
    mask = np.asarray(mask)
    if logits.shape[-2:] != mask.shape[-2:] or logits.shape[-3] != 2 or logits.shape[:-3] != mask.shape[:-2]:
        raise DimensionError(f"logits {logits.shape} vs mask {mask.shape}")
    onehot = np.stack([mask > 0, mask <= 0], axis=-3).astype(np.float64)
    logp = ad.log_softmax_channel(logits)
    pixels = mask.shape[-2] * mask.shape[-1]
    return ad.scale(ad.tsum(logp * Tensor(onehot)), -1.0 / pixels)


@dataclass
class TaskTransform:
    """Everything the support set determines for one episode."""

    P: Tensor
    pair: MatrixPair
    c_fg: Prototype
    c_bg: Prototype


def build_task_transform(support_features: Tensor, support_masks: np.ndarray, refs: ReferenceSet,
                         factor: int, ridge: float = DEFAULT_RIDGE, differentiate_through_P: bool = True,
                         cond_cap: float = 1e12) -> TaskTransform:
    """Prototypes from ``N_s x D x H_s x W_s`` support features, then ``P``."""
    labels = downsample_soft_label(support_masks, factor)
    fg_shots, bg_shots = [], []
    for n in range(support_features.shape[0]):
        feat = support_features[n]
        fg_shots.append(compute_class_prototype(feat, labels.fg[n], "fg", n))
        bg_shots.append(compute_class_prototype(feat, labels.bg[n], "bg", n))
    c_fg = aggregate_shot_prototypes(fg_shots)
    c_bg = aggregate_shot_prototypes(bg_shots)
    pair = assemble_matrices(c_fg, c_bg, refs)
    P = compute_transform(pair, ridge=ridge, cond_cap=cond_cap)
    if not differentiate_through_P:
        P = P.detach()
    return TaskTransform(P, pair, c_fg, c_bg)
