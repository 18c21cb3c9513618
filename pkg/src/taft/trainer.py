"""Episodic meta-training with per-group loss routing and Adam.

The encoder is updated with the gradient of L_S + L_R, the decoder (with
ASPP) with L_S only and the reference vectors with L_R only. This is done
with two backward passes that accumulate into disjoint group sets.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor
from .core import (DEFAULT_RIDGE, LossReport, apply_transform, auxiliary_loss, build_task_transform,
                   downsample_soft_label, reference_prediction, segmentation_loss)
from .episodes import DEFAULT_CANVAS, Episode, SplitConfig, episode_seed, sample_episode
from .errors import TaftError
from .segnet import HIGH_STRIDE, ModelConfig, SegNet, load_checkpoint, save_checkpoint

log = logging.getLogger(__name__)

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

SEG_GROUPS = ("encoder", "decoder")
AUX_GROUPS = ("encoder", "references")


@dataclass
class TrainConfig:
    episodes: int = 3000
    base_lr: float = 3e-4
    encoder_lr_mult: float = 1.0
    decay_factor: float = 0.1
    decay_at_episode: int | None = None
    weight_decay: float = 1e-4
    shots: int = 1
    queries: int | None = None
    split: int = 0
    seed: int = 0
    ridge: float = DEFAULT_RIDGE
    differentiate_through_P: bool = True
    average_over_queries: bool = True
    precision: int = 32
    checkpoint_every: int = 500
    canvas: int = DEFAULT_CANVAS
    scale_range: tuple[float, float] = (0.2, 0.6)
    area_range: tuple[float, float] = (0.02, 0.6)
    model: ModelConfig = field(default_factory=ModelConfig)

    def __post_init__(self):
        if self.decay_at_episode is None:
            self.decay_at_episode = max(1, round(self.episodes * 2 / 3))
        if self.queries is None:
            self.queries = 12 if self.shots == 1 else 10
        if self.episodes < 0:
            raise ValueError("episodes must be >= 0")
        if self.decay_at_episode <= 0 or (self.episodes > 0 and self.decay_at_episode > self.episodes):
            raise ValueError(f"decay_at_episode must be in 1..episodes, got {self.decay_at_episode}")
        for name in ("base_lr", "encoder_lr_mult", "decay_factor"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.shots < 1 or self.queries < 1:
            raise ValueError("shots and queries must be >= 1")
        if self.precision not in (32, 64):
            raise ValueError("precision must be 32 or 64")
        if self.checkpoint_every < 1:
            raise ValueError("checkpoint_every must be >= 1")
        SplitConfig(self.split)

    def group_lrs(self, episode: int) -> dict[str, float]:
        """Learning rate of each group for the (0-based) episode index."""
        base = self.base_lr * (self.decay_factor if episode >= self.decay_at_episode else 1.0)
        return {"encoder": base * self.encoder_lr_mult, "decoder": base, "references": base}


@dataclass
class TrainState:
    model: SegNet
    episode_index: int = 0
    rng_state: dict = field(default_factory=dict)
    loss_history: list[tuple[int, float, float]] = field(default_factory=list)


def run_episode(model: SegNet, episode: Episode, ridge: float = DEFAULT_RIDGE,
                differentiate_through_P: bool = True, average_over_queries: bool = True) -> LossReport:
    """Forward pass of one training episode; returns both losses as graph nodes."""
    n_s = len(episode.support_images)
    n_q = len(episode.query_images)
    images = Tensor(np.concatenate([episode.support_images, episode.query_images]))
    feats = model.encode(images)
    try:
        task = build_task_transform(feats.high_level[:n_s], episode.support_masks, model.refs, HIGH_STRIDE,
                                    ridge=ridge, differentiate_through_P=differentiate_through_P)
    except TaftError as exc:
        exc.args = (f"{exc.args[0]} [episode seed {episode.seed}]",) + exc.args[1:]
        raise
    h_a = apply_transform(task.P, feats.high_level[n_s:])
    pred = reference_prediction(h_a, model.refs)
    aux = auxiliary_loss(pred, downsample_soft_label(episode.query_masks, HIGH_STRIDE))
    logits = model.head(h_a, feats.low_level[n_s:])
    seg = segmentation_loss(logits, episode.query_masks)
    if average_over_queries:
        aux = ad.scale(aux, 1.0 / n_q)
        seg = ad.scale(seg, 1.0 / n_q)
    return LossReport(seg_loss=seg, aux_loss=aux, query_count=n_q,
                      extras={"P": task.P, "h_a": h_a, "logits": logits, "pred": pred})


def route_gradients(report: LossReport) -> None:
    """backward(L_S) into encoder+decoder, then backward(L_R) into encoder+references."""
    ad.backward(report.seg_loss, groups=SEG_GROUPS)
    ad.backward(report.aux_loss, groups=AUX_GROUPS)


def adam_step(params: list[Parameter], lrs: dict[str, float], weight_decay: float = 0.0) -> None:
    """One Adam step per parameter; decoupled weight decay on the encoder group only."""
    for p in params:
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        lr = lrs[p.group]
        p.step_count += 1
        t = p.step_count
        p.adam_m = ADAM_BETA1 * p.adam_m + (1 - ADAM_BETA1) * g
        p.adam_v = ADAM_BETA2 * p.adam_v + (1 - ADAM_BETA2) * (g * g)
        m_hat = p.adam_m / (1 - ADAM_BETA1 ** t)
        v_hat = p.adam_v / (1 - ADAM_BETA2 ** t)
        update = m_hat / (np.sqrt(v_hat) + ADAM_EPS)
        if weight_decay and p.group == "encoder":
            update = update + weight_decay * p.data
        p.data = (p.data - lr * update).astype(p.data.dtype)


def route_and_step(model: SegNet, report: LossReport, lrs: dict[str, float], weight_decay: float) -> None:
    route_gradients(report)
    adam_step(model.parameters(), lrs, weight_decay)
    model.refs.check_norms()


def train(config: TrainConfig, out_dir: str | Path | None = None, resume: str | Path | None = None,
          log_path: str | Path | None = None, progress_every: int = 100) -> TrainState:
    """Run ``config.episodes`` training episodes, checkpointing into ``out_dir``."""
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    if log_path is None and out is not None:
        log_path = out / "train_log.jsonl"
    split = SplitConfig(config.split)

    with ad.precision(config.precision):
        if resume is not None:
            ckpt = load_checkpoint(resume)
            model = ckpt.model
            state = TrainState(model, ckpt.episode_index, ckpt.rng_state)
        else:
            model = SegNet(config.model, seed=config.seed)
            state = TrainState(model, 0, model.init_rng.bit_generator.state)
            if log_path is not None:
                Path(log_path).write_text("")
        params = model.parameters()
        log_file = open(log_path, "a") if log_path is not None else None
        try:
            for e in range(state.episode_index, config.episodes):
                start = time.perf_counter()
                episode = sample_episode(split, "train", config.shots, config.queries,
                                         episode_seed(config.seed, e, "train"), canvas=config.canvas,
                                         scale_range=config.scale_range, area_range=config.area_range)
                model.zero_grad()
                report = run_episode(model, episode, config.ridge, config.differentiate_through_P,
                                     config.average_over_queries)
                lrs = config.group_lrs(e)
                route_and_step(model, report, lrs, config.weight_decay)
                seg, aux = report.seg_loss.item(), report.aux_loss.item()
                state.loss_history.append((e, seg, aux))
                state.episode_index = e + 1
                wall_ms = (time.perf_counter() - start) * 1000.0
                if log_file is not None:
                    record = {"episode": e, "seg_loss": seg, "aux_loss": aux, "lr_encoder": lrs["encoder"],
                              "lr_decoder": lrs["decoder"], "lr_refs": lrs["references"],
                              "wall_ms": round(wall_ms, 3)}
                    log_file.write(json.dumps(record) + "\n")
                    log_file.flush()
                if progress_every and (e + 1) % progress_every == 0:
                    log.info("episode %d  L_S %.4f  L_R %.4f", e + 1, seg, aux)
                if out is not None and (e + 1) % config.checkpoint_every == 0:
                    save_checkpoint(out / f"checkpoint_{e + 1:06d}.taft", model, e + 1, state.rng_state)
        finally:
            if log_file is not None:
                log_file.close()
        model.zero_grad()
        if out is not None:
            save_checkpoint(out / "final.taft", model, state.episode_index, state.rng_state)
    return state
