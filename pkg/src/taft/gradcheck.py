"""Finite-difference audit of the full episode loss on a tiny model."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .episodes import SplitConfig, sample_episode
from .segnet import ModelConfig, SegNet
from .trainer import run_episode

TOLERANCE = 1e-4


@dataclass
class GradcheckResult:
    group_errors: dict[str, float]
    worst_param: dict[str, str]
    routed_reference_error: float

    @property
    def passed(self) -> bool:
        return all(e < TOLERANCE for e in self.group_errors.values()) and self.routed_reference_error < TOLERANCE

    def offender(self) -> str | None:
        worst = max(self.group_errors, key=self.group_errors.get)
        if self.group_errors[worst] >= TOLERANCE:
            return self.worst_param[worst]
        if self.routed_reference_error >= TOLERANCE:
            return "refs (L_R only)"
        return None


def run_gradcheck(seed: int = 0, canvas: int = 32, coords_per_param: int = 4, h: float = 1e-6,
                  model_config: ModelConfig | None = None) -> GradcheckResult:
    """Check d(L_S + L_R) for every group, and dL_R for the references alone."""
    with ad.precision(64):
        model = SegNet(model_config or ModelConfig.tiny(), seed=seed)
        # zero biases put pre-activations exactly on relu kinks, where central differences are meaningless
        jitter = np.random.default_rng(seed + 7)
        for p in model.parameters():
            if p.name.endswith(".bias"):
                p.data = jitter.normal(0.0, 0.1, p.shape)
        episode = sample_episode(SplitConfig(0), "train", shots=2, queries=2, seed=seed, canvas=canvas)
        params = model.parameters()

        def full_loss():
            report = run_episode(model, episode)
            return report.seg_loss + report.aux_loss

        report = ad.finite_diff_report(full_loss, params, h=h, coords_per_param=coords_per_param,
                                       rng=np.random.default_rng(seed))
        group_errors: dict[str, float] = {}
        worst_param: dict[str, str] = {}
        for pos, err in report.items():
            p = params[pos]
            if err >= group_errors.get(p.group, -1.0):
                group_errors[p.group] = err
                worst_param[p.group] = p.name
        refs = model.refs.parameters()
        routed = ad.finite_diff_check(lambda: run_episode(model, episode).aux_loss, refs, h=h,
                                      coords_per_param=coords_per_param, rng=np.random.default_rng(seed + 1))
    return GradcheckResult(group_errors, worst_param, routed)
