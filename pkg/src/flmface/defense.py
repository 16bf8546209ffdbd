"""Adversarial training (single-step FGSM or PGD) and robustness evaluation."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from .attack import AttackConfig, AttackResult, run_attack
from .tps import LandmarkSet
from .victim import (
    ArchitectureDescriptor,
    TrainConfig,
    VictimModel,
    backward_batch,
    cross_entropy,
    forward_batch,
    train,
)

log = logging.getLogger(__name__)


@dataclass
class DefenseConfig:
    kind: str = "fgsm_at"
    eps: float = 0.03
    pgd_steps: int = 7
    pgd_step_size: float | None = None
    adv_fraction: float = 0.5
    train: TrainConfig = field(default_factory=TrainConfig)

    def __post_init__(self):
        if self.kind not in ("fgsm_at", "pgd_at"):
            raise ValueError(f"unknown defense {self.kind!r}")
        if self.eps <= 0:
            raise ValueError("eps must be positive")
        # 0 is accepted as a degenerate setting equivalent to plain training
        if not 0.0 <= self.adv_fraction <= 1.0:
            raise ValueError("adv_fraction must lie in [0, 1]")
        if self.pgd_steps < 1:
            raise ValueError("pgd_steps must be >= 1")
        if self.pgd_step_size is None:
            self.pgd_step_size = self.eps / 4


def _input_grad(descriptor, params, xb, yb):
    logits, caches = forward_batch(descriptor, params, xb)
    _, dlogits = cross_entropy(logits, yb)
    dx, _ = backward_batch(descriptor, params, caches, dlogits, need_params=False)
    return dx


def fgsm_examples(descriptor, params, x, y, eps):
    return np.clip(x + eps * np.sign(_input_grad(descriptor, params, x, y)), 0.0, 1.0)


def pgd_examples(descriptor, params, x, y, eps, steps, step_size, on_step=None):
    """Projected sign-gradient ascent inside the L-inf ``eps`` ball, clipped to [0, 1]."""
    x0 = x
    x_adv = x.copy()
    for _ in range(steps):
        x_adv = x_adv + step_size * np.sign(_input_grad(descriptor, params, x_adv, y))
        x_adv = np.clip(np.clip(x_adv, x0 - eps, x0 + eps), 0.0, 1.0)
        assert np.all(np.abs(x_adv - x0) <= eps + 1e-12) and x_adv.min() >= 0.0 and x_adv.max() <= 1.0
        if on_step is not None:
            on_step(x_adv)
    return x_adv


def make_augment(descriptor: ArchitectureDescriptor, cfg: DefenseConfig):
    """Batch hook replacing the leading ``adv_fraction`` of each batch with
    adversarial versions crafted against the current parameters."""

    def augment(params, xb, yb):
        n_adv = int(round(cfg.adv_fraction * len(xb)))
        if n_adv == 0:
            return xb
        xb = xb.copy()
        if cfg.kind == "fgsm_at":
            xb[:n_adv] = fgsm_examples(descriptor, params, xb[:n_adv], yb[:n_adv], cfg.eps)
        else:
            xb[:n_adv] = pgd_examples(descriptor, params, xb[:n_adv], yb[:n_adv], cfg.eps,
                                      cfg.pgd_steps, cfg.pgd_step_size)
        return xb

    return augment


def adversarial_train(descriptor: ArchitectureDescriptor, x, y, cfg: DefenseConfig = DefenseConfig(),
                      x_test=None, y_test=None) -> VictimModel:
    model = train(descriptor, x, y, cfg.train, x_test, y_test, augment=make_augment(descriptor, cfg))
    meta = asdict(cfg)
    meta.pop("train")
    model.metadata["defense"] = meta
    return model


@dataclass
class DefenseReport:
    """Per-attack success rates plus the per-sample results they were computed from."""

    rates: dict = field(default_factory=dict)
    results: dict = field(default_factory=dict)

    def recount(self) -> dict:
        return {name: 100.0 * float(np.mean([r.success for r in res])) for name, res in self.results.items() if res}


def evaluate_under_defense(model: VictimModel, samples, attacks) -> DefenseReport:
    """Run each named attack on the same ``(x, landmarks, label)`` samples.

    ``attacks`` maps a column name to an :class:`AttackConfig`. Rates are in
    percent.
    """
    samples = list(samples)
    report = DefenseReport()
    if not samples:
        return report
    for name, cfg in dict(attacks).items():
        results: list[AttackResult] = []
        for x, P, c in samples:
            if not isinstance(P, LandmarkSet):
                P = LandmarkSet(*P)
            results.append(run_attack(x, P, int(c), model, cfg))
        report.results[name] = results
        report.rates[name] = 100.0 * sum(r.success for r in results) / len(results)
        log.info("%s: %.2f%% success", name, report.rates[name])
    assert report.rates == report.recount()
    return report


def default_attacks(fgsm_eps: float = 0.03) -> dict:
    return {
        "FGSM": AttackConfig("fgsm", eps=fgsm_eps, max_iters=1),
        "FLM": AttackConfig("flm"),
        "GFLM": AttackConfig("gflm"),
    }
