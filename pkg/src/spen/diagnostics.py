"""Comparison harness: how much loss gradient reaches the Init output through a long unroll."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .energies import TaggingEnergy, TagInput
from .minimizer import SPEN, UnrollConfig
from .trainer import LossConfig, backprop_unroll


@dataclass
class InitGradientReport:
    norms: dict  # rule -> per-trial ||dL/d(init logits)||
    ratios: np.ndarray  # norms[first] / norms[second]

    @property
    def win_rate(self):
        return float(np.mean(self.ratios > 1.0))


def init_gradient_norms(rules=("logit", "emd"), trials=50, T=20, eta=1.0, entropy=0.1,
                        P=2, A=3, D=4, dim=4, seed=0):
    """Per trial, draw a random tagging energy, input and target and unroll each rule on it.

    Both rules start from the same Init logits, so the norms are comparable.
    """
    norms = {r: np.zeros(trials) for r in rules}
    for trial in range(trials):
        rng = np.random.default_rng([seed, trial])
        x = TagInput(rng.standard_normal((P, dim)), rng.standard_normal((A, dim)), rng.standard_normal((P, A, dim)))
        target = np.eye(D)[rng.integers(0, D, (P, A))]
        energy_seed = rng.integers(2**32)
        for rule in rules:
            energy = TaggingEnergy(dim, dim, dim, D, hidden=6, local_hidden=5, entropy_weight=entropy,
                                   rng=np.random.default_rng(energy_seed))
            model = SPEN(energy, UnrollConfig(T=T, rule=rule, momentum=0.0, eta_init=eta, tol=1e-12))
            res = backprop_unroll(model, x, target, LossConfig(kind="log-loss"))
            norms[rule][trial] = np.linalg.norm(res.init_adjoint)
    first, second = rules
    return InitGradientReport(norms, norms[first] / norms[second])
