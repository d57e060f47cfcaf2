"""Unrolled gradient-based energy minimization.

``predict`` runs a fixed budget of T update steps from Init(F(x)), stops
updating once the iterate stops moving (the rest of the trajectory is padded
with copies), and records everything the reverse sweep in
:mod:`spen.trainer` needs.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .autodiff import softmax_array, softplus_array
from .energies import inverse_softplus
from .errors import ConfigurationError, NumericError

log = logging.getLogger(__name__)

RULES = ("gd", "momentum", "emd", "logit", "clip")
SIMPLEX_RULES = ("emd", "logit")
EMD_FLOOR = 1e-30
ETA_PARAM = "unroll.eta_rho"


@dataclass
class UnrollConfig:
    T: int = 20
    rule: str = "gd"
    momentum: float = 0.0
    tol: float = 1e-5
    eta_init: float = 0.1
    train_eta: bool = False

    def validate(self, space=None):
        if int(self.T) != self.T or self.T < 1:
            raise ConfigurationError(f"T must be a positive integer, got {self.T}")
        if self.rule not in RULES:
            raise ConfigurationError(f"unknown rule {self.rule!r}; choose from {RULES}")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigurationError(f"momentum must lie in [0, 1), got {self.momentum}")
        if not self.tol > 0:
            raise ConfigurationError("convergence tolerance must be positive")
        if not self.eta_init > 0:
            raise ConfigurationError("eta_init must be positive")
        if space is not None:
            if self.rule in SIMPLEX_RULES and space != "simplex":
                raise ConfigurationError(f"rule {self.rule!r} needs a simplex output space")
            if self.rule == "clip" and space != "box":
                raise ConfigurationError("rule 'clip' needs a box output space")
        return self


@dataclass
class Trajectory:
    rule: str
    eta: np.ndarray
    momentum: float
    ys: list = field(default_factory=list)
    # optimization variables: logits for rule=logit, the iterates otherwise
    us: list = field(default_factory=list)
    hs: list = field(default_factory=list)
    grads: list = field(default_factory=list)
    masks: list = field(default_factory=list)
    energies: list = field(default_factory=list)
    tapes: list = field(default_factory=list)
    T0: int = 0
    clamp_events: int = 0

    @property
    def T(self):
        return len(self.ys) - 1

    @property
    def final(self):
        return self.ys[-1]

    def release(self):
        for tape in self.tapes:
            tape.close()
        self.tapes = []


# ------------------------------------------------------------------ step rules


def step_gd(y, grad, eta):
    return y - eta * grad


def step_momentum(y, h, grad, eta, mu):
    h_next = mu * h + grad
    return y - eta * h_next, h_next


def _emd_floor(y):
    clamped = int(np.count_nonzero(y < EMD_FLOOR))
    return np.maximum(y, EMD_FLOOR), clamped


def step_emd(y, grad, eta):
    """softmax(log y - eta * grad) on each simplex row."""
    safe, clamped = _emd_floor(y)
    if clamped:
        log.warning("entropic mirror descent clamped %d entries at %g", clamped, EMD_FLOOR)
    return softmax_array(np.log(safe) - eta * grad)


def step_logit(logits, grad_logits, eta):
    return logits - eta * grad_logits


def step_clip(y, grad, eta):
    return np.clip(y - eta * grad, 0.0, 1.0)


def clip_mask(pre):
    """1 where the box projection is the identity, 0 where it clamps."""
    return ((pre >= 0.0) & (pre <= 1.0)).astype(np.float64)


def round_output(y):
    """Argmax over the last axis; ties go to the lowest index."""
    return np.argmax(np.asarray(y), axis=-1)


# --------------------------------------------------------------------- model


class SPEN:
    """An energy plus the unrolled optimizer that minimizes it.

    Step sizes are ``softplus(params['unroll.eta_rho'])`` and live in the
    energy's parameter set so that one checkpoint holds the whole model.
    """

    def __init__(self, energy, unroll):
        self.energy = energy
        self.unroll = unroll.validate(energy.space)
        if ETA_PARAM not in energy.params:
            energy.params.add(ETA_PARAM, np.full(unroll.T, inverse_softplus(unroll.eta_init)))
        elif energy.params[ETA_PARAM].shape != (unroll.T,):
            raise ConfigurationError("step-size parameter does not match T")

    @property
    def params(self):
        return self.energy.params

    @property
    def step_sizes(self):
        return softplus_array(self.params[ETA_PARAM])

    def trainable(self, phase="joint"):
        names = [n for n in self.params if n != ETA_PARAM or self.unroll.train_eta]
        local = set(self.energy.local_names)
        if phase == "pretrain":
            return [n for n in names if n in local]
        if phase == "clamped":
            return [n for n in names if n not in local]
        return names

    def init_iterate(self, x):
        return init_iterate(self.energy, x, self.unroll.rule)

    def predict(self, x, **kw):
        return predict(self.energy, x, self.unroll, eta=kw.pop("eta", self.step_sizes), **kw)


def init_iterate(energy, x, rule="gd"):
    """(y_0, u_0): the first iterate and the variable the rule optimizes."""
    out = energy.init_value(x)
    if energy.space != "simplex":
        return out, out
    y0 = softmax_array(out)
    return y0, (out if rule == "logit" else y0)


def predict(energy, x, cfg, eta=None, keep_tapes=False, store_grads=True):
    """Run ``cfg.T`` steps of ``cfg.rule`` from Init and record the trajectory.

    ``keep_tapes`` retains each step's energy tape (the memory-hungry path);
    ``store_grads=False`` keeps only iterates and scalar energies so the
    reverse sweep must recompute gradients.
    """
    cfg.validate(energy.space)
    T = cfg.T
    eta = np.full(T, cfg.eta_init) if eta is None else np.asarray(eta, dtype=np.float64)
    if eta.shape != (T,):
        raise ConfigurationError(f"expected {T} step sizes, got shape {eta.shape}")
    rule = cfg.rule
    logits = rule == "logit"
    mu = cfg.momentum if rule in ("momentum", "logit") else 0.0
    traj = Trajectory(rule=rule, eta=eta, momentum=mu)
    y, u = init_iterate(energy, x, rule)
    h = np.zeros_like(u)
    traj.ys.append(y)
    traj.us.append(u)
    traj.hs.append(h)
    traj.T0 = T
    converged = False
    for t in range(T):
        if converged:
            traj.ys.append(y)
            traj.us.append(u)
            traj.hs.append(h)
            traj.energies.append(traj.energies[-1])
            continue
        try:
            ev = energy.evaluate(u, x, logits=logits, keep_tape=keep_tapes)
        except NumericError as exc:
            raise NumericError(f"prediction aborted at iterate {t}: {exc}") from None
        traj.energies.append(ev.value)
        if keep_tapes:
            traj.tapes.append(ev.tape)
        g = ev.grad
        traj.grads.append(g if store_grads else None)
        if rule in ("momentum", "logit"):
            u_next, h = step_momentum(u, h, g, eta[t], mu)
            y_next = softmax_array(u_next) if logits else u_next
        elif rule == "gd":
            u_next = y_next = step_gd(u, g, eta[t])
        elif rule == "clip":
            pre = u - eta[t] * g
            traj.masks.append(clip_mask(pre))
            u_next = y_next = np.clip(pre, 0.0, 1.0)
        else:  # emd
            traj.clamp_events += int(np.count_nonzero(u < EMD_FLOOR))
            u_next = y_next = step_emd(u, g, eta[t])
        if not np.all(np.isfinite(u_next)):
            raise NumericError(f"prediction aborted at iterate {t + 1}: non-finite iterate")
        moved = float(np.max(np.abs(y_next - y))) if y.size else 0.0
        y, u = y_next, u_next
        traj.ys.append(y)
        traj.us.append(u)
        traj.hs.append(h)
        if moved < cfg.tol:
            traj.T0 = t + 1
            converged = True
    try:
        last = energy.evaluate(u, x, logits=logits, need_grad=False).value
    except NumericError as exc:
        raise NumericError(f"prediction aborted at iterate {traj.T0}: {exc}") from None
    # energies[t] belongs to ys[t]; pad the converged tail with the final value
    traj.energies = traj.energies[: traj.T0] + [last] * (T + 1 - traj.T0)
    return traj
