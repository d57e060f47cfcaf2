"""End-to-end training by back-propagating through the unrolled minimizer.

The reverse sweep never differentiates a gradient symbolically.  For the
adjoint ``v`` of the energy gradient at iterate ``u_t`` it evaluates the
energy's first-order gradients at ``u_t +/- eps v``; the y-part of the central
difference is the Hessian-vector product and the parameter part is the mixed
second derivative d/dtheta <v, grad_y E>.
"""
from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import expit

from .autodiff import softmax_array, softmax_vjp
from .energies import LossAugmentedEnergy
from .errors import ConfigurationError, InternalConsistencyError, NumericError, SpenError
from .minimizer import EMD_FLOOR, ETA_PARAM, predict
from .params import icnn_project

log = logging.getLogger(__name__)

LOSSES = ("squared-error", "log-loss")
WEIGHT_MODES = ("avg-weighted", "final-only")


class TrainingError(SpenError, RuntimeError):
    pass


# ------------------------------------------------------------------- losses


@dataclass
class LossConfig:
    kind: str = "squared-error"
    weights: str = "avg-weighted"
    custom: tuple | None = None

    def __post_init__(self):
        if self.kind not in LOSSES:
            raise ConfigurationError(f"unknown loss {self.kind!r}")
        if self.weights not in WEIGHT_MODES:
            raise ConfigurationError(f"unknown loss weighting {self.weights!r}")

    def iterate_weights(self, T):
        """w_1..w_T; the objective is (1/T) sum_t w_t loss(y_t)."""
        if self.custom is not None:
            w = np.asarray(self.custom, dtype=np.float64)
            if w.shape != (T,) or np.any(w < 0):
                raise ConfigurationError("custom loss weights must be T non-negative numbers")
            return w
        if self.weights == "final-only":
            w = np.zeros(T)
            w[-1] = T
            return w
        t = np.arange(1, T + 1)
        return 1.0 / (T - t + 1)


def iterate_loss(kind, y, target):
    """(loss, d loss / d y) for one iterate."""
    if kind == "squared-error":
        diff = y - target
        return float(np.mean(diff * diff)), 2.0 * diff / diff.size
    rows = y.size // y.shape[-1]
    safe = np.maximum(y, 1e-300)
    return float(-np.sum(target * np.log(safe)) / rows), -target / safe / rows


def unroll_loss(traj, target, lc):
    T = traj.T
    w = lc.iterate_weights(T)
    return float(sum(w[t - 1] * iterate_loss(lc.kind, traj.ys[t], target)[0] for t in range(1, T + 1)) / T)


# ---------------------------------------------------------------------- HVP


@dataclass
class HvpConfig:
    eps: float = 1e-5

    def step(self, y, v, positive=False):
        """eps0 (1 + |y|_inf) / |v|_inf; with ``positive`` also keep y +/- eps v > 0."""
        vmax = float(np.max(np.abs(v)))
        eps = self.eps * (1.0 + float(np.max(np.abs(y)))) / vmax
        if positive:
            moving = v != 0
            eps = min(eps, 0.5 * float(np.min(y[moving] / np.abs(v[moving]))))
        return eps


def hvp(energy, y, v, x, cfg=None, logits=False):
    """Central finite-difference Hessian-vector product of the energy at y."""
    cfg = cfg or HvpConfig()
    if not np.any(v):
        return np.zeros_like(y)
    eps = cfg.step(y, v, positive=energy.space == "simplex" and not logits)
    gp = energy.evaluate(y + eps * v, x, logits=logits, validate=False).grad
    gm = energy.evaluate(y - eps * v, x, logits=logits, validate=False).grad
    return (gp - gm) / (2.0 * eps)


def hvp_mixed(energy, y, v, x, cfg=None, logits=False):
    """(H v, {name: d/dtheta <v, grad_y E>}) from one pair of gradient evaluations."""
    cfg = cfg or HvpConfig()
    if not np.any(v):
        return np.zeros_like(y), {}
    eps = cfg.step(y, v, positive=energy.space == "simplex" and not logits)
    ep = energy.evaluate(y + eps * v, x, logits=logits, validate=False, wrt_params=True)
    em = energy.evaluate(y - eps * v, x, logits=logits, validate=False, wrt_params=True)
    scale = 1.0 / (2.0 * eps)
    mixed = {n: (ep.param_grads[n] - em.param_grads[n]) * scale for n in ep.param_grads}
    return (ep.grad - em.grad) * scale, mixed


# ----------------------------------------------------------- reverse sweep


@dataclass
class BackwardResult:
    loss: float
    grads: dict
    trajectory: object = None
    # adjoint w.r.t. Init's raw output (y_0, or the logits of y_0 on the simplex)
    init_adjoint: np.ndarray | None = None


def _to_u(traj, t, ybar):
    """Map an adjoint w.r.t. y_t to one w.r.t. the optimized variable u_t."""
    if traj.rule == "logit":
        return softmax_vjp(traj.ys[t], ybar)
    return ybar


def backprop_unroll(model, x, target, lc, traj=None, checkpoint=True, hvp_cfg=None, eta=None):
    """Loss of the unrolled prediction and its gradient for every parameter.

    With ``checkpoint`` the forward pass keeps only iterates and scalar
    energies and the sweep recomputes each energy gradient; otherwise every
    step's energy tape stays alive until the sweep finishes.
    """
    energy, cfg = model.energy, model.unroll
    eta = model.step_sizes if eta is None else np.asarray(eta, dtype=np.float64)
    if traj is None:
        traj = predict(energy, x, cfg, eta=eta, keep_tapes=not checkpoint, store_grads=not checkpoint)
    try:
        return _sweep(model, x, target, lc, traj, hvp_cfg or HvpConfig())
    finally:
        traj.release()


def _sweep(model, x, target, lc, traj, hvp_cfg):
    energy = model.energy
    params = energy.params
    T, T0, rule = traj.T, traj.T0, traj.rule
    logits = rule == "logit"
    mu, eta = traj.momentum, traj.eta
    w = lc.iterate_weights(T)

    loss = 0.0
    contrib = [None] * (T + 1)
    for t in range(1, T + 1):
        value, dy = iterate_loss(lc.kind, traj.ys[t], target)
        loss += w[t - 1] * value / T
        contrib[t] = dy * (w[t - 1] / T)
    if not np.isfinite(loss):
        raise NumericError("unrolled loss is not finite")

    grads = {n: np.zeros_like(v) for n, v in params.values.items()}
    eta_bar = np.zeros(T)
    # iterates past T0 are copies of y_T0, so their loss adjoints all land there
    ubar = _to_u(traj, T0, sum(contrib[t] for t in range(T0, T + 1)))
    hbar = np.zeros_like(ubar)

    for t in range(T0 - 1, -1, -1):
        u = traj.us[t]
        g = traj.grads[t] if t < len(traj.grads) else None
        if g is None:
            ev = energy.evaluate(u, x, logits=logits)
            stored = traj.energies[t]
            if abs(ev.value - stored) > 1e-12 * max(1.0, abs(stored)):
                raise InternalConsistencyError(
                    f"recomputed energy at iterate {t} differs from checkpoint: {ev.value!r} vs {stored!r}"
                )
            g = ev.grad
        if rule in ("gd", "momentum", "logit"):
            hbar = hbar - eta[t] * ubar
            h_next = traj.hs[t + 1] if rule != "gd" else g
            eta_bar[t] = -float(np.sum(ubar * h_next))
            gbar = hbar
            ubar_prev = ubar
            hbar = mu * hbar
        elif rule == "clip":
            masked = traj.masks[t] * ubar
            eta_bar[t] = -float(np.sum(masked * g))
            gbar = -eta[t] * masked
            ubar_prev = masked
        else:  # emd
            zbar = softmax_vjp(traj.us[t + 1], ubar)
            eta_bar[t] = -float(np.sum(zbar * g))
            gbar = -eta[t] * zbar
            ubar_prev = np.where(u >= EMD_FLOOR, zbar / np.maximum(u, EMD_FLOOR), 0.0)
        hv, mixed = hvp_mixed(energy, u, gbar, x, hvp_cfg, logits=logits)
        ubar = ubar_prev + hv
        for name, m in mixed.items():
            grads[name] += m
        if t >= 1:
            ubar = ubar + _to_u(traj, t, contrib[t])
        if not np.all(np.isfinite(ubar)):
            raise NumericError(f"non-finite adjoint at iterate {t}")

    # through Init
    if energy.space == "simplex" and rule != "logit":
        seed = softmax_vjp(traj.ys[0], ubar)
    else:
        seed = ubar
    for name, gi in energy.init_vjp(x, seed).items():
        grads[name] += gi
    if ETA_PARAM in grads:
        grads[ETA_PARAM] += eta_bar * expit(params[ETA_PARAM])
    for name, gv in grads.items():
        if not np.all(np.isfinite(gv)):
            raise NumericError(f"non-finite gradient for {name}")
    return BackwardResult(loss, grads, traj, seed)


def pretrain_loss_and_grads(model, x, target, lc):
    """loss(y_0, y*) for the feed-forward Init(F(x)) predictor and its gradient."""
    energy = model.energy
    out = energy.init_value(x)
    y0 = softmax_array(out) if energy.space == "simplex" else out
    value, dy = iterate_loss(lc.kind, y0, target)
    seed = softmax_vjp(y0, dy) if energy.space == "simplex" else dy
    return value, energy.init_vjp(x, seed)


# --------------------------------------------------------------------- Adam


class Adam:
    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {n: np.zeros_like(v) for n, v in params.values.items()}
        self.v = {n: np.zeros_like(v) for n, v in params.values.items()}
        self.steps = {n: 0 for n in params.values}

    def step(self, params, grads, names):
        for n in names:
            g = grads.get(n)
            if g is None:
                continue
            self.steps[n] += 1
            k = self.steps[n]
            self.m[n] = self.beta1 * self.m[n] + (1 - self.beta1) * g
            self.v[n] = self.beta2 * self.v[n] + (1 - self.beta2) * g * g
            mhat = self.m[n] / (1 - self.beta1**k)
            vhat = self.v[n] / (1 - self.beta2**k)
            params.values[n] = params.values[n] - self.lr * mhat / (np.sqrt(vhat) + self.eps)


# ------------------------------------------------------------------ training


@dataclass
class TrainerConfig:
    pretrain_epochs: int = 2
    clamp_epochs: int = 2
    epochs: int = 10
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int = 1
    icnn: bool = False
    checkpoint: bool = True
    shuffle: bool = True
    seed: int = 0
    workers: int = 1
    ssvm: bool = False
    margin_scale: float = 1.0

    def validate(self):
        for name in ("pretrain_epochs", "clamp_epochs", "epochs"):
            if getattr(self, name) < 0:
                raise ConfigurationError(f"{name} must be >= 0")
        if self.batch_size < 1 or self.workers < 1:
            raise ConfigurationError("batch_size and workers must be >= 1")
        if not self.lr > 0:
            raise ConfigurationError("lr must be positive")
        return self


@dataclass
class TrainResult:
    model: object
    history: list = field(default_factory=list)
    best_score: float = -np.inf
    best_epoch: int = -1
    final_score: float = -np.inf


class MetricsLog:
    """Append-only CSV: epoch, split, loss, task_metric, wall_seconds."""

    COLUMNS = ("epoch", "split", "loss", "task_metric", "wall_seconds")

    def __init__(self, path=None):
        self.path = Path(path) if path else None
        self.rows = []
        self.start = time.perf_counter()
        if self.path is not None and not self.path.exists():
            with open(self.path, "w", newline="") as fh:
                csv.writer(fh).writerow(self.COLUMNS)

    def append(self, epoch, split, loss, metric):
        row = (epoch, split, float(loss), float(metric), round(time.perf_counter() - self.start, 3))
        self.rows.append(row)
        if self.path is not None:
            with open(self.path, "a", newline="") as fh:
                csv.writer(fh).writerow(row)


def _map(fn, items, workers):
    if workers <= 1:
        return [fn(it) for it in items]
    from concurrent.futures import ThreadPoolExecutor

    with ThreadPoolExecutor(workers) as pool:
        return list(pool.map(fn, items))


def evaluate_model(model, dataset, task, init_only=False):
    """Mean task metric of the model's (or Init's) predictions on ``dataset``."""
    preds = []
    for x, _ in dataset:
        if init_only:
            preds.append(model.init_iterate(x)[0])
        else:
            preds.append(model.predict(x, store_grads=False).final)
    return task.score(preds, [t for _, t in dataset], [x for x, _ in dataset])


def train(model, train_set, dev_set, task, cfg, lc, metrics=None, on_epoch=None, on_update=None):
    """Pretrain Init, train with local terms clamped, then train jointly.

    Returns the parameters that scored best on ``dev_set`` (ties keep the
    earlier snapshot).  Adam updates use ``cfg.lr``; ICNN projection runs
    after every update when enabled, before ``on_update(model)`` is called.
    """
    cfg.validate()
    if not train_set:
        raise ConfigurationError("training set is empty")
    if not dev_set:
        raise ConfigurationError("a development split is required")
    metrics = metrics or MetricsLog()
    rng = np.random.default_rng(cfg.seed)
    params = model.params
    opt = Adam(params, cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps)
    result = TrainResult(model)
    phases = [
        ("pretrain", cfg.pretrain_epochs if model.trainable("pretrain") else 0),
        ("clamped", cfg.clamp_epochs),
        ("joint", cfg.epochs),
    ]
    spen_phases = any(n for name, n in phases if name != "pretrain")
    best_snapshot = None
    epoch = 0
    for phase, n_epochs in phases:
        names = model.trainable(phase)
        init_only = phase == "pretrain"
        if init_only and spen_phases:
            tracking = False
        else:
            tracking = True
        for _ in range(n_epochs):
            epoch += 1
            order = rng.permutation(len(train_set)) if cfg.shuffle else np.arange(len(train_set))
            losses = []
            for b0 in range(0, len(order), cfg.batch_size):
                batch = [train_set[i] for i in order[b0 : b0 + cfg.batch_size]]

                def work(example):
                    x, target = example
                    if init_only:
                        return pretrain_loss_and_grads(model, x, target, lc)
                    res = backprop_unroll(model, x, target, lc, checkpoint=cfg.checkpoint)
                    return res.loss, res.grads

                try:
                    outs = _map(work, batch, cfg.workers)
                except NumericError as exc:
                    raise TrainingError(f"epoch {epoch}, batch {b0 // cfg.batch_size}: {exc}") from None
                params.zero_grad()
                for value, grads in outs:
                    if not np.isfinite(value):
                        raise TrainingError(f"epoch {epoch}, batch {b0 // cfg.batch_size}: loss is NaN")
                    losses.append(value)
                    params.accumulate({n: grads[n] for n in names if n in grads}, 1.0 / len(batch))
                opt.step(params, params.grads, names)
                if cfg.icnn:
                    icnn_project(params, model.energy.icnn_names)
                if on_update is not None:
                    on_update(model)
            train_loss = float(np.mean(losses))
            metrics.append(epoch, f"train-{phase}", train_loss, np.nan)
            try:
                score = evaluate_model(model, dev_set, task, init_only=init_only)
            except SpenError as exc:
                raise TrainingError(f"dev evaluation failed after epoch {epoch}: {exc}") from None
            metrics.append(epoch, "dev", np.nan, score)
            result.history.append({"epoch": epoch, "phase": phase, "train_loss": train_loss, "dev": score})
            result.final_score = score
            log.info("epoch %d (%s): train loss %.6g, dev %.4f", epoch, phase, train_loss, score)
            if tracking and score > result.best_score:
                result.best_score = score
                result.best_epoch = epoch
                best_snapshot = params.snapshot()
            if on_epoch is not None:
                on_epoch(epoch, model, score)
    if best_snapshot is not None:
        params.restore(best_snapshot)
    return result


# --------------------------------------------------------------------- SSVM


def ssvm_gradient(model, x, target, margin_scale=1.0):
    """(hinge value, parameter subgradient) for one example.

    Loss-augmented inference runs the model's own unrolled minimizer on
    E(y) - Delta(y, y*).  The subgradient is exactly zero when no margin
    violation is found.
    """
    energy = model.energy
    aug = LossAugmentedEnergy(energy, target, margin_scale)
    traj = predict(aug, x, model.unroll, eta=model.step_sizes, store_grads=False)
    y_hat = traj.final
    delta = margin_scale * float(np.mean((y_hat - target) ** 2))
    at_hat = energy.evaluate(y_hat, x, wrt_params=True, need_grad=False, validate=False)
    at_gold = energy.evaluate(target, x, wrt_params=True, need_grad=False, validate=False)
    hinge = delta - at_hat.value + at_gold.value
    if hinge <= 0:
        return 0.0, {n: np.zeros_like(v) for n, v in energy.params.values.items()}
    return hinge, {n: at_gold.param_grads[n] - at_hat.param_grads[n] for n in at_gold.param_grads}


def ssvm_train(model, train_set, dev_set, task, cfg, metrics=None, on_update=None):
    """Structured-SVM baseline: subgradient steps (with Adam) on the margin hinge."""
    cfg.validate()
    if not train_set or not dev_set:
        raise ConfigurationError("ssvm_train needs non-empty train and dev splits")
    metrics = metrics or MetricsLog()
    rng = np.random.default_rng(cfg.seed)
    params = model.params
    names = [n for n in model.trainable("joint") if n != ETA_PARAM]
    opt = Adam(params, cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps)
    result = TrainResult(model)
    best_snapshot = None
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(len(train_set)) if cfg.shuffle else np.arange(len(train_set))
        hinges = []
        for b0 in range(0, len(order), cfg.batch_size):
            batch = [train_set[i] for i in order[b0 : b0 + cfg.batch_size]]
            try:
                outs = _map(lambda ex: ssvm_gradient(model, ex[0], ex[1], cfg.margin_scale), batch, cfg.workers)
            except NumericError as exc:
                raise TrainingError(f"epoch {epoch}, batch {b0 // cfg.batch_size}: {exc}") from None
            params.zero_grad()
            for hinge, grads in outs:
                hinges.append(hinge)
                params.accumulate({n: grads[n] for n in names}, 1.0 / len(batch))
            if any(h > 0 for h, _ in outs):
                opt.step(params, params.grads, names)
                if cfg.icnn:
                    icnn_project(params, model.energy.icnn_names)
                if on_update is not None:
                    on_update(model)
        train_loss = float(np.mean(hinges))
        metrics.append(epoch, "train-ssvm", train_loss, np.nan)
        score = evaluate_model(model, dev_set, task)
        metrics.append(epoch, "dev", np.nan, score)
        result.history.append({"epoch": epoch, "phase": "ssvm", "train_loss": train_loss, "dev": score})
        result.final_score = score
        if score > result.best_score:
            result.best_score, result.best_epoch = score, epoch
            best_snapshot = params.snapshot()
    if best_snapshot is not None:
        params.restore(best_snapshot)
    return result
