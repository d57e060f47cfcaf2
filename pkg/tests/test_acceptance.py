"""Acceptance criteria, one test each; every test records a PASS/FAIL line.

Run alone with ``pytest tests/test_acceptance.py -s`` to see the lines as they
are produced; the terminal summary repeats them either way.
"""
import functools
import time

import numpy as np
import pytest

from helpers import one_hot_target, record, tag_input
from spen import runner
from spen.autodiff import fd_gradient, relative_error, softmax_array
from spen.config import parse_config, preset_config
from spen.energies import (
    DeepPrior,
    DenoisingEnergy,
    FoePrior,
    TaggingEnergy,
    ToyGlobalEnergy,
    deep_prior_energy,
    foe_energy,
    toy_global_terms,
)
from spen.minimizer import SPEN, UnrollConfig
from spen.tasks import DenoiseTask, TaggingTask
from spen.trainer import LossConfig, TrainerConfig, backprop_unroll, evaluate_model, hvp, train, unroll_loss


def worst(errors):
    return max(errors.values())


# ---------------------------------------------------------------- criterion 1


def test_c1_energy_gradients():
    start = time.perf_counter()
    rng = np.random.default_rng(1)
    errors = {}

    def check(name, f, g, y):
        errors[name] = max(errors.get(name, 0.0), relative_error(g, fd_gradient(f, y)))

    for size in (4, 8):
        y = rng.uniform(0, 1, (1, size, size))
        x = rng.uniform(0, 1, (1, size, size))
        for label, prior in (("FOE", FoePrior(4, 3)), ("DeepPrior", DeepPrior(3, 3))):
            params = prior.init_params(rng)
            e = DenoisingEnergy(prior, sigma2=0.3, rng=rng)
            for n, v in params.items():
                e.params[n] = v
            raw = foe_energy if label == "FOE" else deep_prior_energy
            # E = |y - x|^2 + 2 s2 prior(y), so the prior gradient is recovered exactly
            prior_grad = (e.evaluate(y, x).grad - 2 * (y - x)) / (2 * e.sigma2)
            check(label, lambda v: raw(prior, params, v), prior_grad, y)
            check("DenoisingEnergy", lambda v: e.value(v, x), e.evaluate(y, x).grad, y)

    x = tag_input(rng)
    glob = ToyGlobalEnergy(4, 4, 4, 4, hidden=6)
    gparams = glob.init_params(rng)
    tag = TaggingEnergy(4, 4, 4, 4, hidden=6, local_hidden=5, rng=rng, entropy_weight=0.0)
    for n, v in gparams.items():
        tag.params[n] = v
    only_global = TaggingEnergy(4, 4, 4, 4, hidden=6, local_hidden=5, rng=rng, entropy_weight=0.0)
    for n, v in gparams.items():
        only_global.params[n] = v
    for n in only_global.local_names:
        only_global.params[n] = np.zeros_like(only_global.params[n])
    for _ in range(3):
        y = softmax_array(rng.standard_normal((2, 3, 4)))
        # local scores zeroed: the energy is the five global terms alone
        assert abs(only_global.value(y, x) - sum(toy_global_terms(glob, gparams, y, x))) < 1e-12
        check("ToyGlobal", lambda v: only_global.evaluate(v, x, validate=False, need_grad=False).value,
              only_global.evaluate(y, x).grad, y)
        check("Tagging", lambda v: tag.evaluate(v, x, validate=False, need_grad=False).value, tag.evaluate(y, x).grad, y)
    seconds = time.perf_counter() - start
    ok = worst(errors) < 1e-4 and seconds < 60
    detail = ", ".join(f"{k} {v:.1e}" for k, v in errors.items())
    record(1, ok, f"worst rel. err {worst(errors):.2e} (< 1e-4) in {seconds:.1f}s [{detail}]")
    assert ok


# ---------------------------------------------------------------- criterion 2


def _param_fd(model, x, target, lc):
    names = list(model.params)
    base = model.params.flat(names)

    def total(vec):
        model.params.set_flat(vec, names)
        return unroll_loss(model.predict(x, store_grads=False), target, lc)

    try:
        return fd_gradient(total, base)
    finally:
        model.params.set_flat(base, names)


def _tiny_model(rule, rng):
    unroll = UnrollConfig(T=3, rule=rule, momentum=0.5, eta_init=0.2, tol=1e-12, train_eta=True)
    if rule in ("logit", "emd"):
        energy = TaggingEnergy(4, 4, 4, 4, hidden=6, local_hidden=5, rng=rng)
        return SPEN(energy, unroll), tag_input(rng), one_hot_target(rng), LossConfig(kind="log-loss")
    clean = rng.uniform(0.2, 0.8, (1, 4, 4))
    x = np.clip(clean + 0.1 * rng.standard_normal(clean.shape), 0, 1)
    return SPEN(DenoisingEnergy(FoePrior(2, 3), sigma2=0.5, rng=rng), unroll), x, clean, LossConfig()


def test_c2_unrolled_master_check():
    start = time.perf_counter()
    errors = {}
    for rule in ("gd", "momentum", "logit", "emd"):
        rng = np.random.default_rng(2)
        model, x, target, lc = _tiny_model(rule, rng)
        res = backprop_unroll(model, x, target, lc)
        analytic = np.concatenate([res.grads[n].ravel() for n in model.params])
        errors[rule] = relative_error(analytic, _param_fd(model, x, target, lc))
    seconds = time.perf_counter() - start
    ok = worst(errors) < 1e-3 and seconds < 300
    detail = ", ".join(f"{k} {v:.1e}" for k, v in errors.items())
    record(2, ok, f"worst rel. err {worst(errors):.2e} (< 1e-3) in {seconds:.1f}s [{detail}]")
    assert ok


# ---------------------------------------------------------------- criterion 3


def test_c3_hvp_against_hessian():
    rng = np.random.default_rng(3)
    e = DenoisingEnergy(FoePrior(2, 3), sigma2=0.5, rng=rng)
    x, y = rng.uniform(0, 1, (2, 1, 4, 4))
    v = rng.standard_normal(y.shape)
    n, h = y.size, 1e-4
    flat = y.ravel()
    f = lambda z: e.value(z.reshape(y.shape), x)
    H = np.empty((n, n))
    for i in range(n):
        for j in range(n):
            di, dj = np.eye(n)[i] * h, np.eye(n)[j] * h
            H[i, j] = (f(flat + di + dj) - f(flat + di - dj) - f(flat - di + dj) + f(flat - di - dj)) / (4 * h * h)
    err = relative_error(hvp(e, y, v, x).ravel(), H @ v.ravel())
    ok = err < 1e-3
    record(3, ok, f"finite-difference HVP vs brute-force Hessian-vector rel. err {err:.2e} (< 1e-3)")
    assert ok


# ---------------------------------------------------------------- criterion 4


def test_c4_checkpointing_and_early_stop():
    diffs = {}
    for rule in ("gd", "momentum", "logit", "emd"):
        model, x, target, lc = _tiny_model(rule, np.random.default_rng(4))
        a = backprop_unroll(model, x, target, lc, checkpoint=True)
        b = backprop_unroll(model, x, target, lc, checkpoint=False)
        diffs[rule] = max(float(np.max(np.abs(a.grads[k] - b.grads[k]))) for k in a.grads)

    rng = np.random.default_rng(4)
    clean = rng.uniform(0.2, 0.8, (1, 4, 4))
    x = np.clip(clean + 0.1 * rng.standard_normal(clean.shape), 0, 1)

    def model(T):
        e = DenoisingEnergy(FoePrior(2, 3), sigma2=0.5, rng=np.random.default_rng(7))
        return SPEN(e, UnrollConfig(T=T, rule="momentum", momentum=0.5, eta_init=0.1, tol=3e-2, train_eta=True))

    T = 8
    long = model(T)
    T0 = long.predict(x).T0
    # the T0-step unroll carries the weight of the padded tail on its last iterate
    w = LossConfig().iterate_weights(T)
    custom = tuple(np.concatenate([w[: T0 - 1], [w[T0 - 1 :].sum()]]) * (T0 / T))
    a = backprop_unroll(long, x, clean, LossConfig())
    b = backprop_unroll(model(T0), x, clean, LossConfig(custom=custom))
    early = 0.0
    for k in a.grads:
        ga = a.grads[k]
        if ga.shape != b.grads[k].shape:  # per-step sizes: steps past T0 get no gradient
            early = max(early, float(np.max(np.abs(ga[T0:]))))
            ga = ga[:T0]
        early = max(early, float(np.max(np.abs(ga - b.grads[k]))))
    ok = max(diffs.values()) <= 1e-12 and early <= 1e-12 and 1 < T0 < T
    record(4, ok, f"checkpointed vs naive max |diff| {max(diffs.values()):.1e}; "
                  f"early stop T0={T0} of T={T} vs T0-step unroll max |diff| {early:.1e} (<= 1e-12)")
    assert ok


# ---------------------------------------------------------------- criterion 9


def test_c9_loss_weights():
    w = LossConfig().iterate_weights(5)
    ok = list(w) == [1 / 5, 1 / 4, 1 / 3, 1 / 2, 1.0]
    record(9, ok, "T=5 weights [" + ", ".join(f"{v:.6g}" for v in w) + "]")
    assert ok


# ---------------------------------------------------------------- criterion 8

TAGGING = """
[experiment]
task = tagging
energy = toy-global
[unroll]
rule = logit
T = 5
eta_init = 2.0
momentum = 0.25
train_eta = true
[trainer]
lr = 0.003
[data]
n_train = 300
n_dev = 50
n_test = 150
"""


@pytest.mark.slow
def test_c8_simplex_machinery():
    cfg = parse_config(TAGGING)
    data = runner.generate_data(cfg)
    tr, dev = runner.pairs(data.train), runner.pairs(data.dev)
    test = runner.pairs(data.test)
    task, lc = TaggingTask(), runner.loss_config(cfg)
    model = runner.build_model(cfg)
    # the local-only baseline is Init after pretraining; the SPEN then continues from it
    train(model, tr, dev, task, TrainerConfig(pretrain_epochs=10, clamp_epochs=0, epochs=0, lr=cfg.trainer.lr), lc)
    golds = [g for _, g in test]
    base_acc, base_viol = task.metrics([model.init_iterate(x)[0] for x, _ in test], golds)
    train(model, tr, dev, task, TrainerConfig(pretrain_epochs=0, clamp_epochs=5, epochs=5, lr=cfg.trainer.lr), lc)
    trajs = [model.predict(x, store_grads=False) for x, _ in test]
    acc, viol = task.metrics([t.final for t in trajs], golds)
    simplex = max(
        max(float(np.max(np.abs(y.sum(axis=-1) - 1.0))), float(max(0.0, -y.min()))) for t in trajs for y in t.ys
    )
    reduction = 1.0 - viol / base_viol if base_viol > 0 else 0.0
    ok = reduction >= 0.30 and acc >= base_acc and simplex <= 1e-9
    record(8, ok, f"count violation {base_viol:.3f} -> {viol:.3f} ({100 * reduction:.0f}% reduction, >= 30%), "
                  f"accuracy {base_acc:.3f} -> {acc:.3f}, worst simplex residual {simplex:.1e} (<= 1e-9)")
    assert ok


# ------------------------------------------------- trained denoisers (5, 6, 7, 10)


@functools.lru_cache(maxsize=None)
def denoise_data():
    # every denoising preset shares the data defaults: 32x32, sigma 0.1, 200/30/100, seed 0
    return runner.generate_data(preset_config("FOE-3"))


@functools.lru_cache(maxsize=None)
def trained(preset, icnn=False):
    """(test PSNR, training seconds, model, worst constrained weight seen after any update)."""
    cfg = preset_config(preset, trainer__icnn=icnn)
    data = denoise_data()
    lowest = [np.inf]

    def watch(model):
        if icnn:
            lowest[0] = min(lowest[0], min(float(model.params[n].min()) for n in model.energy.icnn_names))

    start = time.perf_counter()
    model, _ = runner.fit(cfg, data, on_update=watch)
    seconds = time.perf_counter() - start
    score = evaluate_model(model, runner.pairs(data.test), DenoiseTask())
    return score, seconds, model, lowest[0]


def noisy_psnr():
    test = runner.pairs(denoise_data().test)
    return DenoiseTask().score([x for x, _ in test], [y for _, y in test])


@pytest.mark.slow
def test_c5_desk_scale_denoising():
    noisy = noisy_psnr()
    foe, foe_s, _, _ = trained("FOE-3")
    dp, dp_s, _, _ = trained("DP-3")
    ok = foe >= noisy + 3.0 and dp >= foe and foe_s + dp_s < 1800
    record(5, ok, f"noisy {noisy:.2f} dB, FOE-3 {foe:.2f} dB (needs >= {noisy + 3:.2f}), DP-3 {dp:.2f} dB "
                  f"(needs >= FOE-3); training {foe_s + dp_s:.0f}s (< 1800s)")
    assert ok


@pytest.mark.slow
def test_c6_small_t():
    dp3, _, _, _ = trained("DP-3")
    dp20, seconds, _, _ = trained("DP-20")
    ok = dp3 >= dp20 - 0.5
    record(6, ok, f"DP-3 {dp3:.2f} dB vs DP-20 {dp20:.2f} dB (needs DP-3 >= DP-20 - 0.5; DP-20 took {seconds:.0f}s)")
    assert ok


@pytest.mark.slow
def test_c7_ssvm_comparison():
    foe, _, _, _ = trained("FOE-3")
    foe_ssvm, _, _, _ = trained("FOE-SSVM")
    dp, _, _, _ = trained("DP-3")
    dp_ssvm, _, _, _ = trained("DP-SSVM")
    ok = abs(foe_ssvm - foe) <= 1.0 and dp_ssvm < dp
    record(7, ok, f"FOE-SSVM {foe_ssvm:.2f} vs FOE-3 {foe:.2f} dB (|diff| <= 1.0); "
                  f"DP-SSVM {dp_ssvm:.2f} vs DP-3 {dp:.2f} dB (strictly below)")
    assert ok


@pytest.mark.slow
def test_c10_icnn_mode():
    icnn, _, model, lowest = trained("DP-3", icnn=True)
    dp, _, _, _ = trained("DP-3")
    prior = model.energy.prior
    params = {n: model.params[n] for n in model.params.names("prior.")}
    rng = np.random.default_rng(10)
    gap = -np.inf
    for _ in range(20):
        y1, y2 = rng.uniform(0, 1, (2, 1, 32, 32))
        t = rng.uniform(0.05, 0.95)
        mid = deep_prior_energy(prior, params, t * y1 + (1 - t) * y2)
        ends = t * deep_prior_energy(prior, params, y1) + (1 - t) * deep_prior_energy(prior, params, y2)
        gap = max(gap, mid - ends)
    ok = lowest >= 0.0 and gap <= 1e-10 and icnn < dp
    record(10, ok, f"min constrained weight over all updates {lowest:.3g} (>= 0); worst midpoint gap {gap:.2e} "
                   f"(<= 1e-10); ICNN-DP {icnn:.2f} dB vs DP-3 {dp:.2f} dB (strictly below)")
    assert ok
