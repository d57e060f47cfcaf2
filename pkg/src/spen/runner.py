"""Glue between an :class:`ExperimentConfig` and the library: models, data, runs."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import serialization
from .autodiff import fd_gradient, relative_error
from .config import ExperimentConfig
from .energies import ConvInit, DeepPrior, DenoisingEnergy, FoePrior, TaggingEnergy
from .errors import ConfigurationError
from .minimizer import SPEN, UnrollConfig
from .tasks import (
    DenoiseTask,
    TaggingTask,
    gen_denoise,
    gen_tagging,
    load_denoise_split,
    load_tag_split,
    read_manifest,
    save_denoise_split,
    save_tag_split,
    write_manifest,
)
from .trainer import (
    HvpConfig,
    LossConfig,
    MetricsLog,
    TrainerConfig,
    backprop_unroll,
    hvp,
    ssvm_train,
    train,
    unroll_loss,
)

log = logging.getLogger(__name__)

SPLITS = ("train", "dev", "test")
TRAIN_OUTPUTS = ("config.ini", "metrics.csv", "model.spnt", "model.manifest")


def unroll_config(cfg):
    u = cfg.unroll
    return UnrollConfig(T=u.T, rule=u.rule, momentum=u.momentum, tol=u.tol,
                        eta_init=u.eta_init, train_eta=u.train_eta)


def loss_config(cfg):
    kind = "log-loss" if cfg.experiment.task == "tagging" else "squared-error"
    return LossConfig(kind=kind, weights=cfg.loss.weights)


def trainer_config(cfg):
    t = cfg.trainer
    return TrainerConfig(
        pretrain_epochs=t.pretrain_epochs, clamp_epochs=t.clamp_epochs, epochs=t.epochs,
        lr=t.lr, batch_size=t.batch_size, icnn=t.icnn, checkpoint=t.checkpoint,
        seed=cfg.experiment.seed, workers=cfg.experiment.workers, ssvm=t.ssvm,
        margin_scale=t.margin_scale,
    )


def build_energy(cfg, rng=None):
    rng = np.random.default_rng(cfg.experiment.seed) if rng is None else rng
    m = cfg.model
    if cfg.experiment.energy == "foe":
        prior = FoePrior(m.filters, m.kernel, m.softabs_temperature)
    elif cfg.experiment.energy == "deep-prior":
        prior = DeepPrior(m.channels, m.kernel, m.softplus_temperature)
    else:
        d = cfg.data
        return TaggingEnergy(d.feature_dim, d.feature_dim, d.feature_dim, d.labels,
                             hidden=m.hidden, local_hidden=m.local_hidden,
                             entropy_weight=cfg.resolved_entropy(), use_global=m.use_global, rng=rng)
    init = ConvInit() if m.init == "convnet" else None
    return DenoisingEnergy(prior, sigma2=cfg.resolved_sigma2(), init=init, rng=rng)


def build_model(cfg):
    return SPEN(build_energy(cfg), unroll_config(cfg))


def task_for(cfg):
    return TaggingTask() if cfg.experiment.task == "tagging" else DenoiseTask()


@dataclass
class Data:
    train: list
    dev: list
    test: list

    def split(self, name):
        return getattr(self, name)


def generate_data(cfg):
    d, seed = cfg.data, cfg.experiment.seed
    total = d.n_train + d.n_dev + d.n_test
    if cfg.experiment.task == "tagging":
        _, examples = gen_tagging(d.heads, d.items, d.labels, d.feature_dim, total, seed, d.score_noise)
    else:
        examples = gen_denoise(total, d.height, d.width, d.noise, seed)
    a, b = d.n_train, d.n_train + d.n_dev
    return Data(examples[:a], examples[a:b], examples[b:])


def save_data(cfg, data, directory):
    directory = Path(directory)
    saver = save_tag_split if cfg.experiment.task == "tagging" else save_denoise_split
    written = []
    for split in SPLITS:
        saver(directory, split, data.split(split), seed=cfg.experiment.seed)
        written += [directory / f"{split}.spnt", directory / f"{split}.manifest"]
    return written


def load_data(cfg, directory):
    directory = Path(directory)
    loader = load_tag_split if cfg.experiment.task == "tagging" else load_denoise_split
    out = {}
    for split in SPLITS:
        meta = read_manifest(directory / f"{split}.manifest")
        if meta.get("task") != cfg.experiment.task:
            raise ConfigurationError(f"dataset in {directory} is for task {meta.get('task')!r}")
        out[split] = loader(directory, split)
    return Data(**out)


def get_data(cfg):
    if cfg.experiment.data_dir:
        return load_data(cfg, cfg.experiment.data_dir)
    return generate_data(cfg)


def pairs(examples):
    return [e.pair() for e in examples]


# --------------------------------------------------------------- checkpoints


def save_checkpoint(model, path, cfg, epoch, score):
    path = Path(path)
    model.params.save(path)
    manifest = path.with_suffix(".manifest")
    write_manifest(manifest, {"config_hash": cfg.digest(), "epoch": epoch, "dev_score": repr(float(score))})
    return [path, manifest]


def load_checkpoint(cfg, path):
    model = build_model(cfg)
    model.params.load(path)
    return model


# ---------------------------------------------------------------------- runs


def fit(cfg, data, metrics=None, on_update=None):
    """Build and train the model ``cfg`` describes; returns (model, TrainResult)."""
    model = build_model(cfg)
    task, tcfg = task_for(cfg), trainer_config(cfg)
    train_set, dev_set = pairs(data.train), pairs(data.dev)
    if tcfg.ssvm:
        result = ssvm_train(model, train_set, dev_set, task, tcfg, metrics, on_update=on_update)
    else:
        result = train(model, train_set, dev_set, task, tcfg, loss_config(cfg), metrics, on_update=on_update)
    return model, result


def run_train(cfg, out_dir, data=None):
    """Train per ``cfg``; returns (result, written paths)."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    data = data or get_data(cfg)
    written = []
    (out_dir / "config.ini").write_text(cfg.dumps())
    written.append(out_dir / "config.ini")
    metrics_path = out_dir / "metrics.csv"
    written.append(metrics_path)
    model, result = fit(cfg, data, MetricsLog(metrics_path))
    written += save_checkpoint(model, out_dir / "model.spnt", cfg, result.best_epoch, result.best_score)
    return result, written


def predict_split(model, examples, dump_dir=None):
    preds = []
    written = []
    for i, example in enumerate(examples):
        x, _ = example.pair()
        traj = model.predict(x)
        preds.append(traj.final)
        if dump_dir is not None:
            sub = Path(dump_dir) / f"example_{i:04d}"
            sub.mkdir(parents=True, exist_ok=True)
            for t, (y, u) in enumerate(zip(traj.ys, traj.us)):
                tensors = {"y": y}
                if traj.rule == "logit":
                    tensors["logits"] = u
                if traj.rule in ("momentum", "logit"):
                    tensors["h"] = traj.hs[t]
                tensors["energy"] = np.array(traj.energies[t])
                tensors["T0"] = np.array(float(traj.T0))
                path = sub / f"iter_{t:03d}.spnt"
                serialization.save(path, tensors)
                written.append(path)
    return preds, written


def score_predictions(cfg, preds, examples):
    """Printable metrics: PSNR for denoising, accuracy and violation rate for tagging."""
    golds = [e.pair()[1] for e in examples]
    if cfg.experiment.task == "tagging":
        acc, viol = TaggingTask().metrics(preds, golds)
        return {"accuracy": acc, "count_violation": viol}
    return {"psnr": DenoiseTask().score(preds, golds)}


# ----------------------------------------------------------------- gradcheck


def tiny_config(cfg):
    """A shrunken copy of ``cfg`` for finite-difference checks."""
    tiny = ExperimentConfig()
    tiny.experiment = cfg.experiment
    tiny.unroll = cfg.unroll
    tiny.loss = cfg.loss
    tiny.trainer = cfg.trainer
    m = tiny.model
    m.filters, m.kernel, m.channels = 2, 3, 2
    m.hidden, m.local_hidden = 5, 4
    m.softabs_temperature = cfg.model.softabs_temperature
    m.softplus_temperature = cfg.model.softplus_temperature
    m.sigma2_init = 0.5
    m.entropy = cfg.model.entropy
    m.init = cfg.model.init
    d = tiny.data
    d.height = d.width = 4
    d.heads, d.items, d.labels, d.feature_dim = 2, 3, 4, 3
    d.n_train, d.n_dev, d.n_test = 1, 1, 0
    tiny.unroll = type(cfg.unroll)(**vars(cfg.unroll))
    tiny.unroll.T = min(cfg.unroll.T, 3)
    tiny.unroll.tol = 1e-12
    return tiny.validate()


def gradcheck(cfg, step=1e-5):
    """Worst relative errors of the energy, HVP and unrolled parameter gradients."""
    tiny = tiny_config(cfg)
    model = build_model(tiny)
    example = generate_data(tiny).train[0]
    x, target = example.pair()
    energy = model.energy
    logits = tiny.unroll.rule == "logit"
    traj = model.predict(x)
    y = traj.us[1]
    an = energy.evaluate(y, x, logits=logits, validate=False).grad
    fd = fd_gradient(lambda v: energy.evaluate(v, x, logits=logits, validate=False, need_grad=False).value, y, step)
    report = {"energy_grad": relative_error(an, fd)}

    rng = np.random.default_rng(0)
    v = rng.standard_normal(y.shape)
    hv = hvp(energy, y, v, x, HvpConfig(), logits=logits)
    hess_v = fd_gradient(
        lambda z: float(np.sum(energy.evaluate(z, x, logits=logits, validate=False).grad * v)), y, step
    )
    report["hvp"] = relative_error(hv, hess_v)

    lc = loss_config(tiny)
    res = backprop_unroll(model, x, target, lc)
    names = list(model.params)
    base = model.params.flat(names)

    def total(vec):
        model.params.set_flat(vec, names)
        return unroll_loss(model.predict(x, store_grads=False), target, lc)

    fd_params = fd_gradient(total, base, step)
    model.params.set_flat(base, names)
    analytic = np.concatenate([res.grads[n].ravel() for n in names])
    report["unrolled_params"] = relative_error(analytic, fd_params)
    return report


GRADCHECK_TOLERANCES = {"energy_grad": 1e-4, "hvp": 1e-3, "unrolled_params": 1e-3}
