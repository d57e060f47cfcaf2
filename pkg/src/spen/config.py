"""Experiment configuration: an INI-like ``key = value`` file with ``[section]`` headers.

Unknown sections or keys, malformed values and out-of-range numbers are
errors that name the key and line.  A ``preset`` key in ``[experiment]``
loads one of the named denoising configurations first; explicit keys
anywhere in the file override it.
"""
from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigurationError

TASKS = ("denoise", "tagging")
ENERGIES = ("foe", "deep-prior", "toy-global")
RULES = ("gd", "momentum", "emd", "logit", "clip")


@dataclass
class ExperimentSection:
    task: str = "denoise"
    energy: str = "foe"
    preset: str = "none"
    seed: int = 0
    workers: int = 1
    out_dir: str = "runs/default"
    data_dir: str = ""


@dataclass
class ModelSection:
    filters: int = 32
    kernel: int = 7
    channels: int = 32
    softabs_temperature: float = 25.0
    softplus_temperature: float = 1.0
    sigma2_init: float = -1.0  # -1: energy-specific default
    init: str = "identity"
    hidden: int = 50
    local_hidden: int = 32
    entropy: float = -1.0  # -1: task-specific default
    use_global: bool = True


@dataclass
class UnrollSection:
    rule: str = "momentum"
    T: int = 20
    eta_init: float = 0.1
    momentum: float = 0.75
    tol: float = 1e-5
    train_eta: bool = False


@dataclass
class LossSection:
    weights: str = "avg-weighted"


@dataclass
class TrainerSection:
    pretrain_epochs: int = 2
    clamp_epochs: int = 2
    epochs: int = 10
    lr: float = 1e-3
    batch_size: int = 1
    icnn: bool = False
    ssvm: bool = False
    margin_scale: float = 1.0
    checkpoint: bool = True


@dataclass
class DataSection:
    n_train: int = 200
    n_dev: int = 30
    n_test: int = 100
    height: int = 32
    width: int = 32
    noise: float = 0.1
    heads: int = 3
    items: int = 6
    labels: int = 5
    feature_dim: int = 16
    score_noise: float = 0.5


SECTIONS = {
    "experiment": ExperimentSection,
    "model": ModelSection,
    "unroll": UnrollSection,
    "loss": LossSection,
    "trainer": TrainerSection,
    "data": DataSection,
}

_base = {
    "experiment": {"task": "denoise"},
    "unroll": {"rule": "momentum", "momentum": 0.25, "train_eta": True},
    "loss": {"weights": "avg-weighted"},
    "trainer": {"ssvm": False, "pretrain_epochs": 2, "clamp_epochs": 2, "epochs": 6, "lr": 1e-3},
}


def _preset(energy, T, **over):
    out = {k: dict(v) for k, v in _base.items()}
    out["experiment"]["energy"] = energy
    if energy == "deep-prior":
        out["model"] = {"softplus_temperature": 25.0}
    out["unroll"]["T"] = T
    for key, value in over.items():
        section, _, name = key.partition("__")
        out.setdefault(section, {})[name] = value
    return out


PRESETS = {
    "FOE-20": _preset("foe", 20, unroll__momentum=0.75, unroll__train_eta=False,
                      loss__weights="final-only"),
    "FOE-20+": _preset("foe", 20),
    "FOE-3": _preset("foe", 3),
    "DP-20": _preset("deep-prior", 20),
    "DP-3": _preset("deep-prior", 3),
    # SSVM has no phases: the same 8 epochs the end-to-end presets spend after pretraining
    "FOE-SSVM": _preset("foe", 3, trainer__ssvm=True, unroll__train_eta=False,
                        trainer__clamp_epochs=0, trainer__epochs=8),
    "DP-SSVM": _preset("deep-prior", 3, trainer__ssvm=True, unroll__train_eta=False,
                       trainer__clamp_epochs=0, trainer__epochs=8),
}


@dataclass
class ExperimentConfig:
    experiment: ExperimentSection = field(default_factory=ExperimentSection)
    model: ModelSection = field(default_factory=ModelSection)
    unroll: UnrollSection = field(default_factory=UnrollSection)
    loss: LossSection = field(default_factory=LossSection)
    trainer: TrainerSection = field(default_factory=TrainerSection)
    data: DataSection = field(default_factory=DataSection)

    def section(self, name):
        return getattr(self, name)

    def resolved_entropy(self):
        if self.model.entropy >= 0:
            return self.model.entropy
        return 0.1 if self.experiment.task == "tagging" else 0.0

    def resolved_sigma2(self):
        if self.model.sigma2_init > 0:
            return self.model.sigma2_init
        # the deep prior average-pools, so its per-pixel gradient is ~1/(h w) of a summed prior's
        return 50.0 if self.experiment.energy == "deep-prior" else 0.05

    def validate(self):
        exp, unroll = self.experiment, self.unroll
        _choice("experiment", "task", exp.task, TASKS)
        _choice("experiment", "energy", exp.energy, ENERGIES)
        _choice("unroll", "rule", unroll.rule, RULES)
        _choice("loss", "weights", self.loss.weights, ("avg-weighted", "final-only"))
        _choice("model", "init", self.model.init, ("identity", "convnet"))
        if exp.preset != "none" and exp.preset not in PRESETS:
            raise ConfigurationError(f"experiment.preset: unknown preset {exp.preset!r}")
        if exp.task == "tagging" and exp.energy != "toy-global":
            raise ConfigurationError("experiment.energy: tagging needs energy = toy-global")
        if exp.task == "denoise" and exp.energy == "toy-global":
            raise ConfigurationError("experiment.energy: toy-global needs task = tagging")
        if exp.task == "denoise" and unroll.rule in ("emd", "logit"):
            raise ConfigurationError(
                f"unroll.rule: {unroll.rule!r} needs a simplex task, but denoise outputs a box"
            )
        if exp.task == "tagging" and unroll.rule not in ("emd", "logit"):
            raise ConfigurationError(f"unroll.rule: {unroll.rule!r} cannot keep tagging outputs on the simplex")
        positive_ints = [
            ("experiment", "workers"), ("model", "filters"), ("model", "kernel"),
            ("model", "channels"), ("model", "hidden"), ("model", "local_hidden"),
            ("unroll", "T"), ("trainer", "batch_size"), ("data", "n_train"), ("data", "n_dev"),
            ("data", "height"), ("data", "width"), ("data", "heads"), ("data", "items"),
            ("data", "feature_dim"),
        ]
        for sec, key in positive_ints:
            if getattr(self.section(sec), key) < 1:
                raise ConfigurationError(f"{sec}.{key}: must be >= 1")
        for sec, key in [("trainer", "pretrain_epochs"), ("trainer", "clamp_epochs"),
                         ("trainer", "epochs"), ("data", "n_test")]:
            if getattr(self.section(sec), key) < 0:
                raise ConfigurationError(f"{sec}.{key}: must be >= 0")
        for sec, key in [("model", "softabs_temperature"), ("model", "softplus_temperature"),
                         ("unroll", "eta_init"), ("unroll", "tol"), ("trainer", "lr"),
                         ("data", "noise"), ("trainer", "margin_scale")]:
            if not getattr(self.section(sec), key) > 0:
                raise ConfigurationError(f"{sec}.{key}: must be positive")
        if self.model.kernel % 2 == 0:
            raise ConfigurationError("model.kernel: must be odd")
        if not 0.0 <= unroll.momentum < 1.0:
            raise ConfigurationError("unroll.momentum: must lie in [0, 1)")
        if self.data.labels < 2:
            raise ConfigurationError("data.labels: must be >= 2 (label 0 is null)")
        if self.data.score_noise < 0:
            raise ConfigurationError("data.score_noise: must be >= 0")
        return self

    def dumps(self):
        lines = []
        for name in SECTIONS:
            lines.append(f"[{name}]")
            for f in dataclasses.fields(self.section(name)):
                lines.append(f"{f.name} = {_format(getattr(self.section(name), f.name))}")
            lines.append("")
        return "\n".join(lines)

    def digest(self):
        return hashlib.sha256(self.dumps().encode()).hexdigest()[:16]


def _choice(section, key, value, options):
    if value not in options:
        raise ConfigurationError(f"{section}.{key}: {value!r} is not one of {', '.join(options)}")


def _format(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _convert(kind, raw, where):
    if kind is bool:
        low = raw.lower()
        if low in ("true", "yes", "on", "1"):
            return True
        if low in ("false", "no", "off", "0"):
            return False
        raise ConfigurationError(f"{where}: expected a boolean, got {raw!r}")
    try:
        return kind(raw)
    except ValueError:
        raise ConfigurationError(f"{where}: expected {kind.__name__}, got {raw!r}") from None


def _types(section_cls):
    hints = {"int": int, "float": float, "str": str, "bool": bool}
    return {f.name: hints[f.type] for f in dataclasses.fields(section_cls)}


def parse_config(text, source="<config>"):
    """Parse and validate configuration text; defaults fill every missing key."""
    entries = []
    section = None
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        where = f"{source}:{lineno}"
        if stripped.startswith("["):
            if not stripped.endswith("]"):
                raise ConfigurationError(f"{where}: malformed section header {stripped!r}")
            section = stripped[1:-1].strip()
            if section not in SECTIONS:
                raise ConfigurationError(f"{where}: unknown section [{section}]")
            continue
        if "=" not in stripped:
            raise ConfigurationError(f"{where}: expected 'key = value', got {stripped!r}")
        if section is None:
            raise ConfigurationError(f"{where}: key outside of any [section]")
        key, _, raw = stripped.partition("=")
        key, raw = key.strip(), raw.strip()
        types = _types(SECTIONS[section])
        if key not in types:
            raise ConfigurationError(f"{where}: unknown key {section}.{key}")
        entries.append((section, key, _convert(types[key], raw, f"{where}: {section}.{key}"), where))

    cfg = ExperimentConfig()
    preset = [value for sec, key, value, _ in entries if (sec, key) == ("experiment", "preset")]
    if preset and preset[-1] != "none":
        if preset[-1] not in PRESETS:
            raise ConfigurationError(f"unknown preset {preset[-1]!r}; choose from {', '.join(PRESETS)}")
        for sec, values in PRESETS[preset[-1]].items():
            for key, value in values.items():
                setattr(cfg.section(sec), key, value)
    for sec, key, value, where in entries:
        setattr(cfg.section(sec), key, value)
    try:
        return cfg.validate()
    except ConfigurationError as exc:
        # point at the offending line when the message names a key we saw
        for sec, key, _, where in reversed(entries):
            if str(exc).startswith(f"{sec}.{key}:"):
                raise ConfigurationError(f"{where}: {exc}") from None
        raise


def load_config(path):
    path = Path(path)
    return parse_config(path.read_text(encoding="utf-8"), str(path))


def preset_config(name, **overrides):
    """A validated config for a named preset; ``overrides`` use ``section__key`` names."""
    lines = ["[experiment]", f"preset = {name}"]
    cfg = parse_config("\n".join(lines))
    for key, value in overrides.items():
        sec, _, name_ = key.partition("__")
        setattr(cfg.section(sec), name_, value)
    return cfg.validate()
