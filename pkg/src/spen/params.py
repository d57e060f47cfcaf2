"""Named parameter tensors with parallel gradient accumulators."""
from __future__ import annotations

import numpy as np

from . import serialization
from .errors import ConfigurationError, DimensionError


class ParamSet:
    def __init__(self, values=None):
        self.values = {}
        self.grads = {}
        for name, value in (values or {}).items():
            self.add(name, value)

    def add(self, name, value):
        if name in self.values:
            raise ConfigurationError(f"duplicate parameter {name!r}")
        value = np.array(value, dtype=np.float64)
        self.values[name] = value
        self.grads[name] = np.zeros_like(value)
        return value

    def __getitem__(self, name):
        return self.values[name]

    def __setitem__(self, name, value):
        value = np.asarray(value, dtype=np.float64)
        if value.shape != self.values[name].shape:
            raise DimensionError(
                f"parameter {name!r}: shape {value.shape} != {self.values[name].shape}"
            )
        self.values[name] = value.copy()

    def __contains__(self, name):
        return name in self.values

    def __iter__(self):
        return iter(self.values)

    def __len__(self):
        return len(self.values)

    def names(self, prefix=""):
        return [n for n in self.values if n.startswith(prefix)]

    def size(self):
        return sum(v.size for v in self.values.values())

    def zero_grad(self):
        for g in self.grads.values():
            g.fill(0.0)

    def accumulate(self, grads, scale=1.0):
        for name, g in grads.items():
            if g.shape != self.grads[name].shape:
                raise DimensionError(f"gradient for {name!r} has shape {g.shape}")
            self.grads[name] += scale * g

    def snapshot(self):
        return {n: v.copy() for n, v in self.values.items()}

    def restore(self, snap):
        for name, value in snap.items():
            self[name] = value

    def copy(self):
        return ParamSet(self.snapshot())

    def flat(self, names=None):
        names = list(self.values) if names is None else names
        return np.concatenate([self.values[n].ravel() for n in names]) if names else np.zeros(0)

    def set_flat(self, vec, names=None):
        names = list(self.values) if names is None else names
        pos = 0
        for n in names:
            size = self.values[n].size
            self.values[n] = np.array(vec[pos : pos + size]).reshape(self.values[n].shape)
            pos += size

    def save(self, path):
        serialization.save(path, self.values)

    def load(self, path):
        for name, value in serialization.load(path).items():
            if name not in self.values:
                raise ConfigurationError(f"checkpoint has unknown parameter {name!r}")
            self[name] = value


def icnn_project(params, constrained):
    """Clamp the named parameter tensors elementwise to be non-negative (in place)."""
    for name in constrained:
        if name not in params:
            raise ConfigurationError(f"icnn_project: unknown parameter {name!r}")
    for name in constrained:
        np.maximum(params.values[name], 0.0, out=params.values[name])
    return params


def glorot_uniform(rng, shape, fan_in, fan_out):
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape)
