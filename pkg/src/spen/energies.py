"""Energy functions E(y; F(x)) with black-box value and gradient access.

Every energy splits into local terms, a global term and (on the simplex) an
entropy smoother::

    E(y) = E_global(y) + sum_i E_local_i(y_i) + lam * sum_i y_i log y_i

Graphs are built on a fresh :class:`~spen.autodiff.Tape` per evaluation, so an
energy instance is read-only during prediction and can be shared.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, op_conv2d, op_linear, op_softmax, op_softplus, op_reduce
from .errors import ContractError, DimensionError, NumericError
from .params import ParamSet, glorot_uniform

SIMPLEX_TOL = 1e-6


@dataclass
class EnergyEval:
    value: float
    grad: np.ndarray | None = None
    param_grads: dict | None = None
    tape: Tape | None = None


def softabs(z, temperature=25.0):
    """0.5 softplus(z) + 0.5 softplus(-z) at the given temperature."""
    return 0.5 * op_softplus(z, temperature) + 0.5 * op_softplus(-z, temperature)


def mlp(x, p, prefix, temperature=1.0):
    """Two linear layers with a SoftPlus in between."""
    h = op_softplus(op_linear(x, p[prefix + ".l1.weight"], p[prefix + ".l1.bias"]), temperature)
    return op_linear(h, p[prefix + ".l2.weight"], p[prefix + ".l2.bias"])


def mlp_params(rng, prefix, n_in, n_hidden, n_out):
    return {
        prefix + ".l1.weight": glorot_uniform(rng, (n_hidden, n_in), n_in, n_hidden),
        prefix + ".l1.bias": np.zeros(n_hidden),
        prefix + ".l2.weight": glorot_uniform(rng, (n_out, n_hidden), n_hidden, n_out),
        prefix + ".l2.bias": np.zeros(n_out),
    }


def conv_params(rng, name, c_out, c_in, k, bias=True):
    fan_in, fan_out = c_in * k * k, c_out * k * k
    out = {name + ".weight": glorot_uniform(rng, (c_out, c_in, k, k), fan_in, fan_out)}
    if bias:
        out[name + ".bias"] = np.zeros(c_out)
    return out


class Energy:
    """Base class.  Subclasses implement ``local_graph``/``global_graph``/``init_graph``.

    ``space`` is ``"box"`` (values in [0, 1], optimized directly) or
    ``"simplex"`` (last axis lies on the probability simplex).
    """

    space = "box"
    entropy_weight = 0.0
    # names of parameters belonging to local terms and Init; frozen while clamped
    local_names: tuple = ()
    # names constrained non-negative in ICNN mode
    icnn_names: tuple = ()

    def __init__(self):
        self.params = ParamSet()

    # -- graph construction -------------------------------------------------

    def local_graph(self, tape, y, x, p):
        return tape.const(0.0)

    def global_graph(self, tape, y, x, p):
        return tape.const(0.0)

    def graph(self, tape, y, x, p):
        total = self.global_graph(tape, y, x, p) + self.local_graph(tape, y, x, p)
        if self.space == "simplex" and self.entropy_weight > 0:
            total = total + self.entropy_weight * op_reduce(ad.xlogx(y), "sum")
        return total

    def init_graph(self, tape, x, p):
        """y_0 for box spaces, logits whose softmax is y_0 for simplex spaces."""
        raise NotImplementedError

    def output_shape(self, x):
        raise NotImplementedError

    # -- black-box interface ------------------------------------------------

    def check_y(self, y):
        if self.space == "simplex":
            sums = y.sum(axis=-1)
            worst = float(np.max(np.abs(sums - 1.0))) if sums.size else 0.0
            if worst > SIMPLEX_TOL:
                raise ContractError(f"y is off the simplex: worst row-sum error {worst:.3g}")

    def evaluate(
        self,
        u,
        x,
        *,
        params=None,
        wrt_params=False,
        logits=False,
        validate=True,
        need_grad=True,
        keep_tape=False,
    ):
        """Evaluate the energy at ``u``.

        With ``logits=True`` the energy is E(softmax(u)) and the returned
        gradient is taken w.r.t. the logits.  ``param_grads`` is filled only
        when ``wrt_params`` is set.
        """
        values = (self.params if params is None else params).values
        tape = Tape()
        try:
            uvar = tape.var(u)
            y = op_softmax(uvar) if logits else uvar
            if validate:
                if y.value.shape != uvar.value.shape:
                    raise DimensionError("bad y shape")
                self.check_y(y.value)
            pvars = {n: tape.var(v, requires_grad=wrt_params) for n, v in values.items()}
            energy = self.graph(tape, y, x, pvars)
            value = float(energy.value)
            if not np.isfinite(value):
                raise NumericError("energy is not finite")
            result = EnergyEval(value)
            if need_grad or wrt_params:
                leaves = [uvar] + list(pvars.values()) if wrt_params else [uvar]
                grads = tape.gradient(energy, leaves)
                result.grad = grads[0]
                if not np.all(np.isfinite(result.grad)):
                    raise NumericError("energy gradient is not finite")
                if wrt_params:
                    result.param_grads = dict(zip(pvars, grads[1:]))
            if keep_tape:
                result.tape = tape
            return result
        finally:
            if not keep_tape:
                tape.close()

    def value(self, y, x, **kw):
        return self.evaluate(y, x, need_grad=False, **kw).value

    def grad_y(self, y, x, **kw):
        return self.evaluate(y, x, **kw).grad

    def init_value(self, x, params=None):
        values = (self.params if params is None else params).values
        with Tape() as tape:
            pvars = {n: tape.var(v, requires_grad=False) for n, v in values.items()}
            return np.array(self.init_graph(tape, x, pvars).value)

    def init_vjp(self, x, cotangent, params=None):
        """Parameter gradients of <cotangent, Init(F(x))>."""
        values = (self.params if params is None else params).values
        with Tape() as tape:
            pvars = {n: tape.var(v) for n, v in values.items()}
            out = self.init_graph(tape, x, pvars)
            if not out.requires_grad:
                return {n: np.zeros_like(v) for n, v in values.items()}
            grads = tape.gradient(out, list(pvars.values()), seed=cotangent)
            return dict(zip(pvars, grads))


def energy_eval(energy, y, x):
    return energy.value(y, x)


def energy_grad_y(energy, y, x):
    return energy.grad_y(y, x)


# ---------------------------------------------------------------- denoising


class ZeroPrior:
    """The prior that is identically zero; no parameters."""

    icnn_names = ()

    def init_params(self, rng):
        return {}

    def graph(self, tape, y, p):
        return tape.const(0.0)


class FoePrior:
    """Sum over K filters and all pixels of SoftAbs(filter * y)."""

    def __init__(self, n_filters=32, kernel_size=7, temperature=25.0):
        self.n_filters = n_filters
        self.kernel_size = kernel_size
        self.temperature = temperature
        self.icnn_names = ()

    def init_params(self, rng):
        k = self.kernel_size
        return {"prior.filters": conv_params(rng, "f", self.n_filters, 1, k, bias=False)["f.weight"]}

    def graph(self, tape, y, p):
        filters = p["prior.filters"]
        zero_bias = tape.const(np.zeros(filters.value.shape[0]))
        return op_reduce(softabs(op_conv2d(y, filters, zero_bias), self.temperature), "sum")


def foe_energy(prior, params, y):
    with Tape() as tape:
        pv = {n: tape.var(v, requires_grad=False) for n, v in params.items()}
        return float(prior.graph(tape, tape.var(y), pv).value)


class DeepPrior:
    """conv k x k x C, SoftPlus, conv k x k x C, SoftPlus, conv 1x1x1, average pool."""

    def __init__(self, channels=32, kernel_size=7, temperature=1.0):
        self.channels = channels
        self.kernel_size = kernel_size
        self.temperature = temperature
        self.icnn_names = ("prior.conv1.weight", "prior.conv2.weight", "prior.conv3.weight")

    def init_params(self, rng):
        c, k = self.channels, self.kernel_size
        out = {}
        for name, shape in (("conv1", (c, 1, k)), ("conv2", (c, c, k)), ("conv3", (1, c, 1))):
            out.update(conv_params(rng, "prior." + name, *shape))
        return out

    def graph(self, tape, y, p):
        k = self.kernel_size
        if y.value.shape[-1] < k or y.value.shape[-2] < k:
            raise DimensionError(f"image {y.value.shape[-2:]} smaller than {k}x{k} kernel")
        h = op_softplus(op_conv2d(y, p["prior.conv1.weight"], p["prior.conv1.bias"]), self.temperature)
        h = op_softplus(op_conv2d(h, p["prior.conv2.weight"], p["prior.conv2.bias"]), self.temperature)
        h = op_conv2d(h, p["prior.conv3.weight"], p["prior.conv3.bias"])
        return op_reduce(op_reduce(h, "spatial-average-pool"), "sum")


def deep_prior_energy(prior, params, y):
    with Tape() as tape:
        pv = {n: tape.var(v, requires_grad=False) for n, v in params.items()}
        return float(prior.graph(tape, tape.var(y), pv).value)


class ConvInit:
    """Feed-forward denoiser x + net(x): the DeepPrior stack without pooling."""

    def __init__(self, channels=16, kernel_size=5):
        self.channels = channels
        self.kernel_size = kernel_size

    def init_params(self, rng):
        c, k = self.channels, self.kernel_size
        out = {}
        out.update(conv_params(rng, "init.conv1", c, 1, k))
        out.update(conv_params(rng, "init.conv2", c, c, k))
        out.update(conv_params(rng, "init.conv3", 1, c, 1))
        out["init.conv3.weight"] *= 0.0
        return out

    def graph(self, tape, x, p):
        h = op_softplus(op_conv2d(x, p["init.conv1.weight"], p["init.conv1.bias"]))
        h = op_softplus(op_conv2d(h, p["init.conv2.weight"], p["init.conv2.bias"]))
        return x + op_conv2d(h, p["init.conv3.weight"], p["init.conv3.bias"])


class DenoisingEnergy(Energy):
    """||y - x||^2 + 2 sigma^2 prior(y), sigma^2 = softplus(rho) trainable."""

    space = "box"

    def __init__(self, prior, sigma2=0.05, init=None, rng=None):
        super().__init__()
        rng = np.random.default_rng(0) if rng is None else rng
        self.prior = prior
        self.init = init
        self.params.add("noise.rho", inverse_softplus(sigma2))
        for name, value in prior.init_params(rng).items():
            self.params.add(name, value)
        if init is not None:
            for name, value in init.init_params(rng).items():
                self.params.add(name, value)
        self.local_names = tuple(self.params.names("init."))
        self.icnn_names = tuple(prior.icnn_names)

    @property
    def sigma2(self):
        return float(ad.softplus_array(self.params["noise.rho"]))

    def output_shape(self, x):
        return np.shape(x)

    def local_graph(self, tape, y, x, p):
        diff = y - tape.const(x)
        return op_reduce(ad.square(diff), "sum")

    def global_graph(self, tape, y, x, p):
        sigma2 = op_softplus(p["noise.rho"])
        return 2.0 * sigma2 * self.prior.graph(tape, y, p)

    def init_graph(self, tape, x, p):
        if self.init is None:
            return tape.const(x)
        return self.init.graph(tape, tape.const(x), p)


def inverse_softplus(v):
    """rho with softplus(rho) == v, v > 0."""
    v = float(v)
    return v + np.log(-np.expm1(-v))


# ------------------------------------------------------------------ tagging


@dataclass
class TagInput:
    """Dense toy features: heads (P, dp), items (A, da), arcs (P, A, dr)."""

    heads: np.ndarray
    items: np.ndarray
    arcs: np.ndarray

    @property
    def shape(self):
        return self.arcs.shape[:2]


class ToyGlobalEnergy:
    """Five global terms scoring a relaxed (P, A, D) labeling; label 0 is null.

    Mass statistics ignore the null label: z[p, a] is the non-null mass of an
    arc, w[p, d] the mass of label d on head p, s the flattened z.
    """

    def __init__(self, head_dim, item_dim, arc_dim, n_labels, hidden=50, temperature=1.0):
        self.dims = (head_dim, item_dim, arc_dim)
        self.n_labels = n_labels
        self.hidden = hidden
        self.temperature = temperature

    def init_params(self, rng):
        dp, da, dr = self.dims
        d, hid = self.n_labels - 1, self.hidden
        out = {}
        out.update(mlp_params(rng, "global.t1", da + dp, hid, 1))
        out.update(mlp_params(rng, "global.t2", dp + d, hid, 1))
        out["global.t3.weight"] = glorot_uniform(rng, (1, dp), dp, 1)
        out["global.t3.bias"] = np.zeros(1)
        out.update(mlp_params(rng, "global.t4", d, hid, 1))
        out.update(mlp_params(rng, "global.t5", dr, hid, 1))
        return out

    def terms(self, tape, y, x, p):
        P, A, D = y.value.shape
        beta = self.temperature
        heads, items = tape.const(x.heads), tape.const(x.items)
        arcs = tape.const(x.arcs.reshape(P * A, -1))
        mass = y[:, :, 1:]
        z = ad.reduce_sum(mass, axis=2)  # P, A
        w = ad.reduce_sum(mass, axis=1)  # P, D-1
        avg_items = (z @ items) * (1.0 / A)
        t1 = op_reduce(mlp(ad.concat([avg_items, heads], axis=1), p, "global.t1", beta), "sum")
        t2 = op_reduce(mlp(ad.concat([heads, w], axis=1), p, "global.t2", beta), "sum")
        count = ad.reshape(op_linear(heads, p["global.t3.weight"], p["global.t3.bias"]), (P,))
        t3 = op_reduce(ad.square(count - ad.reduce_sum(w, axis=1)), "sum")
        t4 = op_reduce(mlp(ad.reduce_sum(w, axis=0) * (1.0 / P), p, "global.t4", beta), "sum")
        s = ad.reshape(z, (P * A,))
        t5 = op_reduce(mlp((s @ arcs) * (1.0 / (P * A)), p, "global.t5", beta), "sum")
        return [t1, t2, t3, t4, t5]

    def graph(self, tape, y, x, p):
        t1, t2, t3, t4, t5 = self.terms(tape, y, x, p)
        return t1 + t2 + t3 + t4 + t5


def toy_global_terms(glob, params, y, x):
    """Evaluate the five global terms separately (numpy floats)."""
    if np.max(np.abs(y.sum(axis=-1) - 1.0)) > SIMPLEX_TOL:
        raise ContractError("y is off the simplex")
    with Tape() as tape:
        pv = {n: tape.var(v, requires_grad=False) for n, v in params.items()}
        return [float(t.value) for t in glob.terms(tape, tape.var(y), x, pv)]


class TaggingEnergy(Energy):
    """Arc-factored local scores plus the toy global energy over (P, A, D) simplices.

    The local term is -<y, U> where U = MLP(f_p || f_a || f_r) per arc; Init is
    softmax(U).
    """

    space = "simplex"

    def __init__(self, head_dim, item_dim, arc_dim, n_labels, hidden=50, local_hidden=32,
                 entropy_weight=0.1, use_global=True, rng=None):
        super().__init__()
        rng = np.random.default_rng(0) if rng is None else rng
        self.n_labels = n_labels
        self.entropy_weight = entropy_weight
        self.use_global = use_global
        self.glob = ToyGlobalEnergy(head_dim, item_dim, arc_dim, n_labels, hidden)
        n_in = head_dim + item_dim + arc_dim
        for name, value in mlp_params(rng, "local", n_in, local_hidden, n_labels).items():
            self.params.add(name, value)
        for name, value in self.glob.init_params(rng).items():
            self.params.add(name, value)
        self.local_names = tuple(self.params.names("local."))

    def output_shape(self, x):
        P, A = x.shape
        return (P, A, self.n_labels)

    def arc_features(self, x):
        P, A = x.shape
        heads = np.broadcast_to(x.heads[:, None, :], (P, A, x.heads.shape[1]))
        items = np.broadcast_to(x.items[None, :, :], (P, A, x.items.shape[1]))
        return np.concatenate([heads, items, x.arcs], axis=2)

    def local_scores(self, tape, x, p):
        return mlp(tape.const(self.arc_features(x)), p, "local")

    def local_graph(self, tape, y, x, p):
        return -op_reduce(y * self.local_scores(tape, x, p), "sum")

    def global_graph(self, tape, y, x, p):
        if not self.use_global:
            return tape.const(0.0)
        return self.glob.graph(tape, y, x, p)

    def init_graph(self, tape, x, p):
        return self.local_scores(tape, x, p)


class LossAugmentedEnergy(Energy):
    """E(y) - scale * Delta(y, target) with Delta the mean squared error."""

    def __init__(self, base, target, scale=1.0):
        self.base = base
        self.params = base.params
        self.target = np.asarray(target, dtype=np.float64)
        self.scale = scale
        self.space = base.space
        self.entropy_weight = base.entropy_weight
        self.local_names = base.local_names
        self.icnn_names = base.icnn_names

    def graph(self, tape, y, x, p):
        delta = op_reduce(ad.square(y - tape.const(self.target)), "mean")
        return self.base.graph(tape, y, x, p) - self.scale * delta

    def init_graph(self, tape, x, p):
        return self.base.init_graph(tape, x, p)

    def output_shape(self, x):
        return self.base.output_shape(x)
