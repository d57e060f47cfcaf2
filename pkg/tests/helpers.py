"""Small energies and instances shared by the test modules."""
import numpy as np

from spen import autodiff as ad
from spen.autodiff import op_reduce
from spen.energies import Energy, TaggingEnergy, TagInput


class Quadratic(Energy):
    """E(y) = a ||y - c||^2 with a fixed starting point y0."""

    def __init__(self, center, start, a=1.0):
        super().__init__()
        self.center = np.asarray(center, dtype=np.float64)
        self.start = np.asarray(start, dtype=np.float64)
        self.a = a

    def output_shape(self, x):
        return self.center.shape

    def global_graph(self, tape, y, x, p):
        return self.a * op_reduce(ad.square(y - tape.const(self.center)), "sum")

    def init_graph(self, tape, x, p):
        return tape.const(self.start)


def tag_input(rng, P=2, A=3, dim=4):
    return TagInput(rng.standard_normal((P, dim)), rng.standard_normal((A, dim)), rng.standard_normal((P, A, dim)))


def tagging_energy(rng, **kw):
    return TaggingEnergy(4, 4, 4, 4, hidden=6, local_hidden=5, rng=rng, **kw)


def one_hot_target(rng, P=2, A=3, D=4):
    return np.eye(D)[rng.integers(0, D, (P, A))]


# acceptance results, printed in the terminal summary by conftest
ACCEPTANCE = {}


def record(criterion, ok, detail):
    ACCEPTANCE[criterion] = (bool(ok), detail)
    line = f"criterion {criterion:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
    print(line)
    return line
