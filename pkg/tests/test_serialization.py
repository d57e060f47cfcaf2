import struct

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import array_shapes, arrays

from spen import serialization
from spen.errors import ConfigurationError, DimensionError, FormatError
from spen.params import ParamSet, glorot_uniform, icnn_project


def test_layout_is_little_endian():
    raw = serialization.dumps({"ab": np.array([[1.5, -2.0]])})
    assert raw[:4] == b"SPNT"
    assert struct.unpack("<II", raw[4:12]) == (1, 1)
    assert struct.unpack("<H", raw[12:14]) == (2,)
    assert raw[14:16] == b"ab"
    assert raw[16] == 2
    assert struct.unpack("<II", raw[17:25]) == (1, 2)
    assert struct.unpack("<2d", raw[25:41]) == (1.5, -2.0)
    assert len(raw) == 41


finite = st.floats(allow_nan=False, allow_infinity=False)


@given(st.dictionaries(st.text(min_size=1, max_size=12),
                       arrays(np.float64, array_shapes(min_dims=0, max_dims=4, max_side=4), elements=finite),
                       max_size=4))
def test_roundtrip(tensors):
    raw = serialization.dumps(tensors)
    back = serialization.loads(raw)
    assert list(back) == list(tensors)
    for name, arr in tensors.items():
        assert back[name].shape == arr.shape
        assert back[name].tobytes() == np.ascontiguousarray(arr).tobytes()
    assert serialization.dumps(back) == raw


def test_truncation_reports_offset():
    raw = serialization.dumps({"w": np.arange(6.0)})
    with pytest.raises(FormatError, match="offset"):
        serialization.loads(raw[:-3])


def test_bad_magic_and_trailing_bytes():
    raw = serialization.dumps({"w": np.ones(2)})
    with pytest.raises(FormatError, match="magic"):
        serialization.loads(b"XXXX" + raw[4:])
    with pytest.raises(FormatError, match="trailing"):
        serialization.loads(raw + b"\0")


# ---------------------------------------------------------------- ParamSet


def test_paramset_shapes_and_grads(rng):
    p = ParamSet()
    p.add("a", rng.standard_normal((2, 3)))
    p.add("b", np.zeros(4))
    assert p.size() == 10
    with pytest.raises(DimensionError):
        p["a"] = np.zeros(3)
    p.accumulate({"a": np.ones((2, 3))}, 0.5)
    np.testing.assert_array_equal(p.grads["a"], np.full((2, 3), 0.5))
    p.zero_grad()
    assert not np.any(p.grads["a"])


def test_paramset_flat_roundtrip(rng):
    p = ParamSet()
    p.add("a", rng.standard_normal((2, 3)))
    p.add("b", rng.standard_normal(4))
    vec = p.flat()
    p.set_flat(vec * 2)
    np.testing.assert_allclose(p.flat(), vec * 2)


def test_paramset_save_load_save_identical(tmp_path, rng):
    p = ParamSet()
    p.add("conv.weight", rng.standard_normal((2, 1, 3, 3)))
    p.add("rho", np.array(0.3))
    p.save(tmp_path / "a.spnt")
    q = ParamSet({"conv.weight": np.zeros((2, 1, 3, 3)), "rho": np.array(0.0)})
    q.load(tmp_path / "a.spnt")
    q.save(tmp_path / "b.spnt")
    assert (tmp_path / "a.spnt").read_bytes() == (tmp_path / "b.spnt").read_bytes()


def test_icnn_project_examples():
    p = ParamSet({"w": np.array([-1.0, 2.0]), "v": np.array([0.5, 3.0])})
    icnn_project(p, ["w", "v"])
    np.testing.assert_array_equal(p["w"], [0.0, 2.0])
    np.testing.assert_array_equal(p["v"], [0.5, 3.0])
    with pytest.raises(ConfigurationError):
        icnn_project(p, ["missing"])


def test_glorot_bounds(rng):
    w = glorot_uniform(rng, (50, 40), 40, 50)
    assert np.max(np.abs(w)) <= np.sqrt(6 / 90)
