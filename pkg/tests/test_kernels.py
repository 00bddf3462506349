"""The compiled kernels and their pure-Python fallbacks agree bit for bit."""
import importlib
import os
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from cgn import _kernels_py as py
from cgn import kernels

compiled = pytest.importorskip("cgn._kernels")

small = settings(max_examples=60, deadline=None)


def test_backend_is_compiled_when_built():
    assert kernels.BACKEND == "compiled"


def test_pure_python_switch():
    code = "from cgn import kernels; print(kernels.BACKEND)"
    env = dict(os.environ, CGN_PURE_PYTHON="1")
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "python"


@small
@given(arrays(np.bool_, st.tuples(st.integers(1, 12), st.integers(1, 12))))
def test_label4_equal(mask):
    la, sa = compiled.label4(mask.astype(np.uint8))
    lb, sb = py.label4(mask)
    np.testing.assert_array_equal(la, lb)
    np.testing.assert_array_equal(sa, sb)


def test_label4_components():
    m = np.array([[1, 1, 0, 1], [0, 1, 0, 1], [1, 0, 0, 0]], dtype=np.uint8)
    labels, sizes = kernels.label4(m)
    assert sizes.tolist() == [0, 3, 2, 1]
    assert labels[2, 0] == 3
    # diagonal neighbours are not connected
    assert labels[1, 1] != labels[2, 0]


@small
@given(arrays(np.uint8, st.tuples(st.integers(1, 20), st.integers(1, 20))))
def test_histogram_equal(img):
    np.testing.assert_array_equal(compiled.histogram256(img), py.histogram256(img))
    assert compiled.histogram256(img).sum() == img.size


@small
@given(
    arrays(np.float64, st.tuples(st.integers(1, 16), st.integers(1, 16)), elements=st.floats(0, 255)),
    st.integers(1, 20),
    st.integers(1, 20),
)
def test_bilinear_equal(img, oh, ow):
    np.testing.assert_array_equal(compiled.bilinear_resize(img, oh, ow), py.bilinear_resize(img, oh, ow))


@small
@given(st.lists(st.tuples(st.integers(0, 6), st.integers(0, 1)), min_size=1, max_size=40))
def test_auc_midrank_equal(pairs):
    s = np.array([p[0] for p in pairs], dtype=np.float64)
    y = np.array([p[1] for p in pairs], dtype=np.int64)
    assert compiled.auc_midrank(s, y) == py.auc_midrank(s, y)


@small
@given(st.integers(1, 12), st.integers(1, 12), st.integers(1, 5), st.integers(0, 2**31))
def test_chamfer_min_equal(p, q, c, seed):
    rng = np.random.default_rng(seed)
    a, b = rng.normal(size=(p, c)), rng.normal(size=(q, c))
    got = compiled.chamfer_min_sq(a, b)
    np.testing.assert_array_equal(got, py.chamfer_min_sq(a, b))
    brute = np.array([min(float(((x - z) ** 2).sum()) for z in b) for x in a])
    np.testing.assert_allclose(got, brute, rtol=1e-12, atol=1e-12)


def test_reload_keeps_api():
    mod = importlib.reload(kernels)
    for name in mod.__all__:
        assert hasattr(mod, name)
