"""Compiled kernels agree with the pure-Python fallback."""

import os
import subprocess
import sys

import numpy as np
import pytest

from idclab import _fallback, kernels

compiled = pytest.importorskip("idclab._kernels", reason="compiled extension not built")


def test_backend_selected():
    assert kernels.BACKEND == ("python" if os.environ.get("IDC_PURE_PYTHON") == "1" else "compiled")


def test_env_var_forces_fallback():
    code = "import idclab.kernels as k; print(k.BACKEND)"
    env = dict(os.environ, IDC_PURE_PYTHON="1")
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "python"


@pytest.mark.parametrize("shape", [(48, 96, 3), (7, 5, 3), (1, 1, 3)])
@pytest.mark.parametrize("out", [(64, 64), (3, 9), (1, 1)])
def test_resize_bytes_identical(shape, out):
    img = np.random.default_rng(0).integers(0, 256, size=shape, dtype=np.uint8)
    assert compiled.resize_bilinear(img, *out).tobytes() == _fallback.resize_bilinear(img, *out).tobytes()


@pytest.mark.parametrize("radius", [0, 1, 3])
def test_blur_bytes_identical(radius):
    rng = np.random.default_rng(radius)
    img = rng.integers(0, 256, size=(48, 48, 3), dtype=np.uint8)
    k = rng.random(2 * radius + 1)
    k /= k.sum()
    assert compiled.blur_separable(img, k).tobytes() == _fallback.blur_separable(img, k).tobytes()


def test_lcs_parity():
    rng = np.random.default_rng(1)
    codes = rng.integers(0, 4, size=(40, 9))
    lens = rng.integers(0, 10, size=40)
    np.testing.assert_array_equal(compiled.lcs_pairwise(codes, lens), _fallback.lcs_pairwise(codes, lens))
    for i in range(40):
        a, b = codes[i, : lens[i]], codes[(i + 1) % 40, : lens[(i + 1) % 40]]
        assert compiled.lcs_length(a, b) == _fallback.lcs_length(list(a), list(b))


def test_gelu_parity():
    x = np.random.default_rng(2).normal(0, 3, size=(17, 33))
    y1, d1 = compiled.gelu_forward(x)
    y2, d2 = _fallback.gelu_forward(x)
    np.testing.assert_allclose(y1, y2, rtol=1e-13, atol=1e-15)
    np.testing.assert_allclose(d1, d2, rtol=1e-12, atol=1e-14)
    assert compiled.gelu_forward(x, need_deriv=False)[1] is None


def test_layer_norm_parity():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(5, 7, 16))
    gain, bias = rng.normal(size=16), rng.normal(size=16)
    f1, f2 = compiled.layer_norm_forward(x, gain, bias, 1e-5), _fallback.layer_norm_forward(x, gain, bias, 1e-5)
    for a, b in zip(f1, f2):
        np.testing.assert_allclose(a, b, rtol=1e-12, atol=1e-13)
    g = rng.normal(size=x.shape)
    for a, b in zip(compiled.layer_norm_backward(g, *f1[1:], gain), _fallback.layer_norm_backward(g, *f2[1:], gain)):
        np.testing.assert_allclose(a, b, rtol=1e-10, atol=1e-12)
