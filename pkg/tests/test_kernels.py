"""The numba kernels and their pure-numpy twins must agree bitwise-close
on random inputs, and the environment flag must select the numpy path."""

import os
import subprocess
import sys

import numpy as np
import pytest

from stabforge import kernels

pytestmark = pytest.mark.skipif(
    kernels.numba_impl is None and not os.environ.get("STABFORGE_NO_NUMBA"),
    reason="numba unavailable; nothing to compare")

RTOL = 1e-12


def impl_pairs():
    if kernels.numba_impl is None:
        pytest.skip("numba path not compiled")
    return kernels.numpy_impl, kernels.numba_impl


@pytest.mark.parametrize("seed", range(3))
def test_softmax_rows_parity(seed):
    np_impl, nb_impl = impl_pairs()
    x = np.random.default_rng(seed).standard_normal((7, 11))
    np.testing.assert_allclose(nb_impl.softmax_rows(x),
                               np_impl.softmax_rows(x), rtol=RTOL)


@pytest.mark.parametrize("seed", range(3))
def test_softmax_rows_grad_parity(seed):
    np_impl, nb_impl = impl_pairs()
    rng = np.random.default_rng(seed)
    y = np_impl.softmax_rows(rng.standard_normal((5, 9)))
    gy = rng.standard_normal(y.shape)
    np.testing.assert_allclose(nb_impl.softmax_rows_grad(y, gy),
                               np_impl.softmax_rows_grad(y, gy), rtol=RTOL)


@pytest.mark.parametrize("seed", range(3))
def test_layer_norm_rows_parity(seed):
    np_impl, nb_impl = impl_pairs()
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((6, 8))
    gain = rng.standard_normal(8)
    bias = rng.standard_normal(8)
    for a, b in zip(nb_impl.layer_norm_rows(x, gain, bias, 1e-5),
                    np_impl.layer_norm_rows(x, gain, bias, 1e-5)):
        np.testing.assert_allclose(a, b, rtol=RTOL, atol=1e-14)


@pytest.mark.parametrize("seed", range(3))
def test_layer_norm_rows_grad_parity(seed):
    np_impl, nb_impl = impl_pairs()
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((6, 8))
    gain = rng.standard_normal(8)
    bias = rng.standard_normal(8)
    _, xhat, inv_std = np_impl.layer_norm_rows(x, gain, bias, 1e-5)
    gy = rng.standard_normal((6, 8))
    for a, b in zip(nb_impl.layer_norm_rows_grad(xhat, inv_std, gain, gy),
                    np_impl.layer_norm_rows_grad(xhat, inv_std, gain, gy)):
        np.testing.assert_allclose(a, b, rtol=RTOL, atol=1e-14)


@pytest.mark.parametrize("seed", range(3))
def test_cross_entropy_rows_parity(seed):
    np_impl, nb_impl = impl_pairs()
    rng = np.random.default_rng(seed)
    logits = rng.standard_normal((8, 13))
    targets = rng.integers(0, 13, size=8)
    la, pa = nb_impl.cross_entropy_rows(logits, targets)
    lb, pb = np_impl.cross_entropy_rows(logits, targets)
    np.testing.assert_allclose(la, lb, rtol=RTOL)
    np.testing.assert_allclose(pa, pb, rtol=RTOL)


def test_softmax_rows_sum_to_one():
    x = np.random.default_rng(0).standard_normal((5, 6)) * 10
    y = kernels.softmax_rows(x)
    np.testing.assert_allclose(y.sum(axis=1), np.ones(5), rtol=1e-12)
    assert (y > 0).all()


def test_cross_entropy_rows_matches_log_softmax():
    rng = np.random.default_rng(1)
    logits = rng.standard_normal((4, 7))
    targets = np.array([0, 3, 6, 2])
    losses, probs = kernels.cross_entropy_rows(logits, targets)
    ref = -np.log(kernels.softmax_rows(logits)[np.arange(4), targets])
    np.testing.assert_allclose(losses, ref, rtol=1e-12)
    np.testing.assert_allclose(probs, kernels.softmax_rows(logits), rtol=1e-12)


def test_env_flag_selects_numpy_backend():
    code = ("import stabforge.kernels as k; "
            "print(k.ACTIVE, k.numba_impl is None)")
    env = dict(os.environ, STABFORGE_NO_NUMBA="1")
    out = subprocess.run([sys.executable, "-c", code], env=env,
                         capture_output=True, text=True, check=True)
    assert out.stdout.split() == ["numpy", "True"]


def test_default_backend_reports_active_name():
    assert kernels.ACTIVE in ("numba", "numpy")
    if kernels.numba_impl is not None:
        assert kernels.ACTIVE == "numba"
        assert kernels.softmax_rows is kernels.numba_impl.softmax_rows
    else:
        assert kernels.softmax_rows is kernels.numpy_impl.softmax_rows
