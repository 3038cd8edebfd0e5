"""numba kernels against their numpy twins, plus the shared ELU."""
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from colf import kernels
from colf._jit import HAVE_NUMBA

pytestmark = pytest.mark.skipif(not HAVE_NUMBA, reason="numba not installed")


def both(fn, *args):
    with kernels.backend(False):
        a = fn(*args)
    with kernels.backend(True):
        b = fn(*args)
    return a, b


@pytest.mark.parametrize("seed", range(5))
def test_bilinear_gather_and_scatter_agree(seed):
    r = np.random.default_rng(seed)
    h, w = 9, 13
    grid = r.standard_normal((h, w, 4))
    xy = np.concatenate([r.uniform(-2, w + 1, (200, 1)), r.uniform(-2, h + 1, (200, 1))], axis=1)
    xy[:5] = [[0, 0], [w - 1, h - 1], [w - 1, 0], [0, h - 1], [w - 0.5, 2]]
    a, b = both(kernels.bilinear_gather, grid, xy)
    np.testing.assert_allclose(a, b, rtol=0, atol=1e-14)
    g = r.standard_normal((200, 4))
    a, b = both(kernels.bilinear_scatter, g, xy, h, w)
    np.testing.assert_allclose(a, b, rtol=0, atol=1e-13)


def test_scatter_rows_agree():
    r = np.random.default_rng(0)
    idx = r.integers(0, 17, 500)
    vals = r.standard_normal((500, 3))
    a, b = both(kernels.scatter_add_rows, idx, vals, 17)
    np.testing.assert_allclose(a, b, atol=1e-12)


def test_elu_matches_definition():
    x = np.random.default_rng(1).standard_normal((7, 11, 5)) * 3
    x[0, 0, 0] = 0.0
    out, der = kernels.elu_with_grad(x)
    pos = x > 0
    assert np.array_equal(out[pos], x[pos]) and np.all(der[pos] == 1)
    np.testing.assert_allclose(out[~pos], np.expm1(x[~pos]), rtol=0, atol=1e-16)
    np.testing.assert_allclose(der[~pos], np.exp(x[~pos]), rtol=0, atol=2e-16)
    assert out[0, 0, 0] == 0 and der[0, 0, 0] == 1


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 6), st.integers(0, 10 ** 6))
def test_sorted_sums_agree_bitwise(n, seed):
    x = np.random.default_rng(seed).standard_normal((n, 4, 3)) * 10 ** np.random.default_rng(seed).uniform(-3, 3)
    a, b = both(kernels.sorted_sum0, x)
    assert np.array_equal(a, b)
    a, b = both(kernels.loo_sorted_sum0, x)
    assert np.array_equal(a, b)


@settings(max_examples=60, deadline=None)
@given(st.integers(2, 6), st.integers(0, 10 ** 6))
def test_sorted_sums_permutation_invariant(n, seed):
    r = np.random.default_rng(seed)
    x = r.standard_normal((n, 5)) * 1e3 + r.standard_normal((n, 5)) * 1e-9
    perm = r.permutation(n)
    assert np.array_equal(kernels.sorted_sum0(x), kernels.sorted_sum0(x[perm]))
    assert np.array_equal(kernels.loo_sorted_sum0(x)[perm], kernels.loo_sorted_sum0(x[perm]))
    np.testing.assert_allclose(kernels.loo_sorted_sum0(x), x.sum(0) - x, rtol=1e-9, atol=1e-6)
