"""Hot inner loops: bilinear gather/scatter and row scatter-add.

Each kernel has a numba implementation and a numpy fallback with identical
semantics. ``USE_NUMBA`` (from ``COLF_NUMBA``) picks the default; ``backend``
temporarily overrides it, which the tests and the benchmark use to compare paths.
"""
from contextlib import contextmanager

import numpy as np

from . import _jit
from ._jit import optional_njit

_state = {"numba": _jit.USE_NUMBA}


def numba_enabled():
    return _state["numba"]


@contextmanager
def backend(use_numba):
    prev = _state["numba"]
    _state["numba"] = bool(use_numba) and _jit.HAVE_NUMBA
    try:
        yield
    finally:
        _state["numba"] = prev


# --------------------------------------------------------------------------
# bilinear sampling on an (H, W, C) grid at continuous (x, y) = (col, row)
# coordinates; coordinates are clamped to the grid border.

def bilinear_setup(xy, height, width):
    """Corner indices (flat, into H*W) and weights for each query point."""
    x = np.clip(xy[:, 0], 0.0, width - 1.0)
    y = np.clip(xy[:, 1], 0.0, height - 1.0)
    x0 = np.minimum(np.floor(x), max(width - 2, 0)).astype(np.int64)
    y0 = np.minimum(np.floor(y), max(height - 2, 0)).astype(np.int64)
    fx = x - x0
    fy = y - y0
    x1 = np.minimum(x0 + 1, width - 1)
    y1 = np.minimum(y0 + 1, height - 1)
    idx = np.stack([y0 * width + x0, y0 * width + x1, y1 * width + x0, y1 * width + x1], axis=1)
    w = np.stack([(1 - fx) * (1 - fy), fx * (1 - fy), (1 - fx) * fy, fx * fy], axis=1)
    return idx, w


def _gather_np(grid, xy):
    h, w, c = grid.shape
    idx, wts = bilinear_setup(xy, h, w)
    flat = grid.reshape(h * w, c)
    out = flat[idx[:, 0]] * wts[:, 0:1]
    for k in range(1, 4):
        out += flat[idx[:, k]] * wts[:, k:k + 1]
    return out


def _scatter_np(grad, xy, height, width):
    c = grad.shape[1]
    idx, wts = bilinear_setup(xy, height, width)
    out = np.zeros((height * width, c))
    for k in range(4):
        np.add.at(out, idx[:, k], grad * wts[:, k:k + 1])
    return out.reshape(height, width, c)


@optional_njit(cache=True)
def _corners(x, y, height, width):
    if x < 0.0:
        x = 0.0
    elif x > width - 1.0:
        x = width - 1.0
    if y < 0.0:
        y = 0.0
    elif y > height - 1.0:
        y = height - 1.0
    x0 = int(np.floor(x))
    y0 = int(np.floor(y))
    if x0 > max(width - 2, 0):
        x0 = max(width - 2, 0)
    if y0 > max(height - 2, 0):
        y0 = max(height - 2, 0)
    x1 = min(x0 + 1, width - 1)
    y1 = min(y0 + 1, height - 1)
    return x0, y0, x1, y1, x - x0, y - y0


@optional_njit(cache=True)
def _gather_nb(grid, xy):
    h, w, c = grid.shape
    n = xy.shape[0]
    out = np.empty((n, c))
    for p in range(n):
        x0, y0, x1, y1, fx, fy = _corners(xy[p, 0], xy[p, 1], h, w)
        w00 = (1 - fx) * (1 - fy)
        w01 = fx * (1 - fy)
        w10 = (1 - fx) * fy
        w11 = fx * fy
        for k in range(c):
            out[p, k] = (grid[y0, x0, k] * w00 + grid[y0, x1, k] * w01
                         + grid[y1, x0, k] * w10 + grid[y1, x1, k] * w11)
    return out


@optional_njit(cache=True)
def _scatter_nb(grad, xy, height, width):
    n, c = grad.shape
    out = np.zeros((height, width, c))
    for p in range(n):
        x0, y0, x1, y1, fx, fy = _corners(xy[p, 0], xy[p, 1], height, width)
        w00 = (1 - fx) * (1 - fy)
        w01 = fx * (1 - fy)
        w10 = (1 - fx) * fy
        w11 = fx * fy
        for k in range(c):
            g = grad[p, k]
            out[y0, x0, k] += g * w00
            out[y0, x1, k] += g * w01
            out[y1, x0, k] += g * w10
            out[y1, x1, k] += g * w11
    return out


def bilinear_gather(grid, xy):
    """Sample ``grid`` (H, W, C) at ``xy`` (P, 2) -> (P, C)."""
    grid = np.ascontiguousarray(grid, dtype=np.float64)
    xy = np.ascontiguousarray(xy, dtype=np.float64)
    if _state["numba"]:
        return _gather_nb(grid, xy)
    return _gather_np(grid, xy)


def bilinear_scatter(grad, xy, height, width):
    """Adjoint of :func:`bilinear_gather` with respect to the grid."""
    grad = np.ascontiguousarray(grad, dtype=np.float64)
    xy = np.ascontiguousarray(xy, dtype=np.float64)
    if _state["numba"]:
        return _scatter_nb(grad, xy, int(height), int(width))
    return _scatter_np(grad, xy, int(height), int(width))


# --------------------------------------------------------------------------
# row scatter-add: out[idx[i]] += vals[i]

@optional_njit(cache=True)
def _scatter_rows_nb(idx, vals, n_rows):
    out = np.zeros((n_rows, vals.shape[1]))
    for i in range(idx.shape[0]):
        r = idx[i]
        for k in range(vals.shape[1]):
            out[r, k] += vals[i, k]
    return out


def scatter_add_rows(idx, vals, n_rows):
    idx = np.ascontiguousarray(idx, dtype=np.int64).ravel()
    vals = np.ascontiguousarray(vals, dtype=np.float64).reshape(idx.shape[0], -1)
    if _state["numba"]:
        return _scatter_rows_nb(idx, vals, int(n_rows))
    out = np.zeros((int(n_rows), vals.shape[1]))
    np.add.at(out, idx, vals)
    return out


# --------------------------------------------------------------------------
# ELU with its derivative. numpy's vectorised expm1 beats a scalar numba loop
# here, so both backends share this implementation.

def elu_with_grad(x):
    """(elu(x), d elu / dx); exact identity on the positive side."""
    m = np.minimum(x, 0.0)
    np.expm1(m, out=m)
    out = np.maximum(x, 0.0)
    out += m
    m += 1.0
    return out, m


# --------------------------------------------------------------------------
# order-independent sums along axis 0: values are sorted per column and then
# accumulated from the smallest, so any permutation of the rows gives the
# same bits.

@optional_njit(cache=True)
def _insertion_sorted(x, j, buf):
    # view counts are small, so insertion sort beats a general sort here
    n = x.shape[0]
    for i in range(n):
        v = x[i, j]
        k = i
        while k > 0 and buf[k - 1] > v:
            buf[k] = buf[k - 1]
            k -= 1
        buf[k] = v


@optional_njit(cache=True)
def _sorted_sum_nb(x):
    n, m = x.shape
    out = np.empty(m)
    buf = np.empty(n)
    for j in range(m):
        _insertion_sorted(x, j, buf)
        s = buf[0]
        for i in range(1, n):
            s += buf[i]
        out[j] = s
    return out


@optional_njit(cache=True)
def _loo_sorted_sum_nb(x):
    n, m = x.shape
    out = np.zeros((n, m))
    buf = np.empty(n)
    for j in range(m):
        _insertion_sorted(x, j, buf)
        for i in range(n):
            v = x[i, j]
            skipped = False
            s = 0.0
            first = True
            for k in range(n):
                if not skipped and buf[k] == v:
                    skipped = True
                    continue
                if first:
                    s = buf[k]
                    first = False
                else:
                    s += buf[k]
            out[i, j] = s
    return out


def sorted_sum0(x):
    """Sum over axis 0, independent of row order."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[0] == 1:
        return x[0].copy()
    flat = np.ascontiguousarray(x.reshape(x.shape[0], -1))
    if _state["numba"]:
        return _sorted_sum_nb(flat).reshape(x.shape[1:])
    return np.sort(flat, axis=0).sum(axis=0).reshape(x.shape[1:])


def loo_sorted_sum0(x):
    """out[i] = sum over rows j != i along axis 0, independent of row order."""
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[0]
    flat = np.ascontiguousarray(x.reshape(n, -1))
    if _state["numba"]:
        return _loo_sorted_sum_nb(flat).reshape(x.shape)
    out = np.zeros_like(flat)
    if n > 1:
        for i in range(n):
            out[i] = np.sort(np.delete(flat, i, axis=0), axis=0).sum(axis=0)
    return out.reshape(x.shape)
