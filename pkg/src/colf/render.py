"""Ray sampling and differentiable volume-rendering quadrature."""
from dataclasses import dataclass

import numpy as np

from .numerics import Tensor, no_grad
from .numerics import tensor as T


@dataclass
class RaySampleBatch:
    t: np.ndarray          # (R, S) ascending sample depths
    sigma: Tensor          # (R, S)
    rgb: Tensor            # (R, S, 3)
    weights: Tensor        # (R, S)
    color: Tensor          # (R, 3)
    depth: Tensor          # (R,)
    opacity: Tensor        # (R,)
    Q: Tensor              # (R,) cumulative density sum(alpha)

    @property
    def points_per_ray(self):
        return self.t.shape[1]


def bin_edges(near, far, n_bins):
    return near + (far - near) * np.arange(n_bins + 1) / n_bins


def stratified_samples(near, far, n_bins, rng=None, n_rays=1):
    """One uniform draw per evenly spaced bin of [near, far]; ``rng=None`` gives bin midpoints."""
    if n_bins < 1:
        raise ValueError("n_bins must be >= 1")
    lo = bin_edges(near, far, n_bins)[:-1]
    width = (far - near) / n_bins
    u = np.full((n_rays, n_bins), 0.5) if rng is None else rng.random((n_rays, n_bins))
    return lo[None, :] + u * width


def importance_samples(edges, weights, n_fine, rng=None, floor=1e-2):
    """Inverse-CDF draws from the piecewise-constant pdf ~ (weights + floor * mean(weights)).

    edges: (R, S+1) or (S+1,) bin boundaries; weights: (R, S). Rays whose weights
    are all zero fall back to a uniform pdf. ``rng=None`` uses evenly spaced quantiles.
    """
    w = np.maximum(np.asarray(weights, dtype=np.float64), 0.0)
    n_rays, n_bins = w.shape
    edges = np.broadcast_to(np.asarray(edges, dtype=np.float64), (n_rays, n_bins + 1))
    w = w + floor * w.mean(axis=1, keepdims=True)
    total = w.sum(axis=1, keepdims=True)
    w = np.where(total > 0, w, 1.0)
    pdf = w / w.sum(axis=1, keepdims=True)
    cdf = np.concatenate([np.zeros((n_rays, 1)), np.cumsum(pdf, axis=1)], axis=1)
    cdf[:, -1] = 1.0
    if rng is None:
        u = np.broadcast_to((np.arange(n_fine) + 0.5) / n_fine, (n_rays, n_fine))
    else:
        u = rng.random((n_rays, n_fine))
    # one global searchsorted: shift ray r's cdf (and draws) by 2r
    shift = 2.0 * np.arange(n_rays)[:, None]
    pos = np.searchsorted((cdf + shift).ravel(), (u + shift).ravel(), side="right").reshape(n_rays, n_fine)
    idx = np.clip(pos - np.arange(n_rays)[:, None] * (n_bins + 1) - 1, 0, n_bins - 1)
    rows = np.arange(n_rays)[:, None]
    p = pdf[rows, idx]
    safe = np.where(p > 0, p, 1.0)
    frac = np.where(p > 0, (u - cdf[rows, idx]) / safe, 0.5)
    lo = edges[rows, idx]
    out = lo + np.clip(frac, 0.0, 1.0) * (edges[rows, idx + 1] - lo)
    return out


def deltas(t, t_far):
    """Spacing between samples; the last one is capped at ``t_far - t_last``."""
    d = np.empty_like(t)
    d[:, :-1] = t[:, 1:] - t[:, :-1]
    d[:, -1] = t_far - t[:, -1]
    return np.maximum(d, 0.0)


def composite(sigma, rgb, t, delta, background=(0.0, 0.0, 0.0)):
    """Discrete volume rendering.

    alpha_i = 1 - exp(-sigma_i delta_i), T_i = exp(-sum_{j<i} sigma_j delta_j),
    w_i = T_i alpha_i, C = sum w_i c_i + (1 - sum w_i) * background,
    D = sum w_i t_i, Q = sum alpha_i.
    """
    sigma = T.as_tensor(sigma)
    rgb = T.as_tensor(rgb)
    tau = sigma * np.asarray(delta)
    alpha = 1.0 - T.exp(-tau)
    trans = T.exp(-T.cumsum(tau, axis=-1, exclusive=True))
    w = trans * alpha
    opacity = w.sum(axis=-1)
    color = (T.reshape(w, w.shape + (1,)) * rgb).sum(axis=-2)
    bg = np.asarray(background, dtype=np.float64)
    if np.any(bg != 0):
        color = color + T.reshape(1.0 - opacity, opacity.shape + (1,)) * bg
    depth = (w * np.asarray(t)).sum(axis=-1)
    q = alpha.sum(axis=-1)
    return color, depth, opacity, q, w


def _run(field_fn, origins, dirs, t, t_far, background):
    pts = origins[:, None, :] + t[:, :, None] * dirs[:, None, :]
    sigma, rgb = field_fn(pts, dirs)
    color, depth, opacity, q, w = composite(sigma, rgb, t, deltas(t, t_far), background)
    return RaySampleBatch(t, sigma, rgb, w, color, depth, opacity, q)


def render_rays(origins, dirs, near, far, coarse_fn, fine_fn, n_coarse, n_fine, rng=None,
                background=(0.0, 0.0, 0.0)):
    """Coarse stratified pass, then a fine pass on coarse + importance samples.

    ``coarse_fn`` / ``fine_fn`` map (points (R, S, 3), dirs (R, 3)) to
    (sigma (R, S), rgb (R, S, 3)). With ``n_fine == 0`` or no ``fine_fn`` only
    the coarse batch is produced and returned in both slots.
    """
    origins = np.asarray(origins, dtype=np.float64)
    dirs = np.asarray(dirs, dtype=np.float64)
    t_c = stratified_samples(near, far, n_coarse, rng, len(origins))
    coarse = _run(coarse_fn, origins, dirs, t_c, far, background)
    if not n_fine or fine_fn is None:
        return coarse, coarse
    with no_grad():
        w = coarse.weights.data.copy()
    t_f = importance_samples(bin_edges(near, far, n_coarse), w, n_fine, rng)
    t_all = np.sort(np.concatenate([t_c, t_f], axis=1), axis=1)
    fine = _run(fine_fn, origins, dirs, t_all, far, background)
    return coarse, fine


def analytic_field_fn(fld):
    """Wrap an analytic scene field as a (constant) field function for render_rays."""
    from .scene import field_eval_batch

    def fn(pts, dirs):
        sigma, rgb = field_eval_batch(fld, pts)
        return Tensor(sigma), Tensor(rgb)
    return fn
