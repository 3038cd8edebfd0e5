"""Training losses: photometric reconstruction, paired-ray depth consistency,
and the epipolar colour-distribution (KL) regulariser."""
from dataclasses import dataclass

import numpy as np

from .geometry import in_bounds, project_points
from .kernels import bilinear_gather
from .numerics import Tensor
from .numerics import tensor as T

TAU = 0.1
EPS_COLOR = 1e-3
KL_CLAMP = 1e-8


@dataclass(frozen=True)
class LossWeights:
    geo: float = 1e-4
    app: float = 2e-4

    def __post_init__(self):
        if self.geo < 0 or self.app < 0:
            raise ValueError("loss weights must be non-negative")


def loss_reconstruction(rendered, target):
    """Sum over rays of squared colour error; pass several renders to sum them."""
    target = np.asarray(target, dtype=np.float64)
    renders = rendered if isinstance(rendered, (list, tuple)) else [rendered]
    total = None
    for c in renders:
        if c.shape != target.shape:
            raise ValueError(f"rendered colours {c.shape} vs ground truth {target.shape}")
        diff = T.as_tensor(c) - target
        term = (diff * diff).sum()
        total = term if total is None else total + term
    return total


def geometry_mask(q_ref, q_adj, tau=TAU):
    """1 where both rays' cumulative density reaches ``tau`` (strict ``<`` excludes)."""
    q_ref = np.asarray(q_ref, dtype=np.float64)
    q_adj = np.asarray(q_adj, dtype=np.float64)
    return ((q_ref >= tau) & (q_adj >= tau)).astype(np.float64)


def loss_geometry(depth, ref_idx, adj_idx, mask):
    """sum_pairs M * |D(ref) - D(adj)|; depth is an (R,) tensor."""
    ref_idx = np.asarray(ref_idx, dtype=np.int64)
    adj_idx = np.asarray(adj_idx, dtype=np.int64)
    if np.any(ref_idx == adj_idx):
        raise ValueError("a ray cannot be paired with itself")
    diff = T.getitem(depth, ref_idx) - T.getitem(depth, adj_idx)
    return (T.tabs(diff) * np.asarray(mask, dtype=np.float64)).sum()


@dataclass
class PseudoLabels:
    colors: np.ndarray   # (R, S, 3) averaged source colours (undefined where invalid)
    valid: np.ndarray    # (R, S) bool: at least one source view sees the sample


def build_pseudo_label(points, images, cameras):
    """Average of the source-image colours at each sample's projections.

    points: (R, S, 3). A view counts for a sample when the sample is in front
    of the camera and projects inside [0, W-1] x [0, H-1]; invalid views are
    ignored and samples seen by no view are marked invalid.
    """
    points = np.asarray(points, dtype=np.float64)
    lead = points.shape[:-1]
    flat = points.reshape(-1, 3)
    acc = np.zeros((len(flat), 3))
    count = np.zeros(len(flat))
    for img, cam in zip(images, cameras):
        uv, depth = project_points(cam, flat)
        ok = (depth > 0) & in_bounds(uv, cam.height, cam.width)
        vals = bilinear_gather(np.asarray(img, dtype=np.float64), uv)
        acc += vals * ok[:, None]
        count += ok
    valid = count > 0
    colors = np.where(valid[:, None], acc / np.maximum(count, 1)[:, None], 0.0)
    return PseudoLabels(colors.reshape(lead + (3,)), valid.reshape(lead))


def color_distribution(colors, valid, eps=EPS_COLOR):
    """Per ray and channel: p_j = (c_j + eps) / sum_k (c_k + eps) over valid samples.

    colors: (R, S, 3) tensor or array; valid: (R, S). Invalid samples get p = 0.
    """
    m = np.asarray(valid, dtype=np.float64)[..., None]
    shifted = (T.as_tensor(colors) + eps) * m
    norm = shifted.sum(axis=1, keepdims=True)
    safe = np.where(norm.data > 0, 0.0, 1.0)  # rays with no valid sample
    return shifted / (norm + safe)


def kl_terms(p, q, valid):
    """Per-ray KL(p || q) averaged over channels; p constant, q differentiable."""
    m = np.asarray(valid, dtype=np.float64)[..., None]
    p = np.asarray(p.data if isinstance(p, Tensor) else p, dtype=np.float64)
    logp = np.log(np.maximum(p, KL_CLAMP))
    logq = T.log(T.clamp_min(q, KL_CLAMP))
    per = ((logp - logq) * (p * m)).sum(axis=1)
    return per.mean(axis=-1)


def loss_appearance(sample_rgb, labels, eps=EPS_COLOR):
    """Sum over rays of KL(label distribution || rendered distribution).

    sample_rgb: (R, S, 3) tensor of per-sample predicted colours on the target rays.
    Rays without any valid sample are skipped.
    """
    valid = labels.valid
    p = color_distribution(labels.colors, valid, eps).data
    q = color_distribution(sample_rgb, valid, eps)
    per_ray = kl_terms(p, q, valid)
    has = valid.any(axis=1).astype(np.float64)
    return (per_ray * has).sum()


def loss_total(rec, geo, app, weights=LossWeights()):
    return rec + geo * weights.geo + app * weights.app
