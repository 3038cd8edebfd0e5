"""Cross-view volume integration: each source volume, taken in turn as the
anchor, is refined by windowed attention guided by the sum of the others.

Attention layout per anchor i:

* ``fused = reduce([F_anc, F_aux])`` (1x1 conv, 2d -> d) supplies queries and keys;
* the anchor supplies values;
* the volume is tiled into s x s cores; a core's queries attend over its
  (s + 2a)^2 context window (core plus an a-pixel band copied from the
  neighbouring tiles). Window positions outside the volume are masked out.
"""
from functools import lru_cache

import numpy as np

from .numerics import Linear, Module, ShapeError, Tensor
from .numerics import tensor as T


class CCVI(Module):
    def __init__(self, d, rng, d_k=None, d_ff=None, patch=5, band=3):
        if patch < 1 or band < 0:
            raise ValueError(f"need patch >= 1 and band >= 0, got s={patch}, a={band}")
        self.d = d
        self.d_k = d_k or d
        self.d_ff = d_ff or 2 * d
        self.patch = patch
        self.band = band
        self.reduce = Linear(2 * d, d, rng)
        self.w_q = Linear(d, self.d_k, rng, bias=False)
        self.w_k = Linear(d, self.d_k, rng, bias=False)
        self.w_v = Linear(d, d, rng, bias=False)
        self.ffn1 = Linear(d, self.d_ff, rng)
        self.ffn2 = Linear(self.d_ff, d, rng)

    def __call__(self, volumes):
        return ccvi_forward(volumes, self)


# ------------------------------------------------------------------ tiling
@lru_cache(maxsize=32)
def window_tables(height, width, s, a):
    """Index tables into a volume flattened to (H*W + 1) rows, the last row a zero pad.

    Returns (core_idx (B, s*s), ctx_idx (B, K), ctx_valid, inverse (H*W,)); each
    ctx row lists the window's in-volume positions first, K <= (s+2a)^2.
    where ``inverse[p]`` is the row of position p in the (B*s*s) core-token list.
    """
    pad_row = height * width
    nbh = -(-height // s)
    nbw = -(-width // s)
    k = s + 2 * a
    core = np.full((nbh * nbw, s * s), pad_row, dtype=np.int64)
    ctx = np.full((nbh * nbw, k * k), pad_row, dtype=np.int64)
    inverse = np.empty(height * width, dtype=np.int64)
    for bi in range(nbh):
        for bj in range(nbw):
            b = bi * nbw + bj
            for di in range(k):
                r = bi * s - a + di
                for dj in range(k):
                    c = bj * s - a + dj
                    if 0 <= r < height and 0 <= c < width:
                        ctx[b, di * k + dj] = r * width + c
            for di in range(s):
                r = bi * s + di
                for dj in range(s):
                    c = bj * s + dj
                    if r < height and c < width:
                        core[b, di * s + dj] = r * width + c
                        inverse[r * width + c] = b * s * s + di * s + dj
    # pack each window's in-volume positions first (keeping row-major order) and
    # drop columns that are padding everywhere; the attention result does not
    # depend on key order, and identical valid sets now give identical bits
    order = np.argsort(ctx == pad_row, axis=1, kind="stable")
    ctx = np.take_along_axis(ctx, order, axis=1)
    ctx = ctx[:, :int((ctx != pad_row).sum(axis=1).max())].copy()
    for arr in (core, ctx, inverse):
        arr.setflags(write=False)
    valid = ctx != pad_row
    valid.setflags(write=False)
    return core, ctx, valid, inverse


def partition_patches(volume, s, a):
    """Split an (H, W, C) array into tiles.

    Returns a list of dicts with ``core`` (the tile, clipped at the far
    edges), ``context`` ((s+2a, s+2a, C), zero where no neighbour exists) and
    ``origin`` (row, col) of the core.
    """
    volume = np.asarray(volume, dtype=np.float64)
    h, w, c = volume.shape
    padded = np.zeros((h + 2 * a + s, w + 2 * a + s, c))
    padded[a:a + h, a:a + w] = volume
    blocks = []
    for r0 in range(0, h, s):
        for c0 in range(0, w, s):
            blocks.append({
                "origin": (r0, c0),
                "core": volume[r0:r0 + s, c0:c0 + s].copy(),
                "context": padded[r0:r0 + s + 2 * a, c0:c0 + s + 2 * a].copy(),
            })
    return blocks


def assemble_cores(blocks, shape):
    out = np.zeros(shape)
    for b in blocks:
        r0, c0 = b["origin"]
        hh, ww = b["core"].shape[:2]
        out[r0:r0 + hh, c0:c0 + ww] = b["core"]
    return out


# ------------------------------------------------------------------- blocks
def split_anchor_aux(volumes, i):
    """(anchor, sum of the other volumes) for anchor index ``i``; works on arrays or tensors."""
    n = len(volumes)
    if n == 0:
        raise ShapeError("split_anchor_aux: no volumes")
    if not 0 <= i < n:
        raise IndexError(f"anchor index {i} out of range for {n} volumes")
    stacked = volumes if isinstance(volumes, Tensor) else Tensor(np.stack([np.asarray(v) for v in volumes]))
    aux = T.leave_one_out_sum(stacked)
    return stacked[i], aux[i]


def fuse_aux(anchor, aux, params):
    """1x1 convolution of the channel concatenation [anchor, aux] down to d channels."""
    if anchor.shape != aux.shape:
        raise ShapeError(f"fuse_aux: anchor {anchor.shape} vs aux {aux.shape}")
    return params.reduce(T.concat([anchor, aux], axis=-1))


def avgi(queries, keys, values, params, key_mask=None, return_weights=False):
    """softmax(Q K^T / sqrt(d_k)) V over batched token blocks.

    queries: (B, Nq, d) tokens of the fused volume; keys: (B, Nk, d) tokens
    of the fused volume; values: (B, Nk, d) anchor tokens; key_mask: (B, Nk)
    bool, False entries receive zero weight.
    """
    q = params.w_q(queries)
    k = params.w_k(keys)
    v = params.w_v(values)
    logits = (q @ T.transpose(k, (0, 2, 1))) * (1.0 / np.sqrt(params.d_k))
    mask = None if key_mask is None else np.asarray(key_mask)[:, None, :]
    weights = T.softmax(logits, axis=-1, mask=mask)
    out = weights @ v
    return (out, weights) if return_weights else out


def _with_pad_row(flat):
    return T.concat([flat, Tensor(np.zeros((1, flat.shape[1])))], axis=0)


def ccvi_anchor(anchor, aux, params, return_weights=False):
    """Refine one (H, W, d) anchor volume given its auxiliary sum."""
    h, w, d = anchor.shape
    core, ctx, valid, inverse = window_tables(h, w, params.patch, params.band)
    anc_flat = anchor.reshape(h * w, d)
    fused = fuse_aux(anc_flat, aux.reshape(h * w, d), params)
    fused_ext = _with_pad_row(fused)
    anc_ext = _with_pad_row(anc_flat)
    q = T.take_rows(fused_ext, core)
    k = T.take_rows(fused_ext, ctx)
    v = T.take_rows(anc_ext, ctx)
    att, weights = avgi(q, k, v, params, valid, return_weights=True)
    att_flat = T.take_rows(att.reshape(-1, d), inverse)
    refined = anc_flat + att_flat
    out = refined + params.ffn2(T.elu(params.ffn1(refined)))
    out = out.reshape(h, w, d)
    return (out, weights) if return_weights else out


def ccvi_forward(volumes, params):
    """(N, H, W, d) source volumes -> (N, H, W, d) fused volumes, shared parameters."""
    volumes = volumes if isinstance(volumes, Tensor) else Tensor(np.asarray(volumes, dtype=np.float64))
    if volumes.ndim != 4 or volumes.shape[-1] != params.d:
        raise ShapeError(f"ccvi_forward: expected (N, H, W, {params.d}) volumes, got {volumes.shape}")
    aux = T.leave_one_out_sum(volumes)
    outs = [ccvi_anchor(volumes[i], aux[i], params) for i in range(volumes.shape[0])]
    return T.stack(outs, axis=0)
