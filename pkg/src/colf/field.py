"""Positional encoding and the feature-conditioned radiance network."""
import numpy as np

from .geometry import in_bounds, project_points
from .numerics import Linear, Module
from .numerics import tensor as T

FEATURE_SCALE = 0.5  # image pixel -> feature-grid coordinate


def pos_encode(x, n_freqs=6, omega=1.5):
    """[x, sin(2^0 w x), cos(2^0 w x), ..., sin(2^(L-1) w x), cos(2^(L-1) w x)].

    Each sin/cos group holds the three coordinates; output length 3 + 6L.
    """
    if n_freqs < 0 or omega <= 0:
        raise ValueError(f"need L >= 0 and omega > 0, got L={n_freqs}, omega={omega}")
    x = np.asarray(x, dtype=np.float64)
    parts = [x]
    if n_freqs:
        s, c = np.sin(omega * x), np.cos(omega * x)
        for _ in range(n_freqs):
            parts.append(s)
            parts.append(c)
            # double-angle step: the next octave without new transcendental calls
            s, c = 2.0 * s * c, (c - s) * (c + s)
    return np.concatenate(parts, axis=-1)


def gather_pixel_features(points, volumes, cameras, scale=FEATURE_SCALE):
    """Project points (P, 3) into every source view and bilinearly sample its volume.

    volumes: (N, Hv, Wv, d) tensor. Returns (features (N, P, d) tensor,
    valid (N, P) bool). Invalid lookups (behind the camera or off the grid)
    still return the border-clamped value.
    """
    points = np.asarray(points, dtype=np.float64)
    feats, valid = [], []
    hv, wv = volumes.shape[1], volumes.shape[2]
    for i, cam in enumerate(cameras):
        uv, depth = project_points(cam, points)
        xy = uv * scale
        feats.append(T.sample_bilinear(volumes[i], xy))
        valid.append((depth > 0) & in_bounds(xy, hv, wv))
    return T.stack(feats, axis=0), np.stack(valid)


class ResBlock(Module):
    def __init__(self, width, rng):
        self.fc0 = Linear(width, width, rng)
        self.fc1 = Linear(width, width, rng)

    def __call__(self, x):
        net = self.fc0(T.elu(x))
        return x + self.fc1(T.elu(net))


class RadianceNet(Module):
    """Five residual blocks; per-view features are injected before each of the
    first three and the per-view hidden states are averaged after the third."""

    n_blocks = 5
    n_pre_mean = 3

    def __init__(self, d, width, rng, n_freqs=6, omega=1.5):
        self.d = d
        self.width = width
        self.n_freqs = n_freqs
        self.omega = omega
        self.lin_in = Linear(3 + 6 * n_freqs + 3, width, rng)
        self.lin_z = [Linear(d, width, rng) for _ in range(self.n_pre_mean)]
        self.blocks = [ResBlock(width, rng) for _ in range(self.n_blocks)]
        self.lin_out = Linear(width, 4, rng)

    def __call__(self, x_enc, dirs, feats):
        """x_enc (P, 3+6L), dirs (P, 3), feats (N, P, d) tensor -> (rgb (P, 3), sigma (P,))."""
        h = self.lin_in(np.concatenate([x_enc, dirs], axis=-1))
        for k in range(self.n_pre_mean):
            h = self.blocks[k](h + self.lin_z[k](feats))
        h = T.view_mean(h)
        for k in range(self.n_pre_mean, self.n_blocks):
            h = self.blocks[k](h)
        out = self.lin_out(T.elu(h))
        rgb = T.sigmoid(out[:, 0:3])
        sigma = T.softplus(out[:, 3])
        return rgb, sigma


def radiance(x, d, feats, net):
    """Evaluate ``net`` at raw points x (P, 3) with directions d (P, 3)."""
    return net(pos_encode(x, net.n_freqs, net.omega), np.asarray(d, dtype=np.float64), feats)
