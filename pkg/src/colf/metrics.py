"""Image-quality metrics: PSNR, SSIM and the two-term Average."""
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

PSNR_CAP = 99.0


def _check_pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"image size mismatch: {a.shape} vs {b.shape}")
    return a, b


def mse(a, b):
    a, b = _check_pair(a, b)
    return float(np.mean((a - b) ** 2))


def psnr(a, b):
    """10 log10(1 / MSE) for images in [0, 1]; capped at 99 dB."""
    err = mse(a, b)
    if err <= 10.0 ** (-PSNR_CAP / 10.0):
        return PSNR_CAP
    return float(10.0 * np.log10(1.0 / err))


def gaussian_window(size=11, sigma=1.5):
    x = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-x ** 2 / (2 * sigma ** 2))
    return g / g.sum()


def _filter(img, g):
    """Separable 'valid' filtering of (H, W, C) along both image axes."""
    k = len(g)
    rows = sliding_window_view(img, k, axis=0) @ g       # (H-k+1, W, C)
    return sliding_window_view(rows, k, axis=1) @ g      # (H-k+1, W-k+1, C)


def ssim(a, b, size=11, sigma=1.5, k1=0.01, k2=0.03, data_range=1.0):
    """Mean structural similarity over all valid window positions and channels.

    Images smaller than the window use the largest odd window that fits.
    """
    a, b = _check_pair(a, b)
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    size = min(size, a.shape[0] - (1 - a.shape[0] % 2), a.shape[1] - (1 - a.shape[1] % 2))
    g = gaussian_window(size, sigma)
    c1 = (k1 * data_range) ** 2
    c2 = (k2 * data_range) ** 2
    mu_a = _filter(a, g)
    mu_b = _filter(b, g)
    ab = mu_a * mu_b
    var_a = _filter(a * a, g) - mu_a * mu_a
    var_b = _filter(b * b, g) - mu_b * mu_b
    cov = _filter(a * b, g) - ab
    num = (2 * ab + c1) * (2 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


def average_2term(psnr_value, ssim_value):
    """Geometric mean of 10^(-PSNR/10) and sqrt(1 - SSIM) (no perceptual term)."""
    m = 10.0 ** (-psnr_value / 10.0)
    s = np.sqrt(max(1.0 - ssim_value, 0.0))
    return float(np.sqrt(m * s))


def report(rendered, truth):
    """Per-view metrics dicts plus the aggregate (mean) row."""
    rows = []
    for i, (r, t) in enumerate(zip(rendered, truth)):
        p = psnr(r, t)
        s = ssim(r, t)
        rows.append({"view": i, "psnr": p, "ssim": s, "average": average_2term(p, s)})
    if rows:
        mean = {k: float(np.mean([r[k] for r in rows])) for k in ("psnr", "ssim", "average")}
    else:
        mean = {"psnr": float("nan"), "ssim": float("nan"), "average": float("nan")}
    return rows, mean
