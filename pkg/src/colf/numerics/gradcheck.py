"""Central finite differences, the independent oracle for reverse-mode gradients."""
import numpy as np


def finite_difference_grad(f, x, h=1e-5):
    """(f(x + h e_i) - f(x - h e_i)) / 2h for every coordinate of ``x``.

    ``f`` maps an ndarray shaped like ``x`` to a float; ``x`` is not modified.
    """
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f(x)
        flat[i] = old - h
        fm = f(x)
        flat[i] = old
        gflat[i] = (fp - fm) / (2 * h)
    return grad


def relative_error(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / denom)


def check_param_grads(loss_fn, params, h=1e-5, max_coords=None, rng=None):
    """Compare backward() against finite differences for a list of parameter tensors.

    ``loss_fn()`` must rebuild the graph from the parameters' current ``.data``.
    With ``max_coords`` a random subset of coordinates per parameter is probed.
    Returns the worst relative error over the parameters.
    """
    for p in params:
        p.grad = None
    loss = loss_fn()
    loss.backward()
    analytic = [np.zeros(p.shape) if p.grad is None else p.grad.copy() for p in params]
    worst = 0.0
    rng = rng or np.random.default_rng(0)
    for p, ga in zip(params, analytic):
        flat = p.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = np.sort(rng.choice(flat.size, max_coords, replace=False))
        num = np.empty(coords.size)
        for k, i in enumerate(coords):
            old = flat[i]
            flat[i] = old + h
            fp = loss_fn().item()
            flat[i] = old - h
            fm = loss_fn().item()
            flat[i] = old
            num[k] = (fp - fm) / (2 * h)
        worst = max(worst, relative_error(ga.reshape(-1)[coords], num))
    return worst
