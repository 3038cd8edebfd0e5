import numpy as np

from .tensor import ShapeError


class Adam:
    """Adam over a named parameter dict; moments are kept per parameter name."""

    def __init__(self, params, lr=1e-4, betas=(0.9, 0.999), eps=1e-8):
        self.params = dict(params)
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.step_count = 0
        self.m = {k: np.zeros(p.shape) for k, p in self.params.items()}
        self.v = {k: np.zeros(p.shape) for k, p in self.params.items()}

    def step(self, grads=None):
        """Apply one update. ``grads`` defaults to each parameter's ``.grad`` (None -> zero)."""
        if grads is None:
            grads = {k: p.grad for k, p in self.params.items()}
        self.step_count += 1
        t = self.step_count
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** t
        c2 = 1.0 - b2 ** t
        for k, p in self.params.items():
            g = grads.get(k)
            if g is None:
                g = np.zeros(p.shape)
            elif g.shape != p.shape:
                raise ShapeError(f"adam: gradient shape {g.shape} != parameter {k!r} shape {p.shape}")
            m = self.m[k]
            v = self.v[k]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            p.data = p.data - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state_dict(self):
        out = {"step": np.array(float(self.step_count))}
        for k in self.params:
            out[f"m.{k}"] = self.m[k].copy()
            out[f"v.{k}"] = self.v[k].copy()
        return out

    def load_state_dict(self, state):
        self.step_count = int(state["step"])
        for k, p in self.params.items():
            for name, store in (("m", self.m), ("v", self.v)):
                arr = np.asarray(state[f"{name}.{k}"], dtype=np.float64)
                if arr.shape != p.shape:
                    raise ShapeError(f"adam state {name}.{k}: shape {arr.shape} != {p.shape}")
                store[k] = arr.copy()


def clip_grad_norm(params, max_norm):
    """Scale gradients in place so their global L2 norm is at most ``max_norm``; returns the pre-clip norm."""
    grads = [p.grad for p in params if p.grad is not None]
    total = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads)))
    if max_norm is not None and total > max_norm:
        scale = max_norm / (total + 1e-12)
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * scale
    return total
