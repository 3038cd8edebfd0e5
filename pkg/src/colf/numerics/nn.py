"""Layers built on the tensor engine: parameter containers, linear and conv."""
import numpy as np
from numpy.lib.stride_tricks import as_strided

from .tensor import ShapeError, Tensor, _make, as_tensor, linear, sum_leading


def uniform_init(rng, shape, fan_in):
    bound = np.sqrt(1.0 / fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


class Module:
    """Parameter container; parameters are discovered by attribute walk in definition order."""

    def named_parameters(self, prefix=""):
        for name, value in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def state_dict(self, prefix=""):
        return {name: p.data.copy() for name, p in self.named_parameters(prefix)}

    def load_state_dict(self, state, prefix=""):
        for name, p in self.named_parameters(prefix):
            if name not in state:
                raise KeyError(f"missing parameter {name!r}")
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != p.shape:
                raise ShapeError(f"parameter {name!r}: checkpoint shape {arr.shape} != model shape {p.shape}")
            p.data = arr.copy()


class Linear(Module):
    def __init__(self, n_in, n_out, rng, bias=True):
        self.weight = uniform_init(rng, (n_in, n_out), n_in)
        self.bias = uniform_init(rng, (n_out,), n_in) if bias else None

    def __call__(self, x):
        return linear(x, self.weight, self.bias)


def _patches(x, kh, kw, stride):
    n, h, w, c = x.shape
    ho = (h - kh) // stride + 1
    wo = (w - kw) // stride + 1
    s = x.strides
    return as_strided(x, shape=(n, ho, wo, kh, kw, c),
                      strides=(s[0], s[1] * stride, s[2] * stride, s[1], s[2], s[3]),
                      writeable=False)


def conv2d(x, weight, bias=None, stride=1, pad=0):
    """Channels-last 2-D convolution (cross-correlation) with zero padding.

    x: (N, H, W, Cin); weight: (kh, kw, Cin, Cout); bias: (Cout,).
    """
    x, weight = as_tensor(x), as_tensor(weight)
    kh, kw, cin, cout = weight.shape
    if x.ndim != 4 or x.shape[-1] != cin:
        raise ShapeError(f"conv2d: input shape {x.shape} does not match weight shape {weight.shape}")
    xp = np.pad(x.data, ((0, 0), (pad, pad), (pad, pad), (0, 0))) if pad else x.data
    xp = np.ascontiguousarray(xp)
    cols = _patches(xp, kh, kw, stride)
    n, ho, wo = cols.shape[:3]
    cols2 = cols.reshape(n * ho * wo, kh * kw * cin)
    w2 = weight.data.reshape(kh * kw * cin, cout)
    out = (cols2 @ w2).reshape(n, ho, wo, cout)
    parents = (x, weight)
    if bias is not None:
        out = out + bias.data
        parents = parents + (bias,)

    def bw(g):
        g2 = g.reshape(-1, cout)
        gw = (cols2.T @ g2).reshape(weight.shape) if weight.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = (g2 @ w2.T).reshape(n, ho, wo, kh, kw, cin)
            gxp = np.zeros(xp.shape)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride, :] += gcols[:, :, :, i, j, :]
            gx = gxp[:, pad:pad + x.shape[1], pad:pad + x.shape[2], :] if pad else gxp
        grads = (gx, gw)
        if bias is not None:
            grads = grads + (sum_leading(g2),)
        return grads
    return _make(out, parents, bw, "conv2d")


class Conv2d(Module):
    def __init__(self, cin, cout, k, rng, stride=1, pad=None):
        fan_in = cin * k * k
        self.weight = uniform_init(rng, (k, k, cin, cout), fan_in)
        self.bias = uniform_init(rng, (cout,), fan_in)
        self.stride = stride
        self.pad = k // 2 if pad is None else pad

    def __call__(self, x):
        return conv2d(x, self.weight, self.bias, self.stride, self.pad)
