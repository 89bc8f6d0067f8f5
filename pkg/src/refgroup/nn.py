"""Small parameterised layers registered into a ParamStore."""
from __future__ import annotations

import numpy as np

from . import tensor as T
from .params import ParamStore, kaiming_uniform


class Linear:
    def __init__(self, store: ParamStore, name: str, d_in: int, d_out: int, rng, bias: bool = True):
        self.w = store.add(f"{name}.w", kaiming_uniform(rng, (d_in, d_out), fan_in=d_in))
        self.b = store.add(f"{name}.b", np.zeros(d_out)) if bias else None

    def __call__(self, x):
        y = T.matmul(x, self.w)
        return y + self.b if self.b is not None else y


class MLP:
    """Two linear layers with GELU in between."""

    def __init__(self, store, name, d_in, d_hidden, d_out, rng):
        self.fc1 = Linear(store, f"{name}.fc1", d_in, d_hidden, rng)
        self.fc2 = Linear(store, f"{name}.fc2", d_hidden, d_out, rng)

    def __call__(self, x):
        return self.fc2(T.gelu(self.fc1(x)))


class LayerNorm:
    def __init__(self, store, name, dim, eps: float = 1e-5):
        self.gamma = store.add(f"{name}.gamma", np.ones(dim))
        self.beta = store.add(f"{name}.beta", np.zeros(dim))
        self.eps = eps

    def __call__(self, x):
        return T.layer_norm(x, self.gamma, self.beta, self.eps)


class Conv2d:
    def __init__(self, store, name, c_in, c_out, k, rng, stride=1, pad=None):
        self.w = store.add(f"{name}.w", kaiming_uniform(rng, (k, k, c_in, c_out), fan_in=k * k * c_in))
        self.b = store.add(f"{name}.b", np.zeros(c_out))
        self.stride = stride
        self.pad = k // 2 if pad is None else pad

    def __call__(self, x):
        return T.conv2d(x, self.w, self.stride, self.pad) + self.b


class ConvNormAct:
    """Conv -> LayerNorm over channels -> ReLU."""

    def __init__(self, store, name, c_in, c_out, k, rng, stride=1, pad=None):
        self.conv = Conv2d(store, f"{name}.conv", c_in, c_out, k, rng, stride, pad)
        self.norm = LayerNorm(store, f"{name}.norm", c_out)

    def __call__(self, x):
        return T.relu(self.norm(self.conv(x)))
