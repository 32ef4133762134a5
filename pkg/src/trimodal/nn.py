"""Small layer helpers shared by the embedders, trunk and heads."""

import numpy as np

from .tensor import Parameter, gelu, layer_norm, matmul

LN_EPS = 1e-5


def trunc_normal(rng, shape, std=0.02, dtype=np.float32):
    """Truncated-normal init at +/- 2 std, resampling the tail."""
    out = rng.standard_normal(shape) * std
    bad = np.abs(out) > 2 * std
    while bad.any():
        out[bad] = rng.standard_normal(bad.sum()) * std
        bad = np.abs(out) > 2 * std
    return out.astype(dtype)


class Linear:
    def __init__(self, in_dim, out_dim, name, rng, dtype=np.float32):
        self.weight = Parameter(trunc_normal(rng, (in_dim, out_dim), dtype=dtype),
                                f"{name}.weight")
        self.bias = Parameter(np.zeros(out_dim, dtype=dtype), f"{name}.bias",
                              decay_exempt=True)

    def __call__(self, x):
        return matmul(x, self.weight) + self.bias

    def parameters(self):
        return [self.weight, self.bias]


class LayerNorm:
    def __init__(self, dim, name, dtype=np.float32, eps=LN_EPS):
        self.gamma = Parameter(np.ones(dim, dtype=dtype), f"{name}.gamma",
                               decay_exempt=True)
        self.beta = Parameter(np.zeros(dim, dtype=dtype), f"{name}.beta",
                              decay_exempt=True)
        self.eps = eps

    def __call__(self, x):
        return layer_norm(x, self.gamma, self.beta, self.eps)

    def parameters(self):
        return [self.gamma, self.beta]


class Mlp:
    """Two linear layers with GELU in between."""

    def __init__(self, dim, hidden_dim, name, rng, dtype=np.float32):
        self.fc1 = Linear(dim, hidden_dim, f"{name}.fc1", rng, dtype)
        self.fc2 = Linear(hidden_dim, dim, f"{name}.fc2", rng, dtype)

    def __call__(self, x):
        return self.fc2(gelu(self.fc1(x)))

    def parameters(self):
        return self.fc1.parameters() + self.fc2.parameters()


def collect_parameters(*layers):
    params = []
    for layer in layers:
        params.extend(layer.parameters())
    return params
