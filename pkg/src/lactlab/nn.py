"""Parameterised layers on top of :mod:`lactlab.tensor`."""
from collections import OrderedDict

import numpy as np

from . import tensor as T
from .tensor import Tensor


def make_rng(seed):
    """Seeded PCG64 generator; same seed and call order give the same stream."""
    return np.random.default_rng(np.uint64(seed))


class Module:
    """Minimal container: parameters are discovered from attributes in
    definition order, recursing into sub-modules and lists of modules."""

    def named_parameters(self, prefix=""):
        out = OrderedDict()
        for name, val in vars(self).items():
            key = f"{prefix}{name}"
            if isinstance(val, Tensor) and val.requires_grad:
                out[key] = val
            elif isinstance(val, Module):
                out.update(val.named_parameters(key + "."))
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        out.update(item.named_parameters(f"{key}.{i}."))
        return out

    def parameters(self):
        return list(self.named_parameters().values())

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def astype(self, dtype):
        """Cast every parameter in place (float64 shadow mode for gradchecks)."""
        for p in self.parameters():
            p.data = p.data.astype(dtype)
            p.grad = None
        return self

    def state_dict(self):
        return OrderedDict((k, v.data.copy()) for k, v in self.named_parameters().items())

    def load_state_dict(self, state):
        params = self.named_parameters()
        missing = set(params) - set(state)
        if missing:
            raise KeyError(f"state is missing parameters: {sorted(missing)}")
        for k, p in params.items():
            arr = np.asarray(state[k])
            if arr.shape != p.shape:
                raise ValueError(f"{k}: stored shape {arr.shape} != parameter shape {p.shape}")
            p.data = arr.astype(p.dtype).copy()

    def num_parameters(self):
        return sum(p.data.size for p in self.parameters())

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def _param(arr):
    return Tensor(arr, requires_grad=True)


class Conv2d(Module):
    def __init__(self, cin, cout, k, rng, stride=1, padding=None):
        self.stride = stride
        self.padding = k // 2 if padding is None else padding
        std = np.sqrt(2.0 / (cin * k * k))
        self.weight = _param(rng.normal(0.0, std, (cout, cin, k, k)))
        self.bias = _param(np.zeros(cout))

    def forward(self, x):
        return T.conv2d(x, self.weight, self.bias, self.stride, self.padding)


class ConvTranspose2d(Module):
    """Default k=4, stride=2, padding=1 doubles the spatial size."""

    def __init__(self, cin, cout, rng, k=4, stride=2, padding=1):
        self.stride = stride
        self.padding = padding
        std = np.sqrt(2.0 / (cin * k * k / (stride * stride)))
        self.weight = _param(rng.normal(0.0, std, (cin, cout, k, k)))
        self.bias = _param(np.zeros(cout))

    def forward(self, x):
        return T.conv_transpose2d(x, self.weight, self.bias, self.stride, self.padding)


class GroupNorm(Module):
    def __init__(self, channels, groups=None):
        self.groups = groups or min(8, channels)
        while channels % self.groups:
            self.groups -= 1
        self.gamma = _param(np.ones(channels))
        self.beta = _param(np.zeros(channels))

    def forward(self, x):
        return T.group_norm(x, self.gamma, self.beta, self.groups)


class Linear(Module):
    def __init__(self, fin, fout, rng):
        std = np.sqrt(2.0 / fin)
        self.weight = _param(rng.normal(0.0, std, (fout, fin)))
        self.bias = _param(np.zeros(fout))

    def forward(self, x):
        return T.linear(x, self.weight, self.bias)


class ResidualBlock(Module):
    """x + conv1x1(relu(conv3x3(relu(x)))), as in the VQ-VAE residual stack."""

    def __init__(self, channels, rng, hidden=None):
        hidden = hidden or channels // 2
        self.conv1 = Conv2d(channels, hidden, 3, rng)
        self.conv2 = Conv2d(hidden, channels, 1, rng)
        self.conv2.weight.data *= 0.5

    def forward(self, x):
        return x + self.conv2(T.relu(self.conv1(T.relu(x))))


class ResidualStack(Module):
    def __init__(self, channels, n_blocks, rng):
        self.blocks = [ResidualBlock(channels, rng) for _ in range(n_blocks)]

    def forward(self, x):
        for b in self.blocks:
            x = b(x)
        return T.relu(x)
