"""Parameter containers and layers."""
from __future__ import annotations

import numpy as np

from . import functional as F
from .tensor import Tensor, get_default_dtype


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02, bound: float = 2.0) -> np.ndarray:
    """Normal(0, std) redrawn until every value lies within ``bound`` stds."""
    out = rng.standard_normal(shape)
    bad = np.abs(out) > bound
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > bound
    return out * std


def kaiming_uniform(rng: np.random.Generator, shape) -> np.ndarray:
    fan_in = int(np.prod(shape[1:]))
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


def parameter(values) -> Tensor:
    return Tensor(np.asarray(values), requires_grad=True, dtype=get_default_dtype())


class Module:
    training = True

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def named_parameters(self, prefix: str = "") -> dict:
        out = {}
        for name, value in vars(self).items():
            key = f"{prefix}{name}"
            if isinstance(value, Tensor) and value.requires_grad:
                out[key] = value
            elif isinstance(value, Module):
                out.update(value.named_parameters(key + "."))
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        out.update(item.named_parameters(f"{key}.{i}."))
        return dict(sorted(out.items()))

    def parameters(self) -> list:
        return list(self.named_parameters().values())

    def modules(self):
        yield self
        for value in vars(self).values():
            if isinstance(value, Module):
                yield from value.modules()
            elif isinstance(value, (list, tuple)):
                for item in value:
                    if isinstance(item, Module):
                        yield from item.modules()

    def train(self, mode: bool = True):
        for m in self.modules():
            m.training = mode
        return self

    def eval(self):
        return self.train(False)

    def state_dict(self) -> dict:
        return {k: v.data.copy() for k, v in self.named_parameters().items()}

    def load_state_dict(self, state: dict, strict: bool = True) -> None:
        params = self.named_parameters()
        missing = set(params) - set(state)
        if strict and missing:
            raise KeyError(f"missing parameters: {sorted(missing)}")
        for name, p in params.items():
            if name not in state:
                continue
            value = np.asarray(state[name])
            if value.shape != p.shape:
                raise ValueError(f"shape mismatch for {name}: {value.shape} vs {p.shape}")
            p.data = value.astype(p.dtype).copy()


class Linear(Module):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, bias: bool = True):
        self.weight = parameter(trunc_normal(rng, (n_out, n_in)))
        self.bias = parameter(np.zeros(n_out)) if bias else None

    def forward(self, x):
        return F.linear(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        self.gamma = parameter(np.ones(dim))
        self.beta = parameter(np.zeros(dim))
        self.eps = eps

    def forward(self, x):
        return F.layer_norm(x, self.gamma, self.beta, self.eps)


class _Conv(Module):
    op = None

    def __init__(self, c_in, c_out, kernel, rng, stride=1, padding=0, bias=True, nd=3):
        kernel = (kernel,) * nd if isinstance(kernel, int) else tuple(kernel)
        self.weight = parameter(kaiming_uniform(rng, (c_out, c_in) + kernel))
        self.bias = parameter(np.zeros(c_out)) if bias else None
        self.stride = stride
        self.padding = padding

    def forward(self, x):
        return type(self).op(x, self.weight, self.bias, self.stride, self.padding)


class Conv3d(_Conv):
    op = staticmethod(F.conv3d)

    def __init__(self, c_in, c_out, kernel, rng, stride=1, padding=0, bias=True):
        super().__init__(c_in, c_out, kernel, rng, stride, padding, bias, nd=3)


class Conv2d(_Conv):
    op = staticmethod(F.conv2d)

    def __init__(self, c_in, c_out, kernel, rng, stride=1, padding=0, bias=True):
        super().__init__(c_in, c_out, kernel, rng, stride, padding, bias, nd=2)


class ConvTranspose2d(Module):
    def __init__(self, c_in, c_out, kernel, rng, stride=1, padding=0, bias=True):
        kernel = (kernel, kernel) if isinstance(kernel, int) else tuple(kernel)
        # fan-in of the equivalent forward conv is c_out * k * k
        bound = np.sqrt(6.0 / (c_out * kernel[0] * kernel[1]))
        self.weight = parameter(rng.uniform(-bound, bound, size=(c_in, c_out) + kernel))
        self.bias = parameter(np.zeros(c_out)) if bias else None
        self.stride = stride
        self.padding = padding

    def forward(self, x):
        return F.conv2d_transposed(x, self.weight, self.bias, self.stride, self.padding)


class ResBlock(Module):
    """``relu(x + conv(relu(conv(x))))`` with 3-wide same-padding kernels."""

    def __init__(self, channels: int, rng, nd: int = 3, bias: bool = True):
        conv = Conv3d if nd == 3 else Conv2d
        self.conv1 = conv(channels, channels, 3, rng, padding=1, bias=bias)
        self.conv2 = conv(channels, channels, 3, rng, padding=1, bias=bias)

    def forward(self, x):
        return F.relu(x + self.conv2(F.relu(self.conv1(x))))
