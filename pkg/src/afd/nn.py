"""Minimal parameter containers on top of :mod:`afd.tensor`."""

from __future__ import annotations

import numpy as np

from . import tensor as T


class Module:
    """Anything that owns named parameter tensors (possibly via children)."""

    def named_parameters(self, prefix: str = ""):
        for name, value in vars(self).items():
            key = f"{prefix}{name}"
            if isinstance(value, T.Tensor):
                yield key, value
            elif isinstance(value, Module):
                yield from value.named_parameters(key + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{key}.{i}.")
                    elif isinstance(item, T.Tensor):
                        yield f"{key}.{i}", item

    def parameters(self) -> list:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> dict:
        return {k: p.data.copy() for k, p in self.named_parameters()}

    def load_state_dict(self, state: dict, strict: bool = True):
        own = dict(self.named_parameters())
        if strict and set(own) != set(state):
            missing = sorted(set(own) - set(state))
            extra = sorted(set(state) - set(own))
            raise KeyError(f"state mismatch: missing={missing[:5]} unexpected={extra[:5]}")
        for k, p in own.items():
            if k not in state:
                continue
            arr = np.asarray(state[k], dtype=np.float64)
            if arr.shape != p.shape:
                raise ValueError(f"{k}: shape {arr.shape} != {p.shape}")
            p.data = arr.copy()

    def requires_grad_(self, flag: bool):
        for p in self.parameters():
            p.requires_grad = flag
        return self

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None


class Conv2d(Module):
    def __init__(self, cin: int, cout: int, k: int, stride: int = 1, pad: int | None = None,
                 rng: np.random.Generator | None = None, zero: bool = False):
        self.stride = stride
        self.pad = (k // 2) if pad is None else pad
        if zero:
            w = np.zeros((cout, cin, k, k))
        else:
            rng = rng if rng is not None else np.random.default_rng(0)
            # He-normal on fan-in
            w = rng.standard_normal((cout, cin, k, k)) * np.sqrt(2.0 / (cin * k * k))
        self.weight = T.Tensor(w, requires_grad=True)
        self.bias = T.Tensor(np.zeros(cout), requires_grad=True)

    @property
    def in_channels(self) -> int:
        return self.weight.shape[1]

    @property
    def out_channels(self) -> int:
        return self.weight.shape[0]

    def __call__(self, x):
        return T.conv2d(x, self.weight, self.bias, stride=self.stride, pad=self.pad)


def identity_conv1x1(channels: int) -> Conv2d:
    """A 1x1 convolution that maps its input to itself."""
    conv = Conv2d(channels, channels, 1, zero=True)
    conv.weight.data[np.arange(channels), np.arange(channels), 0, 0] = 1.0
    return conv
