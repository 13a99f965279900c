from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


class Module:
    """Parameter container; walks attributes for tensors and sub-modules."""

    buffer_names: tuple = ()

    def named_parameters(self, prefix=""):
        for name, value in self.__dict__.items():
            full = f"{prefix}{name}"
            if isinstance(value, Tensor):
                if value.requires_grad:
                    yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")

    def named_buffers(self, prefix=""):
        for name in self.buffer_names:
            yield f"{prefix}{name}", getattr(self, name)
        for name, value in self.__dict__.items():
            full = f"{prefix}{name}"
            if isinstance(value, Module):
                yield from value.named_buffers(full + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_buffers(f"{full}.{i}.")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def state_dict(self):
        out = {name: p.data for name, p in self.named_parameters()}
        out.update({name: b for name, b in self.named_buffers()})
        return out

    def load_state_dict(self, arrays, strict=True):
        params = dict(self.named_parameters())
        buffers = dict(self.named_buffers())
        missing = [k for k in list(params) + list(buffers) if k not in arrays]
        if strict and missing:
            raise KeyError(f"missing tensors: {missing[:5]}{'...' if len(missing) > 5 else ''}")
        for name, p in params.items():
            if name in arrays:
                src = np.asarray(arrays[name])
                if src.shape != p.shape:
                    raise ValueError(f"{name}: shape {src.shape} != expected {p.shape}")
                p.data = src.astype(p.dtype, copy=True)
        for name, b in buffers.items():
            if name in arrays:
                src = np.asarray(arrays[name])
                if src.shape != b.shape:
                    raise ValueError(f"{name}: shape {src.shape} != expected {b.shape}")
                b[...] = src

    def astype(self, dtype):
        for _, p in self.named_parameters():
            p.data = p.data.astype(dtype)
        return self

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None


class Linear(Module):
    """Affine map ``x @ W + b`` with zero initial bias.

    ``init="he"`` draws W from N(0, 2/fan_in); ``init="uniform"`` from
    U(-sqrt(1/fan_in), sqrt(1/fan_in)).
    """

    def __init__(self, fan_in, fan_out, rng, dtype=np.float64, init="he"):
        if init == "he":
            w = rng.normal(0.0, np.sqrt(2.0 / fan_in), (fan_in, fan_out))
        elif init == "uniform":
            bound = np.sqrt(1.0 / fan_in)
            w = rng.uniform(-bound, bound, (fan_in, fan_out))
        else:
            raise ValueError(f"unknown init {init!r}")
        self.weight = Tensor(w.astype(dtype), requires_grad=True)
        self.bias = Tensor(np.zeros(fan_out, dtype=dtype), requires_grad=True)

    def __call__(self, x):
        return ad.matmul(x, self.weight) + self.bias


class BatchNorm(Module):
    buffer_names = ("running_mean", "running_var")

    def __init__(self, channels, dtype=np.float64, momentum=0.1, eps=1e-5):
        self.gamma = Tensor(np.ones(channels, dtype=dtype), requires_grad=True)
        self.beta = Tensor(np.zeros(channels, dtype=dtype), requires_grad=True)
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)
        self.momentum = momentum
        self.eps = eps

    def __call__(self, x, training):
        return ad.batchnorm(
            x, self.gamma, self.beta, self.running_mean, self.running_var,
            training=training, momentum=self.momentum, eps=self.eps,
        )
