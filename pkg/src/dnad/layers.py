"""Parameterised building blocks shared by the supernet, discrete nets and the teacher."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from .tensor import Tensor, ops


class Module:
    """Minimal parameter container.

    Parameters are discovered by walking instance attributes (including
    lists and dicts of modules) in insertion order, so the order is stable
    for a given construction sequence.
    """

    training = True

    def parameters(self, include_frozen: bool = False) -> Iterator[Tensor]:
        seen: set[int] = set()
        for p in self._walk(self, include_frozen):
            if id(p) not in seen:
                seen.add(id(p))
                yield p

    @classmethod
    def _walk(cls, obj, include_frozen=False):
        for _, p in cls._walk_named(obj, "", include_frozen):
            yield p

    def named_parameters(self, include_frozen: bool = False) -> Iterator[tuple[str, Tensor]]:
        yield from self._walk_named(self, "", include_frozen)

    @classmethod
    def _walk_named(cls, obj, prefix, include_frozen=False):
        if isinstance(obj, Tensor):
            if obj.requires_grad or include_frozen:
                yield prefix, obj
        elif isinstance(obj, Module):
            for k, v in vars(obj).items():
                yield from cls._walk_named(v, f"{prefix}.{k}" if prefix else k, include_frozen)
        elif isinstance(obj, (list, tuple)):
            for i, v in enumerate(obj):
                yield from cls._walk_named(v, f"{prefix}.{i}", include_frozen)
        elif isinstance(obj, dict):
            for k, v in obj.items():
                yield from cls._walk_named(v, f"{prefix}.{k}", include_frozen)

    def freeze(self) -> "Module":
        for p in list(self.parameters()):
            p.requires_grad = False
        return self

    def train(self, mode: bool = True) -> "Module":
        for m in self._modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def _modules(self):
        stack = [self]
        while stack:
            m = stack.pop()
            if isinstance(m, Module):
                yield m
                stack.extend(v for v in vars(m).values() if isinstance(v, (Module, list, tuple, dict)))
            elif isinstance(m, (list, tuple)):
                stack.extend(m)
            elif isinstance(m, dict):
                stack.extend(m.values())

    def param_count(self) -> int:
        return int(sum(p.size for p in self.parameters(include_frozen=True)))


def uniform_init(rng: np.random.Generator, shape, fan_in: int) -> Tensor:
    bound = 1.0 / np.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


class Conv2d(Module):
    def __init__(self, rng, c_in, c_out, kernel, stride=1, padding=0, dilation=1, groups=1, bias=False):
        fan_in = (c_in // groups) * kernel * kernel
        self.weight = uniform_init(rng, (c_out, c_in // groups, kernel, kernel), fan_in)
        self.bias = uniform_init(rng, (c_out,), fan_in) if bias else None
        self.stride, self.padding, self.dilation, self.groups = stride, padding, dilation, groups

    def __call__(self, x):
        return ops.conv2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding,
                          dilation=self.dilation, groups=self.groups)


class BatchNorm(Module):
    def __init__(self, channels):
        self.scale = Tensor(np.ones(channels), requires_grad=True)
        self.shift = Tensor(np.zeros(channels), requires_grad=True)

    def __call__(self, x):
        return ops.batch_norm(x, self.scale, self.shift)


class ReLU(Module):
    def __call__(self, x):
        return ops.relu(x)


class Linear(Module):
    def __init__(self, rng, c_in, c_out):
        self.weight = uniform_init(rng, (c_out, c_in), c_in)
        self.bias = uniform_init(rng, (c_out,), c_in)

    def __call__(self, x):
        return ops.linear(x, self.weight, self.bias)


class Sequential(Module):
    def __init__(self, *layers):
        self.layers = list(layers)

    def __call__(self, x):
        for layer in self.layers:
            x = layer(x)
        return x


def relu_conv_bn(rng, c_in, c_out, kernel=1, stride=1, padding=0):
    return Sequential(ReLU(), Conv2d(rng, c_in, c_out, kernel, stride, padding), BatchNorm(c_out))


def conv_bn_relu(rng, c_in, c_out, kernel=3, stride=1, padding=1):
    return Sequential(Conv2d(rng, c_in, c_out, kernel, stride, padding), BatchNorm(c_out), ReLU())
