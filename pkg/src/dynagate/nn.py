"""Parameter containers built on the autodiff tensor.

A Module owns Tensors (parameters) and child Modules as plain
attributes; traversal follows ``__dict__`` insertion order, so
parameter naming is deterministic for a given construction order.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .checkpoint import load_checkpoint, save_checkpoint
from .errors import CheckpointError
from .tensor import Tensor


class Module:
    def named_parameters(self, prefix=""):
        for key, value in vars(self).items():
            name = f"{prefix}.{key}" if prefix else key
            if isinstance(value, Tensor):
                if value.requires_grad:
                    yield name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(name)
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}")
                    elif isinstance(item, Tensor) and item.requires_grad:
                        yield f"{name}.{i}", item

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def state_dict(self):
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state, strict=True):
        params = dict(self.named_parameters())
        if strict:
            missing = sorted(set(params) - set(state))
            unexpected = sorted(set(state) - set(params))
            if missing or unexpected:
                raise CheckpointError(
                    f"state mismatch: missing {missing}, unexpected {unexpected}"
                )
        for name, value in state.items():
            if name not in params:
                continue
            p = params[name]
            value = np.asarray(value, dtype=p.data.dtype)
            if value.shape != p.data.shape:
                raise CheckpointError(
                    f"parameter {name!r} has shape {p.data.shape}, "
                    f"checkpoint has {value.shape}"
                )
            p.data[...] = value

    def save(self, path):
        save_checkpoint(path, self.state_dict())

    def load(self, path):
        self.load_state_dict(load_checkpoint(path))


class Linear(Module):
    """y = x @ weight + bias, weight shape (fan_in, fan_out)."""

    def __init__(self, fan_in, fan_out, rng, bias=True):
        scale = 1.0 / np.sqrt(fan_in)
        self.weight = Tensor(rng.normal(0.0, scale, size=(fan_in, fan_out)),
                             requires_grad=True)
        self.bias = Tensor(np.zeros(fan_out), requires_grad=True) if bias else None

    def __call__(self, x):
        y = T.matmul(x, self.weight)
        if self.bias is not None:
            y = T.add(y, self.bias)
        return y


class LayerNorm(Module):
    def __init__(self, dim):
        self.gamma = Tensor(np.ones(dim), requires_grad=True)
        self.beta = Tensor(np.zeros(dim), requires_grad=True)

    def __call__(self, x):
        return T.layer_norm(x, self.gamma, self.beta)


class DepthwiseConv3x3(Module):
    """Per-channel 3x3 convolution, stride 1, zero padding 1."""

    def __init__(self, channels, rng):
        scale = 1.0 / 3.0
        self.weight = Tensor(rng.normal(0.0, scale, size=(channels, 3, 3)),
                             requires_grad=True)

    def __call__(self, x):
        return T.depthwise_conv3x3(x, self.weight)
