"""Minimal layer toolkit on top of the tensor module.

Modules register parameters and submodules in attribute order, yielding
stable dot-separated parameter names ("encoder.layers.0.attn.wq") that
double as checkpoint keys.
"""

from __future__ import annotations

import numpy as np

from .tensor import Tensor, layer_norm, matmul, parameter, relu


def xavier_uniform(rng, fan_in, fan_out, dtype):
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out)).astype(dtype)


def embedding_init(rng, rows, dim, dtype):
    return rng.uniform(-0.1, 0.1, size=(rows, dim)).astype(dtype)


class Module:
    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_children", {})

    def __setattr__(self, name, value):
        if isinstance(value, Tensor) and value.requires_grad:
            self._params[name] = value
        elif isinstance(value, Module):
            self._children[name] = value
        object.__setattr__(self, name, value)

    def named_parameters(self, prefix=""):
        for name, p in self._params.items():
            yield prefix + name, p
        for name, child in self._children.items():
            yield from child.named_parameters(prefix + name + ".")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def parameter_count(self):
        return sum(p.size for _, p in self.named_parameters())

    def zero_grad(self):
        for _, p in self.named_parameters():
            p.grad = None

    def state_dict(self):
        return {name: p.data for name, p in self.named_parameters()}

    def load_state_dict(self, state):
        own = dict(self.named_parameters())
        missing = sorted(set(own) - set(state))
        extra = sorted(set(state) - set(own))
        if missing or extra:
            raise KeyError(f"state dict mismatch: missing {missing}, unexpected {extra}")
        for name, p in own.items():
            arr = np.asarray(state[name], dtype=p.data.dtype)
            if arr.shape != p.data.shape:
                raise ValueError(f"shape mismatch for {name!r}: {arr.shape} vs {p.data.shape}")
            p.data = arr.copy()


class ModuleList(Module):
    def __init__(self, modules):
        super().__init__()
        self._items = list(modules)
        for i, m in enumerate(self._items):
            setattr(self, str(i), m)

    def __iter__(self):
        return iter(self._items)

    def __len__(self):
        return len(self._items)

    def __getitem__(self, i):
        return self._items[i]


class Linear(Module):
    def __init__(self, d_in, d_out, rng, dtype, bias=True):
        super().__init__()
        self.weight = parameter(xavier_uniform(rng, d_in, d_out, dtype))
        self.bias = parameter(np.zeros(d_out, dtype=dtype)) if bias else None

    def __call__(self, x):
        y = matmul(x, self.weight)
        return y + self.bias if self.bias is not None else y


class LayerNorm(Module):
    def __init__(self, d, dtype, eps=1e-5):
        super().__init__()
        self.gain = parameter(np.ones(d, dtype=dtype))
        self.bias = parameter(np.zeros(d, dtype=dtype))
        self.eps = eps

    def __call__(self, x):
        return layer_norm(x, self.gain, self.bias, eps=self.eps)


class MLP(Module):
    """Linear stack with ReLU between layers (none after the last)."""

    def __init__(self, dims, rng, dtype):
        super().__init__()
        self.layers = ModuleList(
            [Linear(a, b, rng, dtype) for a, b in zip(dims[:-1], dims[1:])]
        )

    def __call__(self, x):
        last = len(self.layers) - 1
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i != last:
                x = relu(x)
        return x
