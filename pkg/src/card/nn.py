"""Small module system over :mod:`card.tensor`: named parameters, linear maps, MLPs."""

from __future__ import annotations

import numpy as np

from . import tensor as T


class Module:
    """Container whose Tensor attributes and sub-modules form a parameter tree."""

    def named_parameters(self, prefix=""):
        for name, value in vars(self).items():
            key = f"{prefix}{name}"
            if isinstance(value, T.Tensor) and value.requires_grad:
                yield key, value
            elif isinstance(value, Module):
                yield from value.named_parameters(key + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{key}.{i}.")
                    elif isinstance(item, T.Tensor) and item.requires_grad:
                        yield f"{key}.{i}", item

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def state_dict(self):
        return {k: p.data.copy() for k, p in self.named_parameters()}

    def load_state_dict(self, state):
        own = dict(self.named_parameters())
        missing = set(own) - set(state)
        extra = set(state) - set(own)
        if missing or extra:
            raise KeyError(f"state mismatch; missing={sorted(missing)} unexpected={sorted(extra)}")
        for k, p in own.items():
            arr = np.asarray(state[k], dtype=np.float64)
            if arr.shape != p.shape:
                raise ValueError(f"shape mismatch for {k}: {arr.shape} vs {p.shape}")
            p.data = arr.copy()
            p.grad = np.zeros_like(p.data)

    def zero_grad(self):
        for p in self.parameters():
            p.grad = np.zeros_like(p.data)

    def n_parameters(self):
        return sum(p.size for p in self.parameters())


class Linear(Module):
    def __init__(self, n_in, n_out, rng, bias=True, scale=1.0):
        self.weight = T.parameter(rng.normal(0.0, scale / np.sqrt(n_in), size=(n_in, n_out)))
        self.bias = T.parameter(np.zeros(n_out)) if bias else None

    def __call__(self, x):
        x = T.as_tensor(x)
        if x.ndim == 1:
            return T.reshape(self(T.reshape(x, (1, -1))), (-1,))
        out = T.matmul(x, self.weight)
        if self.bias is not None:
            out = out + self.bias
        return out

    def zero_(self):
        self.weight.data[...] = 0.0
        if self.bias is not None:
            self.bias.data[...] = 0.0


class MLP(Module):
    """Two-layer perceptron with SiLU in between."""

    def __init__(self, n_in, n_hidden, n_out, rng, out_scale=1.0):
        self.fc1 = Linear(n_in, n_hidden, rng)
        self.fc2 = Linear(n_hidden, n_out, rng, scale=out_scale)

    def __call__(self, x):
        return self.fc2(T.silu(self.fc1(x)))


class LayerNorm(Module):
    def __init__(self, n):
        self.gain = T.parameter(np.ones(n))
        self.bias = T.parameter(np.zeros(n))

    def __call__(self, x):
        return T.layer_norm(x, self.gain, self.bias)
