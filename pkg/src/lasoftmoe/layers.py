"""Parameter containers shared by the MoE and encoder modules."""

from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from .tensor import Tensor, gelu, layer_norm, parameter, rng


class Module:
    """Anything holding parameters as attributes, directly or via child modules."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, value in vars(self).items():
            name = f"{prefix}{key}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(name + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")

    def parameters(self) -> dict[str, Tensor]:
        return dict(self.named_parameters())

    def load_parameters(self, values: dict[str, np.ndarray], strict: bool = True) -> None:
        params = self.parameters()
        if strict:
            missing = set(params) - set(values)
            extra = set(values) - set(params)
            if missing or extra:
                raise KeyError(f"checkpoint mismatch: missing={sorted(missing)} unexpected={sorted(extra)}")
        for name, t in params.items():
            if name in values:
                if values[name].shape != t.shape:
                    raise ValueError(f"{name}: checkpoint shape {values[name].shape} != {t.shape}")
                t.data[...] = values[name]

    def zero_grad(self) -> None:
        for p in self.parameters().values():
            p.grad = None

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters().values())


class Linear(Module):
    """Affine map ``x @ weight + bias`` with weight stored as (in, out)."""

    def __init__(self, d_in: int, d_out: int, seed: int, stream: str, bias: bool = True, zero: bool = False):
        bound = 1.0 / math.sqrt(d_in)
        if zero:
            w = np.zeros((d_in, d_out))
        else:
            w = rng(seed, stream, "weight").uniform(-bound, bound, size=(d_in, d_out))
        self.weight = parameter(w)
        self.bias = parameter(np.zeros(d_out)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = x @ self.weight
        return y + self.bias if self.bias is not None else y


class FeedForward(Module):
    """affine(d -> hidden) -> GELU -> affine(hidden -> d)."""

    def __init__(self, d: int, hidden: int, seed: int, stream: str):
        self.fc1 = Linear(d, hidden, seed, stream + ".fc1")
        self.fc2 = Linear(hidden, d, seed, stream + ".fc2")

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(gelu(self.fc1(x)))


class LayerNorm(Module):
    def __init__(self, d: int, eps: float = 1e-5):
        self.gain = parameter(np.ones(d))
        self.bias = parameter(np.zeros(d))
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.gain, self.bias, self.eps)


def swap_last(x: Tensor) -> Tensor:
    axes = list(range(x.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return x.transpose(axes)
