"""Parameter containers and the small layers built on the primitives."""
from __future__ import annotations

from contextlib import contextmanager
from typing import Iterator

import numpy as np

from . import ops
from .array import DiffArray, get_default_dtype


def parameter(data) -> DiffArray:
    return DiffArray(np.asarray(data, dtype=get_default_dtype()), requires_grad=True)


def he_normal(rng: np.random.Generator, shape, fan_in: int) -> DiffArray:
    return parameter(rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape))


def xavier_uniform(rng: np.random.Generator, shape, fan_in: int, fan_out: int) -> DiffArray:
    lim = np.sqrt(6.0 / (fan_in + fan_out))
    return parameter(rng.uniform(-lim, lim, size=shape))


class Module:
    """Anything holding ``DiffArray`` parameters or child modules.

    Every public ``DiffArray`` attribute is a parameter; a parameter with
    ``requires_grad=False`` is frozen but still saved and loaded.

    Parameters are discovered by walking instance attributes in definition
    order, so names are stable: ``"stages.0.conv.weight"``.
    """

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, DiffArray]]:
        for name, value in vars(self).items():
            if name.startswith("_"):
                continue
            full = f"{prefix}{name}"
            if isinstance(value, DiffArray):
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")
                    elif isinstance(item, DiffArray):
                        yield f"{full}.{i}", item

    def parameters(self) -> list[DiffArray]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = set(own) - set(state)
        extra = set(state) - set(own)
        if missing or extra:
            raise KeyError(f"state mismatch; missing={sorted(missing)} unexpected={sorted(extra)}")
        for k, p in own.items():
            if tuple(state[k].shape) != p.shape:
                raise ValueError(f"{k}: shape {tuple(state[k].shape)} != {p.shape}")
            p.data = np.array(state[k], dtype=p.dtype, copy=True)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())


@contextmanager
def frozen(*modules: Module):
    """Temporarily stop recording gradients for the modules' parameters."""
    params = [p for m in modules for p in m.parameters()]
    states = [p.requires_grad for p in params]
    for p in params:
        p.requires_grad = False
    try:
        yield
    finally:
        for p, s in zip(params, states):
            p.requires_grad = s


class Linear(Module):
    def __init__(self, rng: np.random.Generator, d_in: int, d_out: int, bias: bool = True):
        self.weight = xavier_uniform(rng, (d_in, d_out), d_in, d_out)
        self.bias = parameter(np.zeros(d_out)) if bias else None

    def __call__(self, x: DiffArray) -> DiffArray:
        y = ops.matmul(x, self.weight)
        return y if self.bias is None else ops.add(y, self.bias)


class Conv2d(Module):
    def __init__(self, rng: np.random.Generator, c_in: int, c_out: int, kernel: int = 3,
                 stride: int = 1, padding: int | None = None, bias: bool = True):
        self.weight = he_normal(rng, (c_out, c_in, kernel, kernel), c_in * kernel * kernel)
        self.bias = parameter(np.zeros(c_out)) if bias else None
        self._stride = stride
        self._padding = kernel // 2 if padding is None else padding

    def __call__(self, x: DiffArray) -> DiffArray:
        return ops.conv2d(x, self.weight, self.bias, stride=self._stride, padding=self._padding)


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        self.gain = parameter(np.ones(dim))
        self.bias = parameter(np.zeros(dim))
        self._eps = eps

    def __call__(self, x: DiffArray) -> DiffArray:
        return ops.add(ops.mul(ops.layer_norm(x, -1, self._eps), self.gain), self.bias)


class Embedding(Module):
    def __init__(self, rng: np.random.Generator, num: int, dim: int):
        self.table = parameter(rng.normal(0.0, dim ** -0.5, size=(num, dim)))

    def __call__(self, ids) -> DiffArray:
        return ops.embedding_lookup(self.table, ids)
