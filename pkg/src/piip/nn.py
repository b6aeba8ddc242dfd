"""Minimal module tree: named parameters, deterministic initialisers, small layers."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from . import numerics as nx
from .numerics import Tensor


class Parameter(Tensor):
    """A trainable leaf tensor."""

    __slots__ = ()

    def __init__(self, data, dtype=None):
        super().__init__(data, requires_grad=True, dtype=dtype)


class Module:
    """Container that registers :class:`Parameter` and child :class:`Module` attributes in order."""

    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_children", {})

    def __setattr__(self, name, value):
        if isinstance(value, Parameter):
            self._params[name] = value
        elif isinstance(value, Module):
            self._children[name] = value
        object.__setattr__(self, name, value)

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for name, p in self._params.items():
            yield prefix + name, p
        for name, child in self._children.items():
            yield from child.named_parameters(f"{prefix}{name}.")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: p.data for k, p in self.named_parameters()}

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def astype(self, dtype) -> "Module":
        """Cast every parameter in place (e.g. to float64 for gradient checks)."""
        for p in self.parameters():
            p.data = p.data.astype(dtype)
            p.grad = None
        return self

    @property
    def dtype(self):
        for p in self.parameters():
            return p.dtype
        return np.dtype(np.float32)


class ModuleList(Module):
    def __init__(self, modules=()):
        super().__init__()
        self._items: list = []
        for m in modules:
            self.append(m)

    def append(self, module: Module) -> None:
        setattr(self, str(len(self._items)), module)
        self._items.append(module)

    def __iter__(self):
        return iter(self._items)

    def __len__(self) -> int:
        return len(self._items)

    def __getitem__(self, i):
        return self._items[i]


class ModuleDict(Module):
    def __init__(self):
        super().__init__()
        self._items: dict = {}

    def __setitem__(self, key: str, module: Module) -> None:
        setattr(self, key, module)
        self._items[key] = module

    def __getitem__(self, key: str):
        return self._items[key]

    def __contains__(self, key) -> bool:
        return key in self._items

    def keys(self):
        return self._items.keys()

    def items(self):
        return self._items.items()


class Init:
    """Seeded initialisers shared by every layer built for one model."""

    def __init__(self, seed: int, dtype=np.float32, std: float = 0.02):
        self.rng = np.random.default_rng(seed)
        self.dtype = np.dtype(dtype)
        self.std = std

    def trunc_normal(self, *shape: int) -> Parameter:
        # resample anything beyond two standard deviations
        x = self.rng.standard_normal(shape)
        bad = np.abs(x) > 2.0
        while bad.any():
            x[bad] = self.rng.standard_normal(int(bad.sum()))
            bad = np.abs(x) > 2.0
        return Parameter(x * self.std, dtype=self.dtype)

    def zeros(self, *shape: int) -> Parameter:
        return Parameter(np.zeros(shape), dtype=self.dtype)

    def ones(self, *shape: int) -> Parameter:
        return Parameter(np.ones(shape), dtype=self.dtype)

    def full(self, value: float, *shape: int) -> Parameter:
        return Parameter(np.full(shape, value), dtype=self.dtype)


class ShapeInit(Init):
    """Uninitialised storage for every tensor: enumerates shapes of very large
    models without touching (and so without committing) their memory."""

    def __init__(self, dtype=np.float32):
        super().__init__(0, dtype)

    def _empty(self, *shape: int) -> Parameter:
        return Parameter(np.empty(shape, dtype=self.dtype))

    trunc_normal = zeros = ones = _empty

    def full(self, value: float, *shape: int) -> Parameter:
        return self._empty(*shape)


class Linear(Module):
    """``y = x @ weight + bias`` with ``weight`` shaped ``[in, out]``."""

    def __init__(self, init: Init, d_in: int, d_out: int, bias: bool = True, zero: bool = False):
        super().__init__()
        self.weight = init.zeros(d_in, d_out) if zero else init.trunc_normal(d_in, d_out)
        if bias:
            self.bias = init.zeros(d_out)
        else:
            self.bias = None

    def __call__(self, x: Tensor) -> Tensor:
        return nx.linear(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, init: Init, dim: int, eps: float = 1e-6):
        super().__init__()
        self.weight = init.ones(dim)
        self.bias = init.zeros(dim)
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return nx.layer_norm(x, self.weight, self.bias, self.eps)


class GroupNorm(Module):
    def __init__(self, init: Init, groups: int, channels: int, eps: float = 1e-5):
        super().__init__()
        self.groups = groups
        self.weight = init.ones(channels)
        self.bias = init.zeros(channels)
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return nx.group_norm(x, self.groups, self.weight, self.bias, self.eps)


class Conv2d(Module):
    def __init__(self, init: Init, c_in: int, c_out: int, kernel: int, padding: int = 0):
        super().__init__()
        self.weight = init.trunc_normal(c_out, c_in, kernel, kernel)
        self.bias = init.zeros(c_out)
        self.padding = padding

    def __call__(self, x: Tensor) -> Tensor:
        return nx.conv2d(x, self.weight, self.bias, padding=self.padding)


def num_groups(channels: int, preferred: int = 32) -> int:
    """Largest divisor of ``channels`` not exceeding ``preferred``."""
    g = min(preferred, channels)
    while channels % g:
        g -= 1
    return g
