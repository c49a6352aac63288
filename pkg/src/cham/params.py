"""Named trainable parameters with sharing and census support.

A model component asks the store for a parameter by name; asking twice
for the same name returns the same tensor, which is how layers share
weights (gradients then accumulate across uses through the autodiff
graph). Initialization draws from a stream keyed on (seed, "init",
name), so values do not depend on construction order.

``ShapeStore`` implements the same interface without allocating data:
model builders run against it to produce a parameter census cheaply.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import rng
from .tensor import Tensor, TensorError


def _init_array(gen, init, shape):
    kind = init[0]
    if kind == "zeros":
        return np.zeros(shape)
    if kind == "ones":
        return np.ones(shape)
    if kind == "normal":
        std = init[1]
        return gen.normal(0.0, std, size=shape)
    if kind == "glorot":
        fan_in, fan_out = init[1], init[2]
        limit = math.sqrt(6.0 / (fan_in + fan_out))
        return gen.uniform(-limit, limit, size=shape)
    raise ValueError(f"unknown init spec {init!r}")


@dataclass
class _Entry:
    tensor: Tensor
    uses: int = 1
    decay: bool = False


class ParamStore:
    """Named float64 parameters, their gradients, and sharing metadata."""

    def __init__(self, seed: int):
        self.seed = int(seed)
        self._entries: dict[str, _Entry] = {}

    def param(self, name, shape, init, decay=False) -> Tensor:
        shape = tuple(int(s) for s in shape)
        entry = self._entries.get(name)
        if entry is not None:
            if entry.tensor.shape != shape:
                raise TensorError(
                    f"parameter {name!r} re-requested with shape {shape}, "
                    f"stored {entry.tensor.shape}"
                )
            entry.uses += 1
            return entry.tensor
        gen = rng.stream(self.seed, "init", name)
        t = Tensor(_init_array(gen, init, shape), requires_grad=True, name=name)
        self._entries[name] = _Entry(t, uses=1, decay=bool(decay))
        return t

    def names(self):
        return sorted(self._entries)

    def get(self, name) -> Tensor:
        return self._entries[name].tensor

    def items(self):
        for name in self.names():
            yield name, self._entries[name].tensor

    def decay_names(self):
        return sorted(n for n, e in self._entries.items() if e.decay)

    def uses(self, name) -> int:
        return self._entries[name].uses

    def zero_grads(self):
        for e in self._entries.values():
            e.tensor.grad = None

    def load_values(self, values: dict[str, np.ndarray]):
        """Overwrite parameter data in place (checkpoint restore)."""
        missing = set(self._entries) - set(values)
        extra = set(values) - set(self._entries)
        if missing or extra:
            raise TensorError(
                f"parameter set mismatch: missing {sorted(missing)}, "
                f"unexpected {sorted(extra)}"
            )
        for name, arr in values.items():
            t = self._entries[name].tensor
            arr = np.asarray(arr, dtype=np.float64)
            if arr.shape != t.shape:
                raise TensorError(
                    f"checkpoint shape {arr.shape} for {name!r}, model has {t.shape}"
                )
            t.data = arr.copy()


class _ShapeHandle:
    """Stands in for a Tensor during shape-only model builds."""

    __slots__ = ("name", "shape")

    def __init__(self, name, shape):
        self.name = name
        self.shape = shape


class ShapeStore:
    """Records parameter names/shapes without allocating any data."""

    def __init__(self, seed: int = 0):
        self.seed = seed
        self.shapes: dict[str, tuple] = {}
        self._uses: dict[str, int] = {}
        self._decay: set[str] = set()

    def param(self, name, shape, init, decay=False):
        shape = tuple(int(s) for s in shape)
        if name in self.shapes:
            if self.shapes[name] != shape:
                raise TensorError(
                    f"parameter {name!r} re-requested with shape {shape}, "
                    f"stored {self.shapes[name]}"
                )
            self._uses[name] += 1
        else:
            self.shapes[name] = shape
            self._uses[name] = 1
            if decay:
                self._decay.add(name)
        return _ShapeHandle(name, shape)

    def names(self):
        return sorted(self.shapes)

    def uses(self, name):
        return self._uses[name]

    def decay_names(self):
        return sorted(self._decay)


@dataclass
class Census:
    """Parameter counts, split by top-level module and by sharing."""

    unique_total: int = 0
    with_reuse_total: int = 0
    per_module: dict = field(default_factory=dict)
    per_name: dict = field(default_factory=dict)

    def module(self, name):
        return self.per_module.get(name, 0)


def census(store) -> Census:
    """Count parameters in a ParamStore or ShapeStore.

    ``unique_total`` counts each stored tensor once; ``with_reuse_total``
    multiplies by the number of times layers requested it, so the gap is
    exactly the size of the shared tensors times their extra uses.
    """
    c = Census()
    for name in store.names():
        shape = store.shapes[name] if isinstance(store, ShapeStore) else store.get(name).shape
        n = int(np.prod(shape, dtype=np.int64)) if shape else 1
        uses = store.uses(name)
        c.unique_total += n
        c.with_reuse_total += n * uses
        module = name.split("/", 1)[0]
        c.per_module[module] = c.per_module.get(module, 0) + n
        c.per_name[name] = (shape, n, uses)
    return c
