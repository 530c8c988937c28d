"""Parameter registry, AdamW with decoupled weight decay, linear LR schedule."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Iterable, Iterator

import numpy as np

from .tensor import Tensor


class ParameterStore:
    """Flat, name-addressed registry of every model array.

    Only names in ``trainable`` carry ``requires_grad`` and are touched by the
    optimizer.
    """

    def __init__(self, params: dict[str, np.ndarray] | None = None):
        self._params: dict[str, Tensor] = {}
        self.trainable: frozenset[str] = frozenset()
        for name, arr in (params or {}).items():
            self.add(name, arr)

    def add(self, name: str, arr) -> Tensor:
        if name in self._params:
            raise KeyError(f"duplicate parameter name {name!r}")
        t = Tensor(np.array(arr, dtype=np.float64, copy=True))
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self) -> Iterator[str]:
        return iter(sorted(self._params))

    def __len__(self) -> int:
        return len(self._params)

    def names(self, prefix: str = "") -> list[str]:
        return [n for n in sorted(self._params) if n.startswith(prefix)]

    def items(self):
        for n in sorted(self._params):
            yield n, self._params[n]

    def remove(self, name: str) -> None:
        del self._params[name]
        self.trainable = self.trainable - {name}

    def set_trainable(self, names: Iterable[str]) -> None:
        names = frozenset(names)
        missing = names - self._params.keys()
        if missing:
            raise KeyError(f"unknown parameters: {sorted(missing)}")
        self.trainable = names
        for n, t in self._params.items():
            t.requires_grad = n in names
            t.grad = np.zeros_like(t.data) if n in names else None

    def zero_grad(self) -> None:
        for n in self.trainable:
            self._params[n].grad = np.zeros_like(self._params[n].data)

    def count(self, names: Iterable[str] | None = None) -> int:
        names = self._params.keys() if names is None else names
        return sum(self._params[n].size for n in names)

    def state_dict(self) -> dict[str, np.ndarray]:
        return {n: t.data.copy() for n, t in self.items()}

    def load_state_dict(self, arrays: dict[str, np.ndarray], strict: bool = True) -> None:
        for n, arr in arrays.items():
            if n not in self._params:
                if strict:
                    raise KeyError(f"unknown parameter {n!r}")
                continue
            if self._params[n].shape != arr.shape:
                raise ValueError(f"{n}: shape {arr.shape} != {self._params[n].shape}")
            self._params[n].data = np.array(arr, dtype=np.float64, copy=True)

    def digest(self, names: Iterable[str] | None = None) -> str:
        """SHA-256 over (name, shape, raw bytes) of the selected parameters."""
        h = hashlib.sha256()
        for n in sorted(self._params if names is None else names):
            t = self._params[n]
            h.update(n.encode())
            h.update(repr(t.shape).encode())
            h.update(np.ascontiguousarray(t.data).tobytes())
        return h.hexdigest()


@dataclass
class OptimizerState:
    lr: float
    weight_decay: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adamw_step(store: ParameterStore, opt: OptimizerState, lr_scale: float = 1.0) -> None:
    """One AdamW update over the trainable parameters, then zero their grads."""
    for n in sorted(store.trainable):
        if store[n].grad is None:
            raise ValueError(f"no gradient for trainable parameter {n!r}")
    for n in list(opt.m):
        if n not in store.trainable:
            del opt.m[n], opt.v[n]
    opt.step += 1
    lr = opt.lr * lr_scale
    bc1 = 1.0 - opt.beta1**opt.step
    bc2 = 1.0 - opt.beta2**opt.step
    for n in sorted(store.trainable):
        p = store[n]
        g = p.grad
        if n not in opt.m:
            opt.m[n] = np.zeros_like(p.data)
            opt.v[n] = np.zeros_like(p.data)
        m, v = opt.m[n], opt.v[n]
        m *= opt.beta1
        m += (1.0 - opt.beta1) * g
        v *= opt.beta2
        g *= g
        g *= 1.0 - opt.beta2
        v += g
        if opt.weight_decay:
            p.data *= 1.0 - lr * opt.weight_decay
        denom = np.sqrt(v * (1.0 / bc2))
        denom += opt.eps
        p.data -= (lr / bc1) * m / denom
        g.fill(0.0)


@dataclass(frozen=True)
class ScheduleConfig:
    total_steps: int
    warmup_steps: int = 0

    def __post_init__(self):
        if self.total_steps < 1:
            raise ValueError("total_steps must be positive")
        if not 0 <= self.warmup_steps <= self.total_steps:
            raise ValueError("need 0 <= warmup_steps <= total_steps")


def lr_at(step: int, sched: ScheduleConfig) -> float:
    """Linear warmup from 0 to 1, then linear decay to 0 at ``total_steps``.

    Steps past the end clamp to 0.
    """
    if step >= sched.total_steps:
        return 0.0
    if step < sched.warmup_steps:
        return step / sched.warmup_steps
    return (sched.total_steps - step) / (sched.total_steps - sched.warmup_steps)
