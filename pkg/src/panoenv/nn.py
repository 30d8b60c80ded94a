"""Parameter containers shared by the denoiser, text encoder and agent."""

from __future__ import annotations

from typing import Callable, Iterator

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


class Module:
    """Holds named parameters plus optional low-rank adapters keyed by parameter name.

    Dense weights are stored ``(out, in)`` and applied as ``x @ W.T``. When an
    adapter is registered for a weight name, :meth:`dense` routes through it
    instead of the raw weight.
    """

    def __init__(self) -> None:
        self.params: dict[str, Tensor] = {}
        self.adapters: dict[str, Callable[[Tensor], Tensor]] = {}

    def add_param(self, name: str, value: np.ndarray) -> Tensor:
        t = ad.parameter(value, name=name)
        self.params[name] = t
        return t

    def dense(self, name: str, x: Tensor, bias: str | None = None) -> Tensor:
        adapter = self.adapters.get(name)
        if adapter is not None:
            y = adapter(x)
        else:
            y = ad.matmul(x, ad.transpose(self.params[name]))
        if bias is not None:
            y = ad.add(y, ad.expand(self.params[bias], y.shape))
        return y

    def trainable(self) -> list[Tensor]:
        return [p for _, p in sorted(self.params.items()) if p.requires_grad]

    def named_trainable(self) -> Iterator[tuple[str, Tensor]]:
        for name, p in sorted(self.params.items()):
            if p.requires_grad:
                yield name, p

    def freeze(self) -> None:
        for p in self.params.values():
            p.requires_grad = False
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray], strict: bool = True) -> None:
        missing = set(self.params) - set(state)
        if strict and missing:
            raise KeyError(f"missing parameters: {sorted(missing)}")
        for k, v in state.items():
            if k not in self.params:
                if strict:
                    raise KeyError(f"unexpected parameter {k!r}")
                continue
            if self.params[k].shape != v.shape:
                raise ValueError(f"shape mismatch for {k}: {v.shape} vs {self.params[k].shape}")
            self.params[k].data = np.array(v, dtype=np.float64, copy=True)


def glorot(rng: np.random.Generator, out_dim: int, in_dim: int, gain: float = 1.0) -> np.ndarray:
    scale = gain * np.sqrt(2.0 / (in_dim + out_dim))
    return rng.normal(0.0, scale, size=(out_dim, in_dim))
