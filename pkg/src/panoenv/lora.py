"""Low-rank adapters on frozen dense weights: W = W0 + scale * B @ A."""

from __future__ import annotations

import copy
import os
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from . import checkpoint
from .autodiff import NumericError, Tensor
from .diffusion import Generator, denoise_loss

ATTENTION_TARGETS = ("q", "k", "v", "out")
ALL_TARGETS = (*ATTENTION_TARGETS, "cond", "text")


@dataclass
class LoraLayer:
    base: Tensor  # frozen (m, n)
    A: Tensor  # (r, n)
    B: Tensor  # (m, r)
    scale: float = 1.0

    @property
    def rank(self) -> int:
        return self.A.shape[0]

    @property
    def shape(self) -> tuple[int, int]:
        return self.base.shape

    def num_trainable(self) -> int:
        m, n = self.shape
        return self.rank * (m + n)

    def __call__(self, h: Tensor) -> Tensor:
        return lora_forward(self, h)


def make_layer(base: Tensor, rank: int, rng: np.random.Generator, alpha: float | None = None) -> LoraLayer:
    m, n = base.shape
    if rank < 1 or rank > min(m, n):
        raise ValueError(f"rank {rank} invalid for a {m}x{n} matrix")
    base.requires_grad = False
    base.grad = None
    A = ad.parameter(rng.normal(0.0, np.sqrt(1.0 / rank), size=(rank, n)))
    B = ad.parameter(np.zeros((m, rank)))
    alpha = float(rank) if alpha is None else alpha
    return LoraLayer(base, A, B, alpha / rank)


def lora_forward(layer: LoraLayer, h) -> Tensor:
    """``W0 h + scale * B (A h)``. Rows of ``h`` are inputs; a 1-D ``h`` is one column."""
    h = ad.tensor(h)
    n = layer.shape[1]
    if h.shape[-1] != n:
        raise ValueError(f"input width {h.shape[-1]} != adapter input width {n}")
    vec = h.ndim == 1
    x = ad.reshape(h, (1, n)) if vec else h
    y = ad.matmul(x, ad.transpose(layer.base))
    delta = ad.matmul(ad.matmul(x, ad.transpose(layer.A)), ad.transpose(layer.B))
    y = ad.add(y, ad.mul(delta, layer.scale))
    return ad.reshape(y, (layer.shape[0],)) if vec else y


def merge(layer: LoraLayer) -> np.ndarray:
    return layer.base.data + layer.scale * (layer.B.data @ layer.A.data)


@dataclass
class AdaptationConfig:
    """Adapter hyper-parameters.

    The reference recipe trains rank-64 adapters with a constant learning rate
    of 1e-7, batch 8, for 40k iterations on a billion-parameter model. The
    desk-scale default learning rate is 1e-3 because the toy denoiser's
    gradients are many orders of magnitude larger relative to its weights.
    """

    rank: int = 64
    alpha: float | None = None
    target_matrices: frozenset[str] = frozenset(ALL_TARGETS)
    lr: float = 1e-3
    iterations: int = 1000
    batch_size: int = 8
    optimizer: str = "sgd"

    def __post_init__(self):
        self.target_matrices = frozenset(self.target_matrices)
        if self.rank < 1:
            raise ValueError("rank must be >= 1")
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        unknown = self.target_matrices - set(ALL_TARGETS)
        if unknown:
            raise ValueError(f"unknown adapter targets: {sorted(unknown)}")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError("optimizer must be 'sgd' or 'adam'")


def _target_names(gen: Generator, targets) -> list[tuple[str, str]]:
    out = []
    for tgt in sorted(targets):
        if tgt in ATTENTION_TARGETS:
            out += [("denoiser", f"blocks.{i}.{tgt}.W") for i in range(gen.denoiser.n_blocks)]
        elif tgt == "cond":
            out.append(("denoiser", "cond.W"))
        elif tgt == "text":
            if not gen.text.has_projection:
                raise ValueError("text encoder has no projection to adapt")
            out.append(("text", "proj.W"))
        else:
            raise ValueError(f"unknown adapter target {tgt!r}")
    return out


def attach(gen: Generator, cfg: AdaptationConfig, rng: np.random.Generator) -> Generator:
    """Copy of ``gen`` with every base weight frozen and adapters on the target matrices."""
    names = _target_names(gen, cfg.target_matrices)
    adapted = copy.deepcopy(gen)
    for module in adapted.modules().values():
        module.freeze()
        module.adapters = {}
    mods = adapted.modules()
    for mod_name, pname in names:
        module = mods[mod_name]
        module.adapters[pname] = make_layer(module.params[pname], cfg.rank, rng, cfg.alpha)
    return adapted


def layers(gen: Generator) -> dict[str, LoraLayer]:
    return {
        f"{mod_name}.{pname}": layer
        for mod_name, module in sorted(gen.modules().items())
        for pname, layer in sorted(module.adapters.items())
        if isinstance(layer, LoraLayer)
    }


def adapter_params(gen: Generator) -> list[Tensor]:
    return [t for layer in layers(gen).values() for t in (layer.A, layer.B)]


def trainable_param_count(gen: Generator) -> int:
    return sum(layer.num_trainable() for layer in layers(gen).values())


def adapter_state(gen: Generator) -> dict[str, np.ndarray]:
    state = {}
    for key, layer in layers(gen).items():
        state[f"lora.{key}.A"] = layer.A.data.copy()
        state[f"lora.{key}.B"] = layer.B.data.copy()
        state[f"lora.{key}.scale"] = np.array([layer.scale])
    return state


def save_adapter(path: str | os.PathLike, gen: Generator) -> None:
    checkpoint.save(path, adapter_state(gen))


def apply_adapter_state(gen: Generator, state: dict[str, np.ndarray]) -> Generator:
    """Copy of ``gen`` (base, unadapted) with adapters rebuilt from a saved adapter state."""
    adapted = copy.deepcopy(gen)
    mods = adapted.modules()
    for module in mods.values():
        module.freeze()
        module.adapters = {}
    keys = sorted({k[len("lora.") : -len(".A")] for k in state if k.endswith(".A")})
    for key in keys:
        mod_name, _, pname = key.partition(".")
        if mod_name not in mods or pname not in mods[mod_name].params:
            raise checkpoint.FormatError(f"adapter targets unknown matrix {key!r}")
        base = mods[mod_name].params[pname]
        A, B = state[f"lora.{key}.A"], state[f"lora.{key}.B"]
        if B.shape[0] != base.shape[0] or A.shape[1] != base.shape[1] or A.shape[0] != B.shape[1]:
            raise checkpoint.FormatError(f"adapter shapes for {key} do not fit the base matrix")
        scale = float(state.get(f"lora.{key}.scale", np.array([1.0]))[0])
        mods[mod_name].adapters[pname] = LoraLayer(base, ad.parameter(A), ad.parameter(B), scale)
    return adapted


def load_adapter(path: str | os.PathLike, gen: Generator) -> Generator:
    return apply_adapter_state(gen, checkpoint.load(path))


def merge_generator(gen: Generator) -> Generator:
    """Fold every adapter into its base weight; the result has no adapters."""
    merged = copy.deepcopy(gen)
    for module in merged.modules().values():
        for pname, layer in list(module.adapters.items()):
            module.params[pname] = ad.tensor(merge(layer))
        module.adapters = {}
    return merged


@dataclass
class AdaptationResult:
    generator: Generator
    losses: list[float] = field(default_factory=list)

    def adapter_state(self) -> dict[str, np.ndarray]:
        return adapter_state(self.generator)


def adapt_generator(
    gen: Generator,
    dataset: Sequence[tuple[np.ndarray, Sequence[str]]],
    cfg: AdaptationConfig,
    rng: np.random.Generator,
    on_step: Callable[[int, float], None] | None = None,
) -> AdaptationResult:
    """Train adapters on (image, caption) pairs with the noise-prediction loss.

    Only adapter matrices move; if ``gen`` carries no adapters yet they are
    attached first.
    """
    if len(dataset) == 0:
        raise ValueError("adaptation dataset is empty")
    adapted = gen if layers(gen) else attach(gen, cfg, rng)
    params = adapter_params(adapted)
    opt = ad.Adam(params, lr=cfg.lr) if cfg.optimizer == "adam" else None
    result = AdaptationResult(adapted)
    for it in range(cfg.iterations):
        idx = rng.integers(0, len(dataset), size=cfg.batch_size)
        images = np.stack([dataset[i][0] for i in idx])
        captions = [dataset[i][1] for i in idx]
        try:
            cond = adapted.text.encode_batch(captions)
            loss = denoise_loss(adapted.denoiser, adapted.codec, (images, cond), adapted.schedule, rng)
            ad.backward(loss)
            if opt is not None:
                opt.step()
            else:
                ad.sgd_step(params, [p.grad for p in params], cfg.lr)
        except NumericError as exc:
            raise NumericError(f"adaptation diverged at iteration {it}: {exc}") from exc
        ad.zero_grad(params)
        value = loss.item()
        result.losses.append(value)
        if on_step is not None:
            on_step(it, value)
    return result


def base_parameters(gen: Generator) -> dict[str, np.ndarray]:
    out = {}
    for mod_name, module in gen.modules().items():
        for k, v in module.params.items():
            out[f"{mod_name}.{k}"] = v.data
    return out


__all__ = [
    "LoraLayer",
    "AdaptationConfig",
    "AdaptationResult",
    "attach",
    "lora_forward",
    "merge",
    "merge_generator",
    "adapt_generator",
    "trainable_param_count",
    "adapter_state",
    "save_adapter",
    "load_adapter",
    "apply_adapter_state",
]
