"""Toy latent diffusion: schedule, forward noising, epsilon denoiser and samplers."""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import autodiff as ad
from . import checkpoint
from .autodiff import Tensor
from .conditioning import TextEncoder, Vocabulary, default_vocabulary
from .nn import Module, glorot

DEFAULT_T = 100
DEFAULT_BETA = (1e-4, 0.02)


@dataclass(frozen=True)
class NoiseSchedule:
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray

    @property
    def T(self) -> int:
        return len(self.beta)


def make_schedule(T: int = DEFAULT_T, beta_start: float = DEFAULT_BETA[0], beta_end: float = DEFAULT_BETA[1]) -> NoiseSchedule:
    """Linear beta schedule with ``alpha = 1 - beta`` and ``alpha_bar = cumprod(alpha)``."""
    if T < 1:
        raise ValueError("T must be at least 1")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ValueError("need 0 < beta_start <= beta_end < 1")
    beta = np.linspace(beta_start, beta_end, T) if T > 1 else np.array([beta_start])
    alpha = 1.0 - beta
    return NoiseSchedule(beta=beta, alpha=alpha, alpha_bar=np.cumprod(alpha))


def schedule_from_betas(betas) -> NoiseSchedule:
    beta = np.asarray(betas, dtype=np.float64)
    if beta.ndim != 1 or beta.size == 0 or np.any(beta <= 0) or np.any(beta >= 1):
        raise ValueError("betas must be a nonempty vector in (0, 1)")
    alpha = 1.0 - beta
    return NoiseSchedule(beta=beta, alpha=alpha, alpha_bar=np.cumprod(alpha))


@dataclass(frozen=True)
class LatentCodec:
    """Image <-> latent map. Only the identity codec exists at this scale."""

    mode: str = "identity"

    def __post_init__(self):
        if self.mode != "identity":
            raise ValueError(f"unsupported codec mode {self.mode!r}")

    def encode(self, x: np.ndarray) -> np.ndarray:
        return np.asarray(x, dtype=np.float64)

    def decode(self, z: np.ndarray) -> np.ndarray:
        return np.asarray(z, dtype=np.float64)


@dataclass(frozen=True)
class NoisedSample:
    z_t: np.ndarray
    t: int
    eps: np.ndarray


def forward_noise(z0, t: int, eps, schedule: NoiseSchedule) -> NoisedSample:
    z0 = np.asarray(z0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if z0.shape != eps.shape:
        raise ValueError(f"noise shape {eps.shape} != latent shape {z0.shape}")
    if not 0 <= t < schedule.T:
        raise ValueError(f"step {t} outside [0, {schedule.T})")
    ab = schedule.alpha_bar[t]
    return NoisedSample(np.sqrt(ab) * z0 + np.sqrt(1.0 - ab) * eps, t, eps)


class DenoiserModel(Module):
    """Epsilon predictor over flattened image patches.

    Each block is a single-head self-attention layer followed by a GELU
    feed-forward layer, both residual. The sum of a time embedding row and a
    projected text vector is added at the input; the text vector is re-added at
    every block input.
    """

    def __init__(
        self,
        image_size: int = 8,
        channels: int = 3,
        patch: int = 2,
        width: int = 64,
        blocks: int = 2,
        T: int = DEFAULT_T,
        cond_dim: int = 64,
        seed: int = 0,
    ):
        super().__init__()
        if image_size % patch:
            raise ValueError("image_size must be a multiple of patch")
        self.image_size, self.channels, self.patch = image_size, channels, patch
        self.width, self.n_blocks, self.T, self.cond_dim = width, blocks, T, cond_dim
        self.n_tokens = (image_size // patch) ** 2
        pdim = patch * patch * channels
        rng = np.random.default_rng(seed)
        d = width
        self.add_param("patch_in.W", glorot(rng, d, pdim))
        self.add_param("patch_in.b", np.zeros(d))
        self.add_param("pos", rng.normal(0.0, 0.1, size=(self.n_tokens, d)))
        self.add_param("time", _sinusoidal(T, d))
        self.add_param("cond.W", glorot(rng, d, cond_dim))
        for i in range(blocks):
            for m in ("q", "k", "v", "out"):
                self.add_param(f"blocks.{i}.{m}.W", glorot(rng, d, d))
            self.add_param(f"blocks.{i}.ff1.W", glorot(rng, 2 * d, d))
            self.add_param(f"blocks.{i}.ff1.b", np.zeros(2 * d))
            self.add_param(f"blocks.{i}.ff2.W", glorot(rng, d, 2 * d, gain=0.5))
            self.add_param(f"blocks.{i}.ff2.b", np.zeros(d))
        self.add_param("head.W", glorot(rng, pdim, d, gain=0.5))
        self.add_param("head.b", np.zeros(pdim))

    @property
    def latent_shape(self) -> tuple[int, int, int]:
        return (self.image_size, self.image_size, self.channels)

    def config(self) -> dict[str, int]:
        return {
            "image_size": self.image_size,
            "channels": self.channels,
            "patch": self.patch,
            "width": self.width,
            "blocks": self.n_blocks,
            "T": self.T,
            "cond_dim": self.cond_dim,
        }

    def _patchify(self, z: Tensor) -> Tensor:
        B = z.shape[0]
        g, P, C = self.image_size // self.patch, self.patch, self.channels
        x = ad.reshape(z, (B, g, P, g, P, C))
        x = ad.transpose(x, (0, 1, 3, 2, 4, 5))
        return ad.reshape(x, (B * g * g, P * P * C))

    def _unpatchify(self, x: Tensor, B: int) -> Tensor:
        g, P, C = self.image_size // self.patch, self.patch, self.channels
        x = ad.reshape(x, (B, g, g, P, P, C))
        x = ad.transpose(x, (0, 1, 3, 2, 4, 5))
        return ad.reshape(x, (B, self.image_size, self.image_size, C))

    def __call__(self, z, t, cond) -> Tensor:
        z = ad.tensor(z)
        single = z.ndim == 3
        if single:
            z = ad.reshape(z, (1, *z.shape))
        if tuple(z.shape[1:]) != self.latent_shape:
            raise ValueError(f"latent shape {z.shape[1:]} != model shape {self.latent_shape}")
        B, n, d = z.shape[0], self.n_tokens, self.width
        t_ids = np.broadcast_to(np.asarray(t, dtype=np.int64), (B,))
        if np.any(t_ids < 0) or np.any(t_ids >= self.T):
            raise ValueError("time step outside the model's embedding table")
        cond = ad.tensor(cond)
        if cond.ndim == 1:
            cond = ad.expand(ad.reshape(cond, (1, cond.shape[0])), (B, cond.shape[0]))
        if cond.shape != (B, self.cond_dim):
            raise ValueError(f"conditioning shape {cond.shape} != {(B, self.cond_dim)}")

        h = self.dense("patch_in.W", self._patchify(z), bias="patch_in.b")
        h = ad.reshape(h, (B, n, d))
        h = h + ad.expand(self.params["pos"], (B, n, d))
        h = h + ad.expand(ad.reshape(ad.take(self.params["time"], t_ids), (B, 1, d)), (B, n, d))
        c = ad.expand(ad.reshape(self.dense("cond.W", cond), (B, 1, d)), (B, n, d))
        scale = 1.0 / np.sqrt(d)
        for i in range(self.n_blocks):
            h = h + c
            flat = ad.reshape(h, (B * n, d))
            q = ad.reshape(self.dense(f"blocks.{i}.q.W", flat), (B, n, d))
            k = ad.reshape(self.dense(f"blocks.{i}.k.W", flat), (B, n, d))
            v = ad.reshape(self.dense(f"blocks.{i}.v.W", flat), (B, n, d))
            att = ad.softmax(ad.matmul(q, ad.transpose(k, (0, 2, 1))) * scale, axis=-1)
            mixed = ad.reshape(ad.matmul(att, v), (B * n, d))
            h = h + ad.reshape(self.dense(f"blocks.{i}.out.W", mixed), (B, n, d))
            flat = ad.reshape(h, (B * n, d))
            ff = ad.gelu(self.dense(f"blocks.{i}.ff1.W", flat, bias=f"blocks.{i}.ff1.b"))
            ff = self.dense(f"blocks.{i}.ff2.W", ff, bias=f"blocks.{i}.ff2.b")
            h = h + ad.reshape(ff, (B, n, d))
        out = self.dense("head.W", ad.reshape(h, (B * n, d)), bias="head.b")
        out = self._unpatchify(out, B)
        return ad.reshape(out, self.latent_shape) if single else out


def _sinusoidal(T: int, d: int) -> np.ndarray:
    pos = np.arange(T)[:, None]
    freq = np.exp(-np.log(10000.0) * (np.arange(0, d, 2) / d))[None, :]
    table = np.zeros((T, d))
    table[:, 0::2] = np.sin(pos * freq)
    table[:, 1::2] = np.cos(pos * freq)[:, : d // 2]
    return 0.5 * table


EpsModel = Callable[[np.ndarray, np.ndarray, object], Tensor]


def denoise_loss(
    model: EpsModel,
    codec: LatentCodec,
    batch: tuple[np.ndarray, object],
    schedule: NoiseSchedule,
    rng: np.random.Generator,
    t: np.ndarray | None = None,
    eps: np.ndarray | None = None,
) -> Tensor:
    """Mean squared error between drawn noise and the model's prediction of it.

    ``batch`` is ``(images (B,H,W,C), conditioning (B, cond_dim))``. Steps are drawn
    uniformly from ``[0, T)`` and noise from N(0, I) unless given explicitly.
    """
    images, cond = batch
    images = np.asarray(images, dtype=np.float64)
    if images.ndim != 4 or images.shape[0] == 0:
        raise ValueError("denoise_loss needs a nonempty (B, H, W, C) batch")
    B = images.shape[0]
    z0 = codec.encode(images)
    if t is None:
        t = rng.integers(0, schedule.T, size=B)
    t = np.broadcast_to(np.asarray(t, dtype=np.int64), (B,))
    if eps is None:
        eps = rng.standard_normal(z0.shape)
    ab = schedule.alpha_bar[t].reshape(B, 1, 1, 1)
    z_t = np.sqrt(ab) * z0 + np.sqrt(1.0 - ab) * eps
    pred = model(z_t, t, cond)
    diff = ad.sub(pred, ad.tensor(eps))
    return ad.mean(ad.mul(diff, diff))


def train_generator(
    gen: "Generator",
    dataset,
    iterations: int,
    rng: np.random.Generator,
    lr: float = 2e-3,
    batch_size: int = 8,
) -> list[float]:
    """Full-parameter Adam training of denoiser and text encoder; returns the loss trace."""
    if len(dataset) == 0:
        raise ValueError("training dataset is empty")
    params = gen.denoiser.trainable() + gen.text.trainable()
    opt = ad.Adam(params, lr=lr, betas=(0.9, 0.99))
    losses = []
    for _ in range(iterations):
        idx = rng.integers(0, len(dataset), size=batch_size)
        images = np.stack([dataset[i][0] for i in idx])
        cond = gen.text.encode_batch([dataset[i][1] for i in idx])
        loss = denoise_loss(gen.denoiser, gen.codec, (images, cond), gen.schedule, rng)
        ad.backward(loss)
        opt.step()
        opt.zero_grad()
        losses.append(loss.item())
    return losses


def predict_z0(z_t, t: int, eps_hat, schedule: NoiseSchedule) -> np.ndarray:
    """Invert the forward map given a noise estimate."""
    ab = schedule.alpha_bar[t]
    return (np.asarray(z_t) - np.sqrt(1.0 - ab) * np.asarray(eps_hat)) / np.sqrt(ab)


def reverse_mean(z_t, t: int, eps_hat, schedule: NoiseSchedule) -> np.ndarray:
    """Mean of p(z_{t-1} | z_t) under the epsilon parameterisation."""
    b, a, ab = schedule.beta[t], schedule.alpha[t], schedule.alpha_bar[t]
    return (np.asarray(z_t) - (b / np.sqrt(1.0 - ab)) * np.asarray(eps_hat)) / np.sqrt(a)


def _reverse_step(model: EpsModel, schedule: NoiseSchedule, z: np.ndarray, t: int, cond, rng) -> np.ndarray:
    eps_hat = np.asarray(ad.tensor(model(z, np.full(z.shape[0], t), cond)).data)
    b = schedule.beta[t]
    mean = reverse_mean(z, t, eps_hat, schedule)
    if t > 0:
        return mean + np.sqrt(b) * rng.standard_normal(z.shape)
    return mean


def _batched(shape) -> tuple[tuple[int, ...], bool]:
    shape = tuple(int(s) for s in shape)
    if len(shape) == 3:
        return (1, *shape), True
    if len(shape) == 4:
        return shape, False
    raise ValueError("latent shape must be (H, W, C) or (B, H, W, C)")


def sample(model: EpsModel, schedule: NoiseSchedule, shape, conditioning, rng: np.random.Generator) -> np.ndarray:
    """Ancestral sampling from ``t = T-1`` down to 0 with variance ``beta_t`` (none at t = 0)."""
    full, single = _batched(shape)
    z = rng.standard_normal(full)
    with ad.no_grad():
        for t in range(schedule.T - 1, -1, -1):
            z = _reverse_step(model, schedule, z, t, conditioning, rng)
    return z[0] if single else z


def inpaint_sample(model: EpsModel, schedule: NoiseSchedule, source, mask, conditioning, rng: np.random.Generator) -> np.ndarray:
    """Fill ``mask == 1`` pixels; ``mask == 0`` pixels are re-noised from ``source`` each step.

    The result equals ``source`` exactly wherever the mask is 0. With an all-one
    mask the random stream is consumed exactly as :func:`sample` would.
    """
    source = np.asarray(source, dtype=np.float64)
    mask = np.asarray(mask)
    full, single = _batched(source.shape)
    if mask.shape != source.shape[:-1]:
        raise ValueError(f"mask shape {mask.shape} != source spatial shape {source.shape[:-1]}")
    if not np.all((mask == 0) | (mask == 1)):
        raise ValueError("mask must be binary")
    if not mask.any():
        return source.copy()
    src = source.reshape(full)
    known = np.broadcast_to((mask == 0).reshape(*full[:-1], 1), full)
    has_known = bool(known.any())
    z = rng.standard_normal(full)
    with ad.no_grad():
        for t in range(schedule.T - 1, -1, -1):
            if has_known:
                ab = schedule.alpha_bar[t]
                noisy = np.sqrt(ab) * src + np.sqrt(1.0 - ab) * rng.standard_normal(full)
                z = np.where(known, noisy, z)
            z = _reverse_step(model, schedule, z, t, conditioning, rng)
    out = np.where(known, src, z)
    return out[0] if single else out


@dataclass
class Generator:
    """Denoiser, its text encoder, latent codec and noise schedule, bundled."""

    denoiser: DenoiserModel
    text: TextEncoder
    schedule: NoiseSchedule
    codec: LatentCodec = field(default_factory=LatentCodec)

    def condition(self, captions) -> Tensor:
        return self.text.encode_batch(captions)

    def modules(self) -> dict[str, Module]:
        return {"denoiser": self.denoiser, "text": self.text}


def make_generator(
    vocab: Vocabulary | None = None,
    image_size: int = 8,
    channels: int = 3,
    width: int = 64,
    blocks: int = 2,
    T: int = DEFAULT_T,
    beta: tuple[float, float] = DEFAULT_BETA,
    patch: int = 2,
    seed: int = 0,
) -> Generator:
    vocab = vocab or default_vocabulary()
    text = TextEncoder(vocab, dim=64, cond_dim=64, seed=seed + 1)
    den = DenoiserModel(image_size, channels, patch, width, blocks, T, text.cond_dim, seed=seed)
    return Generator(den, text, make_schedule(T, *beta))


def generator_state(gen: Generator) -> dict[str, np.ndarray]:
    state = {f"denoiser.{k}": v for k, v in gen.denoiser.state_dict().items()}
    state.update({f"text.{k}": v for k, v in gen.text.state_dict().items()})
    for k, v in gen.denoiser.config().items():
        state[f"config.{k}"] = np.array([float(v)])
    state["config.beta"] = gen.schedule.beta.copy()
    return state


def save_generator(path: str | os.PathLike, gen: Generator) -> None:
    checkpoint.save(path, generator_state(gen))


def generator_from_state(state: dict[str, np.ndarray], vocab: Vocabulary | None = None) -> Generator:
    try:
        cfg = {k[len("config.") :]: int(v[0]) for k, v in state.items() if k.startswith("config.") and k != "config.beta"}
        beta = state["config.beta"]
        den = DenoiserModel(
            cfg["image_size"], cfg["channels"], cfg["patch"], cfg["width"], cfg["blocks"], cfg["T"], cfg["cond_dim"]
        )
    except KeyError as exc:
        raise checkpoint.FormatError(f"generator checkpoint lacks {exc}") from exc
    vocab = vocab or default_vocabulary()
    emb = state["text.embed"]
    text = TextEncoder(vocab, dim=emb.shape[1], cond_dim=state["text.proj.W"].shape[0] if "text.proj.W" in state else None)
    den.load_state_dict({k[len("denoiser.") :]: v for k, v in state.items() if k.startswith("denoiser.")})
    text.load_state_dict({k[len("text.") :]: v for k, v in state.items() if k.startswith("text.")})
    return Generator(den, text, schedule_from_betas(beta))


def load_generator(path: str | os.PathLike, vocab: Vocabulary | None = None) -> Generator:
    return generator_from_state(checkpoint.load(path), vocab)
