"""Desk-scale experiments: domain-gap task, mix-ratio sweep, rank and masking-strategy sweeps."""

from __future__ import annotations

import time
import copy
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from . import agent as agent_mod
from . import lora
from .conditioning import GENERIC_SUBJECTS, synth_caption
from .diffusion import Generator, make_generator, sample, train_generator
from .metrics import EpisodeResult, FeatureExtractor, MetricsReport, evaluate, feature_stats, frechet_distance
from .pano import MaskSpec, augment_panorama, make_mask, partition
from .rng import substream
from .world import Observation, World, make_world

MIX_RATIOS = (0.0, 0.1, 0.3, 0.5, 0.7)
RANKS = (4, 16, 64)
MASK_STRATEGIES = ("SRM", "ERM", "HIM", "PRM")


# ---------------------------------------------------------------------------
# image domains


def generic_images(rng: np.random.Generator, n: int, size: int = 8) -> list[tuple[np.ndarray, list[str]]]:
    """Source domain: smooth outdoor-ish patches captioned ``a photo of <subject>``."""
    ys, xs = np.mgrid[0:size, 0:size] / max(size - 1, 1)
    out = []
    for _ in range(n):
        subject = GENERIC_SUBJECTS[int(rng.integers(0, len(GENERIC_SUBJECTS)))]
        if subject == "field":
            base = np.stack([0.25 + 0.1 * ys, 0.55 + 0.2 * ys, 0.2 + 0.0 * ys], -1)
        elif subject == "sky":
            base = np.stack([0.45 + 0.3 * ys, 0.65 + 0.2 * ys, 0.95 + 0.0 * ys], -1)
        elif subject == "fabric":
            tone = rng.uniform(0.3, 0.9, 3)
            base = tone * (0.75 + 0.25 * np.sin(2 * np.pi * xs * 2.5))[..., None]
        else:  # stone
            base = np.full((size, size, 3), rng.uniform(0.4, 0.6)) + 0.1 * rng.standard_normal((size, size, 1))
        img = base + rng.normal(0.0, 0.04, size=(size, size, 3))
        out.append((np.clip(img, 0.0, 1.0), ["a", "photo", "of", subject]))
    return out


def view_pairs(worlds: Sequence[World]) -> list[tuple[np.ndarray, list[str]]]:
    """Target domain: every sub-view of every panorama, with its template caption."""
    pairs = []
    for w in worlds:
        for n in w.graph.nodes:
            meta = {"view_scenes": w.graph.view_scenes(n.id)}
            for v in partition(w.panoramas[n.id]):
                pairs.append((v.pixels, synth_caption(v, meta)))
    return pairs


def view_captions(world: World, node: int) -> list[list[str]]:
    meta = {"view_scenes": world.graph.view_scenes(node)}
    return [synth_caption(v, meta) for v in partition(world.panoramas[node])]


# ---------------------------------------------------------------------------
# generators


@dataclass
class GeneratorRecipe:
    T: int = 50
    width: int = 64
    blocks: int = 2
    base_iters: int = 400
    base_images: int = 512
    base_lr: float = 2e-3
    adapt: lora.AdaptationConfig = field(default_factory=lambda: lora.AdaptationConfig(rank=16, iterations=600, lr=2e-3, optimizer="adam"))


def base_generator(seed: int, recipe: GeneratorRecipe = GeneratorRecipe()) -> Generator:
    """Generator trained on the generic source domain only."""
    gen = make_generator(T=recipe.T, width=recipe.width, blocks=recipe.blocks, seed=seed)
    data = generic_images(substream(seed, "train", 0), recipe.base_images)
    train_generator(gen, data, recipe.base_iters, substream(seed, "train", 1), lr=recipe.base_lr)
    return gen


def adapted_generator(base: Generator, pairs, seed: int, cfg: lora.AdaptationConfig) -> lora.AdaptationResult:
    return lora.adapt_generator(base, pairs, cfg, substream(seed, "train", 2))


def sample_images(gen: Generator, captions: Sequence[Sequence[str]], rng: np.random.Generator) -> np.ndarray:
    S, C = gen.denoiser.image_size, gen.denoiser.channels
    cond = gen.condition([list(c) for c in captions]).data
    return np.clip(sample(gen.denoiser, gen.schedule, (len(captions), S, S, C), cond, rng), 0.0, 1.0)


def domain_gap_task(seed: int, recipe: GeneratorRecipe = GeneratorRecipe(), n_samples: int = 96, worlds: int = 3, nodes: int = 12) -> dict:
    """Frechet distance to held-out target views for base vs adapted samples under target captions."""
    train_worlds = [make_world(seed * 100 + i, nodes, episodes=1) for i in range(worlds)]
    held = make_world(seed * 100 + 99, nodes, episodes=1)
    pairs = view_pairs(train_worlds)
    base = base_generator(seed, recipe)
    adapted = adapted_generator(base, pairs, seed, recipe.adapt)
    target = view_pairs([held])
    pick = substream(seed, "eval").choice(len(target), size=n_samples, replace=False)
    real = np.stack([target[i][0] for i in pick])
    caps = [target[i][1] for i in pick]
    ext = FeatureExtractor(int(np.prod(real.shape[1:])))
    ref = feature_stats(real, ext)
    fid_base = frechet_distance(feature_stats(sample_images(base, caps, substream(seed, "sample", 0)), ext), ref)
    fid_adapted = frechet_distance(feature_stats(sample_images(adapted.generator, caps, substream(seed, "sample", 0)), ext), ref)
    return {"seed": seed, "fid_base": fid_base, "fid_adapted": fid_adapted, "adapt_loss_first": adapted.losses[0], "adapt_loss_last": float(np.mean(adapted.losses[-20:]))}


# ---------------------------------------------------------------------------
# generated observations


def generated_observations(gen: Generator, world: World, spec: MaskSpec, seed: int, nodes: Sequence[int] | None = None) -> dict[int, Observation]:
    """Inpainted copy of each node's panorama under ``spec``; node ``n`` uses mask seeds from ``spec.seed + 36 n``."""
    out = {}
    for n in nodes if nodes is not None else range(len(world.graph)):
        node_spec = MaskSpec(spec.strategy, spec.seed + 36 * n, spec.params)
        pano = augment_panorama(gen, world.panoramas[n], view_captions(world, n), node_spec, substream(seed, "sample", n))
        out[n] = Observation.from_panorama(n, pano, "generated")
    return out


def masked_fraction(spec: MaskSpec, shape=(8, 8), count: int = 36) -> float:
    return float(np.mean([make_mask(shape, MaskSpec(spec.strategy, spec.seed + i, spec.params)).mean() for i in range(count)]))


# ---------------------------------------------------------------------------
# agents


@dataclass
class NavRecipe:
    train_worlds: int = 5
    test_worlds: int = 5
    nodes: int = 16
    episodes: int = 20
    world_seed: int = 1000
    train: agent_mod.TrainConfig = field(default_factory=lambda: agent_mod.TrainConfig(iters_pt=2000, iters_ft=400))


def nav_worlds(recipe: NavRecipe) -> tuple[list[World], list[World]]:
    train = [make_world(recipe.world_seed + i, recipe.nodes, episodes=recipe.episodes) for i in range(recipe.train_worlds)]
    test = [make_world(recipe.world_seed + 500 + i, recipe.nodes, episodes=recipe.episodes) for i in range(recipe.test_worlds)]
    return train, test


def evaluate_agent(policy, worlds: Sequence[World], max_steps: int = 15, radius: float = 3.0) -> MetricsReport:
    results = []
    for w in worlds:
        for ep in w.episodes:
            path = agent_mod.rollout(policy, w, ep, max_steps)
            results.append(EpisodeResult(tuple(path), ep.path, w.graph))
    return evaluate(results, radius)


def pretrained_agent(seed: int, worlds: Sequence[World], cfg: agent_mod.TrainConfig) -> agent_mod.AgentModel:
    model = agent_mod.AgentModel(seed=seed)
    agent_mod.pretrain(model, worlds, cfg, substream(seed, "train", 10))
    return model


def finetuned_agent(model, worlds, generated: Sequence[dict[int, Observation]] | None, ratio: float, seed: int, cfg: agent_mod.TrainConfig):
    model = copy.deepcopy(model)
    ft_cfg = replace(cfg, mix=agent_mod.MixPolicy(ratio, "finetune", seed))
    augmenters = None
    if generated is not None:
        augmenters = [g.__getitem__ for g in generated]
    trace = agent_mod.finetune(model, worlds, ft_cfg, substream(seed, "train", 11), augmenters)
    return model, trace


def _summary(report: MetricsReport) -> dict:
    d = report.to_dict()
    d.pop("episodes")
    return d


def mix_ratio_sweep(
    seeds: Sequence[int],
    ratios: Sequence[float] = MIX_RATIOS,
    nav: NavRecipe = NavRecipe(),
    gen: Generator | None = None,
    spec: MaskSpec = MaskSpec("PRM"),
    log: Callable[[str], None] | None = None,
) -> dict:
    """Fine-tune one pre-trained agent per seed at each mix ratio; evaluate on held-out worlds."""
    train, test = nav_worlds(nav)
    generated = None
    if any(r > 0 for r in ratios):
        if gen is None:
            raise ValueError("mix ratios above zero need a generator")
        t0 = time.time()
        generated = [generated_observations(gen, w, spec, nav.world_seed + i) for i, w in enumerate(train)]
        if log:
            log(f"generated {sum(len(g) for g in generated)} panoramas in {time.time() - t0:.1f}s")
    rows = {r: [] for r in ratios}
    for seed in seeds:
        base = pretrained_agent(seed, train, nav.train)
        for r in ratios:
            model, trace = finetuned_agent(base, train, generated, r, seed, nav.train)
            rep = evaluate_agent(model, test, nav.train.max_steps)
            rows[r].append({"seed": seed, **_summary(rep), "final_loss": trace[-1].loss if trace else None})
            if log:
                log(f"seed {seed} ratio {r}: SR {rep.SR:.2f} SPL {rep.SPL:.2f}")
    out_rows = []
    for r in ratios:
        runs = rows[r]
        med = {k: float(np.median([x[k] for x in runs])) for k in ("TL", "NE", "SR", "SPL", "GP")}
        out_rows.append({"ratio": r, **med, "runs": runs})
    return {"kind": "mix_ratio_sweep", "mask": spec.strategy, "seeds": list(seeds), "rows": out_rows}


def rank_sweep(seed: int, ranks: Sequence[int] = RANKS, recipe: GeneratorRecipe = GeneratorRecipe(), nav: NavRecipe = NavRecipe(), n_samples: int = 48) -> dict:
    """Adapter rank vs adaptation loss, domain gap and downstream navigation."""
    train, test = nav_worlds(nav)
    pairs = view_pairs(train)
    base = base_generator(seed, recipe)
    target = view_pairs(test)
    pick = substream(seed, "eval").choice(len(target), size=n_samples, replace=False)
    real = np.stack([target[i][0] for i in pick])
    caps = [target[i][1] for i in pick]
    ext = FeatureExtractor(int(np.prod(real.shape[1:])))
    ref = feature_stats(real, ext)
    agent0 = pretrained_agent(seed, train, nav.train)
    rows = []
    for r in ranks:
        res = adapted_generator(base, pairs, seed, replace(recipe.adapt, rank=r))
        fid = frechet_distance(feature_stats(sample_images(res.generator, caps, substream(seed, "sample", r)), ext), ref)
        gen_obs = [generated_observations(res.generator, w, MaskSpec("PRM"), nav.world_seed + i) for i, w in enumerate(train)]
        model, _ = finetuned_agent(agent0, train, gen_obs, 0.5, seed, nav.train)
        rep = evaluate_agent(model, test, nav.train.max_steps)
        rows.append(
            {
                "rank": r,
                "trainable_params": lora.trainable_param_count(res.generator),
                "final_loss": res.losses[-1] if res.losses else None,
                "fid": fid,
                **_summary(rep),
            }
        )
    return {"kind": "rank_sweep", "seed": seed, "rows": rows}


def mask_sweep(seed: int, gen: Generator, strategies: Sequence[str] = MASK_STRATEGIES, nav: NavRecipe = NavRecipe(), ratio: float = 0.5) -> dict:
    """Masking strategy vs downstream navigation after mixed fine-tuning."""
    train, test = nav_worlds(nav)
    agent0 = pretrained_agent(seed, train, nav.train)
    rows = []
    for s in strategies:
        spec = MaskSpec(s, seed)
        gen_obs = [generated_observations(gen, w, spec, nav.world_seed + i) for i, w in enumerate(train)]
        model, _ = finetuned_agent(agent0, train, gen_obs, ratio, seed, nav.train)
        rep = evaluate_agent(model, test, nav.train.max_steps)
        rows.append({"strategy": s, "masked_fraction": masked_fraction(spec), **_summary(rep)})
    return {"kind": "mask_sweep", "seed": seed, "ratio": ratio, "rows": rows}


def world_generator(seed: int, worlds: Sequence[World], recipe: GeneratorRecipe = GeneratorRecipe()) -> Generator:
    """Base generator adapted to the given worlds' sub-views (the generator used for augmentation)."""
    return adapted_generator(base_generator(seed, recipe), view_pairs(worlds), seed, recipe.adapt).generator
