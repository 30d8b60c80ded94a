"""Command-line entry point: ``panoenv <subcommand> ...``.

Exit codes: 0 success, 2 usage error, 3 data or format error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import copy
import json
import os
import shutil
import sys
import tempfile
from concurrent.futures import ThreadPoolExecutor
from contextlib import contextmanager
from dataclasses import replace
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from . import agent as agent_mod
from . import experiments as ex
from . import lora
from .autodiff import NumericError
from .checkpoint import FormatError
from .conditioning import CaptionPair, read_pairs, synth_caption, write_pairs
from .diffusion import load_generator, make_generator, save_generator, train_generator
from .metrics import EpisodeResult, FeatureExtractor, evaluate, feature_stats, frechet_distance
from .pano import (
    MaskSpec,
    Panorama,
    generate_panorama,
    load_panorama,
    outpaint_schedule,
    partition,
    save_panorama,
    schedule_captions,
    schedule_to_json,
    stitch,
    view_slices,
)
from .rng import substream
from .schemas import validate_file, validate_json
from .world import MixPolicy, Observation, World, load_world, make_world, save_world

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# argument types


def _int_at_least(lo: int):
    def parse(text: str) -> int:
        try:
            v = int(text)
        except ValueError:
            raise argparse.ArgumentTypeError(f"{text!r} is not an integer") from None
        if v < lo:
            raise argparse.ArgumentTypeError(f"must be >= {lo}")
        return v

    return parse


def _ratio(text: str) -> float:
    try:
        v = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"{text!r} is not a number") from None
    if not 0.0 <= v <= 1.0:
        raise argparse.ArgumentTypeError("ratio must lie in [0, 1]")
    return v


def _ratio_list(text: str) -> list[float]:
    return [_ratio(t) for t in text.split(",") if t.strip()]


def _int_list(text: str) -> list[int]:
    try:
        return [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"{text!r} is not a comma-separated integer list") from None


def _nonneg_float(text: str) -> float:
    v = float(text)
    if v < 0:
        raise argparse.ArgumentTypeError("must be >= 0")
    return v


_seed = _int_at_least(0)


# ---------------------------------------------------------------------------
# output helpers


@contextmanager
def atomic_dir(out: str | os.PathLike) -> Iterator[Path]:
    """Write into a temporary sibling directory, then move it into place."""
    out = Path(out)
    out.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(prefix=f".{out.name}.", dir=out.parent))
    try:
        yield tmp
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    if out.is_dir():
        shutil.rmtree(out)
    elif out.exists():
        out.unlink()
    os.replace(tmp, out)


def write_text_atomic(path: str | os.PathLike, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(f".{path.name}.tmp")
    tmp.write_text(text, encoding="utf-8")
    os.replace(tmp, path)


def dump_json(obj) -> str:
    return json.dumps(obj, indent=1) + "\n"


def write_trace_lines(path: Path, rows: Sequence[dict]) -> None:
    path.write_text("".join(json.dumps(r) + "\n" for r in rows), encoding="utf-8")


# ---------------------------------------------------------------------------
# subcommands


def cmd_make_world(a) -> int:
    try:
        world = make_world(
            a.seed,
            a.nodes,
            spacing=a.spacing,
            jitter=a.jitter,
            room_size=a.room_size,
            extra_edge_prob=a.extra_edges,
            episodes=a.episodes,
            pano_shape=(a.pano_height, a.pano_width),
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    with atomic_dir(a.out) as tmp:
        save_world(tmp, world)
    print(f"world: {len(world.graph)} nodes, {len(world.graph.edges)} edges, {len(world.episodes)} episodes -> {a.out}")
    return EXIT_OK


def cmd_build_pairs(a) -> int:
    world_path = Path(a.world)
    world = load_world(world_path)
    root = world_path if world_path.is_dir() else world_path.parent
    out = Path(a.out)
    pairs = []
    for node in world.graph.nodes:
        meta = {"view_scenes": world.graph.view_scenes(node.id)}
        ref = Path(os.path.relpath(root / node.pano, out.parent)).as_posix()
        for v in partition(world.panoramas[node.id]):
            pairs.append(CaptionPair(f"{ref}#{v.heading_index},{v.elevation_index}", tuple(synth_caption(v, meta))))
    out.parent.mkdir(parents=True, exist_ok=True)
    tmp = out.with_name(f".{out.name}.tmp")
    write_pairs(tmp, pairs)
    os.replace(tmp, out)
    print(f"{len(pairs)} caption pairs -> {out}")
    return EXIT_OK


def load_pair_dataset(path: str | os.PathLike) -> list[tuple[np.ndarray, list[str]]]:
    path = Path(path)
    cache: dict[str, Panorama] = {}
    data = []
    for p in read_pairs(path):
        src, heading, elevation = p.source
        if src not in cache:
            cache[src] = load_panorama(path.parent / src)
        pano = cache[src]
        rs, cs = view_slices(pano.pixels.shape[:2], heading, elevation)
        data.append((pano.pixels[rs, cs].copy(), list(p.caption)))
    if not data:
        raise FormatError(f"{path}: no caption pairs")
    return data


def cmd_train_base(a) -> int:
    gen = make_generator(T=a.T, width=a.width, blocks=a.blocks, seed=a.seed)
    data = ex.generic_images(substream(a.seed, "train", 0), a.images)
    losses = train_generator(gen, data, a.iters, substream(a.seed, "train", 1), lr=a.lr)
    with atomic_dir(a.out) as tmp:
        save_generator(tmp / "model.pgpp", gen)
        write_trace_lines(tmp / "trace.jsonl", [{"iter": i, "loss": v} for i, v in enumerate(losses)])
    print(f"base generator ({a.iters} iterations) -> {a.out}")
    return EXIT_OK


def _targets(text: str) -> frozenset[str]:
    names = frozenset(t.strip() for t in text.split(",") if t.strip())
    unknown = names - set(lora.ALL_TARGETS)
    if unknown or not names:
        raise argparse.ArgumentTypeError(f"targets must be drawn from {','.join(lora.ALL_TARGETS)}")
    return names


def cmd_adapt(a) -> int:
    data = load_pair_dataset(a.pairs)
    if a.model:
        base = load_generator(a.model)
    else:
        base = ex.base_generator(a.seed)
    cfg = lora.AdaptationConfig(
        rank=a.rank, alpha=a.alpha, target_matrices=a.targets, lr=a.lr, iterations=a.iters, batch_size=a.batch, optimizer=a.optimizer
    )
    try:
        for mod, name in lora._target_names(base, cfg.target_matrices):
            m, n = base.modules()[mod].params[name].shape
            if cfg.rank > min(m, n):
                raise ValueError(f"rank {cfg.rank} exceeds min({m}, {n}) for {mod}.{name}")
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    res = lora.adapt_generator(base, data, cfg, substream(a.seed, "train", 2))
    with atomic_dir(a.out) as tmp:
        lora.save_adapter(tmp / "adapter.pgpp", res.generator)
        write_trace_lines(tmp / "trace.jsonl", [{"iter": i, "loss": v} for i, v in enumerate(res.losses)])
    last = f", final loss {res.losses[-1]:.4f}" if res.losses else ""
    print(f"rank-{cfg.rank} adapter, {lora.trainable_param_count(res.generator)} trainable parameters{last} -> {a.out}")
    return EXIT_OK


def _load_gen(a):
    gen = load_generator(a.model)
    if a.adapter:
        gen = lora.load_adapter(a.adapter, gen)
    return gen


def cmd_generate(a) -> int:
    if a.mode == "inpaint" and not a.mask:
        raise UsageError("--mask is required with --mode inpaint")
    world = load_world(a.world)
    gen = _load_gen(a)
    nodes = a.nodes if a.nodes is not None else list(range(len(world.graph)))
    for n in nodes:
        if n not in world.graph:
            raise UsageError(f"node {n} not in world")
    manifest = {"mode": a.mode, "seed": a.seed, "nodes": []}
    with atomic_dir(a.out) as tmp:
        (tmp / "panos").mkdir()
        if a.mode == "inpaint":
            manifest["mask"] = a.mask.upper()
            params = {"crop": a.crop} if a.crop else {}
            obs = ex.generated_observations(gen, world, MaskSpec(a.mask, a.seed, params), a.seed, nodes)
            panos = {n: _stitch(o) for n, o in obs.items()}
        else:
            pano0 = world.panoramas[nodes[0]]
            sched = outpaint_schedule(pano0.width, pano0.height, gen.denoiser.image_size)
            manifest["schedule"] = schedule_to_json(sched)
            panos = {}
            for n in nodes:
                caps = schedule_captions(sched, ex.view_captions(world, n))
                panos[n] = generate_panorama(gen, sched, caps, substream(a.seed, "sample", n))
        for n in nodes:
            rel = f"panos/node_{n:04d}.pan"
            save_panorama(tmp / rel, panos[n])
            manifest["nodes"].append({"id": n, "pano": rel})
        validate_json(manifest, "generated")
        (tmp / "generated.json").write_text(dump_json(manifest), encoding="utf-8")
    print(f"{a.mode}: {len(nodes)} panoramas -> {a.out}")
    return EXIT_OK


def _stitch(o: Observation) -> Panorama:
    return stitch(o.views)


def load_generated(gen_dir: str | os.PathLike) -> dict[int, Observation]:
    d = Path(gen_dir)
    manifest = json.loads((d / "generated.json").read_text(encoding="utf-8"))
    validate_json(manifest, "generated")
    return {int(e["id"]): Observation.from_panorama(int(e["id"]), load_panorama(d / e["pano"]), "generated") for e in manifest["nodes"]}


def _worlds(paths: Sequence[str]) -> list[World]:
    return [load_world(p) for p in paths]


def _generated_for(a, worlds) -> list[dict[int, Observation]] | None:
    if not a.gen_dir:
        return None
    if len(a.gen_dir) != len(worlds):
        raise UsageError("give one --gen-dir per --world")
    return [load_generated(d) for d in a.gen_dir]


def _train_config(a) -> agent_mod.TrainConfig:
    return agent_mod.TrainConfig(
        lambda_mlm=a.lambda_mlm,
        lambda_mrm=a.lambda_mrm,
        lambda_sap=a.lambda_sap,
        lambda_ft=getattr(a, "lam", 0.2),
        lr_pt=a.lr,
        lr_ft=a.lr,
        iters_pt=a.iters,
        iters_ft=a.iters,
        mix=MixPolicy(getattr(a, "mix_ratio", 0.0), "finetune", a.seed),
        max_steps=a.max_steps,
        temperature=getattr(a, "temperature", 0.0),
    )


def _new_agent(a, worlds: Sequence[World]) -> agent_mod.AgentModel:
    vh, vw = worlds[0].panoramas[0].view_shape
    return agent_mod.AgentModel(view_dim=vh * vw * worlds[0].panoramas[0].channels, d=a.d, hidden=a.hidden, seed=a.seed)


def cmd_pretrain(a) -> int:
    worlds = _worlds(a.world)
    generated = _generated_for(a, worlds)
    model = _new_agent(a, worlds)
    trace = agent_mod.pretrain(model, worlds, _train_config(a), substream(a.seed, "train", 10), generated)
    with atomic_dir(a.out) as tmp:
        agent_mod.save_agent(tmp / "agent.pgpp", model)
        agent_mod.write_trace(tmp / "trace.jsonl", trace)
    print(f"pre-trained {a.iters} iterations -> {a.out}")
    return EXIT_OK


def cmd_finetune(a) -> int:
    worlds = _worlds(a.world)
    generated = _generated_for(a, worlds)
    ratios = a.sweep_ratios if a.sweep_ratios else [a.mix_ratio]
    if any(r > 0 for r in ratios) and generated is None:
        raise UsageError("a mix ratio above 0 needs --gen-dir")
    start = agent_mod.load_agent(a.agent) if a.agent else _new_agent(a, worlds)
    augmenters = [g.__getitem__ for g in generated] if generated else None
    base_cfg = _train_config(a)
    eval_worlds = _worlds(a.eval_world) if a.eval_world else worlds
    rows = []
    with atomic_dir(a.out) as tmp:
        for r in ratios:
            model = copy.deepcopy(start)
            cfg = replace(base_cfg, mix=MixPolicy(r, "finetune", a.seed))
            trace = agent_mod.finetune(model, worlds, cfg, substream(a.seed, "train", 11), augmenters)
            if a.sweep_ratios:
                rep = ex.evaluate_agent(model, eval_worlds, a.max_steps)
                summary = rep.to_dict()
                summary.pop("episodes")
                rows.append({"ratio": r, **summary, "final_loss": trace[-1].loss if trace else None})
                agent_mod.write_trace(tmp / f"trace_{r:.2f}.jsonl", trace)
            else:
                agent_mod.save_agent(tmp / "agent.pgpp", model)
                agent_mod.write_trace(tmp / "trace.jsonl", trace)
        if a.sweep_ratios:
            report = {"kind": "mix_ratio_sweep", "seeds": [a.seed], "rows": rows}
            validate_json(report)
            (tmp / "sweep.json").write_text(dump_json(report), encoding="utf-8")
    print(f"fine-tuned at ratio(s) {','.join(f'{r:g}' for r in ratios)} -> {a.out}")
    return EXIT_OK


def _policy(spec: str):
    if spec == "oracle":
        return agent_mod.OraclePolicy()
    if spec == "stationary":
        return agent_mod.StationaryPolicy()
    return agent_mod.load_agent(spec)


def cmd_eval(a) -> int:
    world = load_world(a.world, a.episodes)
    if not world.episodes:
        raise FormatError("no episodes to evaluate")
    policy = _policy(a.agent)

    def run(ep):
        return EpisodeResult(tuple(agent_mod.rollout(policy, world, ep, a.max_steps)), ep.path, world.graph)

    if a.threads > 1:
        with ThreadPoolExecutor(a.threads) as pool:
            results = list(pool.map(run, world.episodes))
    else:
        results = [run(ep) for ep in world.episodes]
    report = evaluate(results, a.radius)
    text = dump_json(report.to_dict())
    validate_json(json.loads(text), "metrics")
    if a.out:
        write_text_atomic(a.out, text)
    print(f"TL {report.TL:.2f}  NE {report.NE:.2f}  SR {report.SR:.2f}  SPL {report.SPL:.2f}  GP {report.GP:.2f}")
    return EXIT_OK


def image_set(directory: str | os.PathLike) -> np.ndarray:
    """All sub-views of every panorama file under ``directory`` (sorted by path)."""
    files = sorted(Path(directory).rglob("*.pan"))
    if not files:
        raise FormatError(f"no panoramas under {directory}")
    return np.stack([v.pixels for f in files for v in partition(load_panorama(f))])


def cmd_fid(a) -> int:
    xa, xb = image_set(a.set_a), image_set(a.set_b)
    if xa.shape[1:] != xb.shape[1:]:
        raise FormatError(f"image shapes differ: {xa.shape[1:]} vs {xb.shape[1:]}")
    ext = FeatureExtractor(int(np.prod(xa.shape[1:])), d=a.dim, seed=a.extractor_seed)
    value = frechet_distance(feature_stats(xa, ext), feature_stats(xb, ext))
    report = {"fid": value, "n_a": int(len(xa)), "n_b": int(len(xb))}
    if a.out:
        write_text_atomic(a.out, dump_json(report))
    print(repr(value))
    return EXIT_OK


def cmd_validate(a) -> int:
    bad = 0
    for p in a.paths:
        try:
            kind = validate_file(p, a.kind)
            print(f"{p}: ok ({kind})")
        except (FormatError, ValueError, OSError) as exc:
            print(f"{p}: INVALID: {exc}")
            bad += 1
    return EXIT_DATA if bad else EXIT_OK


def cmd_ablate(a) -> int:
    recipe = ex.GeneratorRecipe(T=a.T, base_iters=a.gen_iters)
    recipe.adapt = replace(recipe.adapt, iterations=a.adapt_iters)
    nav = ex.NavRecipe(
        train_worlds=a.worlds,
        test_worlds=a.worlds,
        nodes=a.nodes,
        episodes=a.episodes,
        train=agent_mod.TrainConfig(iters_pt=a.pt_iters, iters_ft=a.ft_iters),
    )
    if a.kind == "rank":
        report = ex.rank_sweep(a.seed, a.ranks, recipe, nav)
    else:
        train, _ = ex.nav_worlds(nav)
        gen = ex.world_generator(a.seed, train, recipe)
        if a.kind == "mask":
            report = ex.mask_sweep(a.seed, gen, [s.upper() for s in a.strategies], nav)
        else:
            report = ex.mix_ratio_sweep(a.seeds or [a.seed], a.ratios, nav, gen)
    validate_json(report)
    write_text_atomic(a.out, dump_json(report))
    print(f"{report['kind']}: {len(report['rows'])} rows -> {a.out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def _agent_flags(p: argparse.ArgumentParser, iters: int, lr: float) -> None:
    p.add_argument("--world", action="append", required=True, help="world.json or its directory (repeatable)")
    p.add_argument("--gen-dir", action="append", help="generated panoramas for the matching --world (repeatable)")
    p.add_argument("--iters", type=_int_at_least(0), default=iters)
    p.add_argument("--lr", type=_nonneg_float, default=lr)
    p.add_argument("--lambda-mlm", type=_nonneg_float, default=1.0)
    p.add_argument("--lambda-mrm", type=_nonneg_float, default=1.0)
    p.add_argument("--lambda-sap", type=_nonneg_float, default=1.0)
    p.add_argument("--max-steps", type=_int_at_least(0), default=15)
    p.add_argument("--d", type=_int_at_least(1), default=32)
    p.add_argument("--hidden", type=_int_at_least(1), default=32)
    p.add_argument("--seed", type=_seed, required=True)
    p.add_argument("--out", required=True)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="panoenv", description="Synthetic panoramic navigation environments with adapted generators.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("make-world", help="synthesise a world, its panoramas and episodes")
    p.add_argument("--seed", type=_seed, required=True)
    p.add_argument("--nodes", type=_int_at_least(2), required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--episodes", type=_int_at_least(0), default=20)
    p.add_argument("--spacing", type=float, default=3.0)
    p.add_argument("--jitter", type=_nonneg_float, default=0.5)
    p.add_argument("--room-size", type=_int_at_least(1), default=2)
    p.add_argument("--extra-edges", type=_ratio, default=0.5)
    p.add_argument("--pano-height", type=_int_at_least(3), default=24)
    p.add_argument("--pano-width", type=_int_at_least(12), default=96)
    p.set_defaults(func=cmd_make_world)

    p = sub.add_parser("build-pairs", help="caption every sub-view of every panorama")
    p.add_argument("--world", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_build_pairs)

    p = sub.add_parser("train-base", help="train the base generator on the generic image domain")
    p.add_argument("--seed", type=_seed, required=True)
    p.add_argument("--iters", type=_int_at_least(0), default=400)
    p.add_argument("--images", type=_int_at_least(1), default=512)
    p.add_argument("--T", type=_int_at_least(1), default=50)
    p.add_argument("--width", type=_int_at_least(1), default=64)
    p.add_argument("--blocks", type=_int_at_least(1), default=2)
    p.add_argument("--lr", type=_nonneg_float, default=2e-3)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train_base)

    p = sub.add_parser("adapt", help="train low-rank adapters on caption pairs")
    p.add_argument("--pairs", required=True)
    p.add_argument("--model", help="base generator checkpoint (default: train one from --seed)")
    p.add_argument("--rank", type=_int_at_least(1), default=64)
    p.add_argument("--alpha", type=float, default=None)
    p.add_argument("--iters", type=_int_at_least(0), default=1000)
    p.add_argument("--lr", type=_nonneg_float, default=1e-3)
    p.add_argument("--batch", type=_int_at_least(1), default=8)
    p.add_argument("--optimizer", choices=("sgd", "adam"), default="sgd")
    p.add_argument("--targets", type=_targets, default=frozenset(lora.ALL_TARGETS))
    p.add_argument("--seed", type=_seed, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_adapt)

    p = sub.add_parser("generate", help="inpaint or outpaint panoramas for a world")
    p.add_argument("--mode", choices=("inpaint", "outpaint"), required=True)
    p.add_argument("--mask", type=str.lower, choices=("srm", "erm", "him", "prm"))
    p.add_argument("--crop", type=_int_at_least(1), default=None, help="centre crop side for prm")
    p.add_argument("--model", required=True)
    p.add_argument("--adapter")
    p.add_argument("--world", required=True)
    p.add_argument("--nodes", type=_int_list, default=None)
    p.add_argument("--seed", type=_seed, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("pretrain", help="pre-train the agent on proxy tasks")
    _agent_flags(p, 2000, 1e-3)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("finetune", help="fine-tune with pseudo-interactive demonstrations and mixing")
    _agent_flags(p, 400, 5e-4)
    p.add_argument("--agent", help="pre-trained agent checkpoint")
    p.add_argument("--mix-ratio", type=_ratio, default=0.0)
    p.add_argument("--sweep-ratios", type=_ratio_list, default=None)
    p.add_argument("--eval-world", action="append", help="held-out worlds scored in --sweep-ratios mode")
    p.add_argument("--lambda", dest="lam", type=_nonneg_float, default=0.2)
    p.add_argument("--temperature", type=_nonneg_float, default=0.0)
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("eval", help="roll out an agent and report TL/NE/SR/SPL/GP")
    p.add_argument("--world", required=True)
    p.add_argument("--episodes")
    p.add_argument("--agent", required=True, help="checkpoint path, 'oracle' or 'stationary'")
    p.add_argument("--radius", type=_nonneg_float, default=3.0)
    p.add_argument("--max-steps", type=_int_at_least(0), default=15)
    p.add_argument("--threads", type=_int_at_least(1), default=1)
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("fid", help="Frechet distance between two panorama directories")
    p.add_argument("--set-a", required=True)
    p.add_argument("--set-b", required=True)
    p.add_argument("--dim", type=_int_at_least(1), default=16)
    p.add_argument("--extractor-seed", type=_seed, default=1234)
    p.add_argument("--out")
    p.set_defaults(func=cmd_fid)

    p = sub.add_parser("validate", help="check files against their schemas")
    p.add_argument("paths", nargs="+")
    p.add_argument("--kind", default=None)
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("ablate", help="rank, masking-strategy or mix-ratio sweep")
    p.add_argument("--kind", choices=("rank", "mask", "mix"), required=True)
    p.add_argument("--seed", type=_seed, required=True)
    p.add_argument("--seeds", type=_int_list, default=None)
    p.add_argument("--ratios", type=_ratio_list, default=list(ex.MIX_RATIOS))
    p.add_argument("--ranks", type=_int_list, default=list(ex.RANKS))
    p.add_argument("--strategies", type=lambda s: s.split(","), default=list(ex.MASK_STRATEGIES))
    p.add_argument("--worlds", type=_int_at_least(1), default=5)
    p.add_argument("--nodes", type=_int_at_least(2), default=16)
    p.add_argument("--episodes", type=_int_at_least(1), default=20)
    p.add_argument("--T", type=_int_at_least(1), default=50)
    p.add_argument("--gen-iters", type=_int_at_least(0), default=400)
    p.add_argument("--adapt-iters", type=_int_at_least(0), default=600)
    p.add_argument("--pt-iters", type=_int_at_least(0), default=2000)
    p.add_argument("--ft-iters", type=_int_at_least(0), default=400)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"panoenv {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericError as exc:
        print(f"panoenv {args.command}: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (FormatError, OSError, ValueError, KeyError, IndexError) as exc:
        print(f"panoenv {args.command}: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
