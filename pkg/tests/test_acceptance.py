"""The ten acceptance criteria, each run at its stated tolerance.

Every test appends one PASS/FAIL line to the terminal summary and prints it.
"""

import math
import time

import numpy as np
import pytest

from conftest import ACCEPTANCE_LINES
from gradcheck import TOL, check
from panoenv import autodiff as ad
from panoenv import diffusion as D
from panoenv import lora
from panoenv import metrics as M
from panoenv import pano as P
from panoenv import world as W
from panoenv.experiments import (
    MIX_RATIOS,
    GeneratorRecipe,
    NavRecipe,
    domain_gap_task,
    mask_sweep,
    mix_ratio_sweep,
    nav_worlds,
    rank_sweep,
    world_generator,
)
from panoenv.schemas import validate_json


def report(n: int, title: str, ok: bool, detail: str) -> None:
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {n:2d}: {title} | {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


# ---------------------------------------------------------------------------
# 1


def test_c01_gradient_suite():
    from test_autodiff import OPS, _case

    from panoenv import agent as A
    from panoenv.diffusion import denoise_loss, make_generator

    t0 = time.time()
    errors = []
    for op in OPS:
        for seed in range(4):
            fn, params = _case(op, np.random.default_rng(seed))
            errors.append((op, check(fn, params)))
    gen = make_generator(width=16, blocks=1, T=10, seed=3)
    caps = [["a", "photo", "of", "kitchen"], ["a", "photo", "of", "attic"]]
    for seed in range(3):
        rng = np.random.default_rng(seed)
        images, t = rng.uniform(size=(2, 8, 8, 3)), rng.integers(0, 10, size=2)
        eps = rng.standard_normal(images.shape)

        def dl():
            return denoise_loss(gen.denoiser, gen.codec, (images, gen.text.encode_batch(caps)), gen.schedule, rng, t=t, eps=eps)

        errors.append(("denoiser", check(dl, gen.denoiser.trainable() + gen.text.trainable(), np.random.default_rng(seed), 6)))
    world = W.make_world(7, 12, episodes=4)
    obs = A._lookup(world)
    model = A.AgentModel(seed=5)
    for seed in range(2):
        ep = world.episodes[seed]
        pos = A.mlm_positions(len(ep.instruction), np.random.default_rng(seed))
        node = ep.path[1]
        tgt = A.scene_targets(world.graph, node)
        losses = {
            "mlm": lambda: A.mlm_loss(model, ep, None, obs, positions=pos),
            "mrm": lambda: A.mrm_loss(model, obs(node), tgt, None, view=seed),
            "sap": lambda: A.sap_loss(model, world.graph, ep, obs),
            "pid": lambda: A.pid_loss(model, world.graph, ep, obs, max_steps=4)[0],
        }
        for name, fn in losses.items():
            errors.append((name, check(fn, model.parameters(), np.random.default_rng(seed), 6)))
    elapsed = time.time() - t0
    worst = max(errors, key=lambda e: e[1])
    ok = len(errors) >= 100 and worst[1] <= TOL and elapsed < 120
    report(1, "autodiff vs central differences", ok, f"{len(errors)} cases, worst rel err {worst[1]:.2e} ({worst[0]}), {elapsed:.1f}s")


# ---------------------------------------------------------------------------
# 2


def test_c02_lora_identity_and_merge():
    gen = D.make_generator(width=32, blocks=2, T=10, seed=1)
    rng = np.random.default_rng(0)
    z, t = rng.standard_normal((3, 8, 8, 3)), np.array([0, 4, 9])
    caps = [["a", "photo", "of", "kitchen"]] * 3

    def fwd(g):
        with ad.no_grad():
            return g.denoiser(z, t, g.condition(caps)).data

    adapted = lora.attach(gen, lora.AdaptationConfig(rank=8), rng)
    identical = np.array_equal(fwd(gen), fwd(adapted))
    for layer in lora.layers(adapted).values():
        layer.B.data[...] = rng.normal(0, 0.2, size=layer.B.shape)
    merge_err = float(np.max(np.abs(fwd(adapted) - fwd(lora.merge_generator(adapted)))))
    counts_ok = all(l.A.data.size + l.B.data.size == 8 * sum(l.shape) for l in lora.layers(adapted).values())
    before = {k: v.tobytes() for k, v in lora.base_parameters(gen).items()}
    data = [(rng.uniform(size=(8, 8, 3)), caps[0]) for _ in range(8)]
    res = lora.adapt_generator(gen, data, lora.AdaptationConfig(rank=4, iterations=100, batch_size=4, optimizer="adam"), rng)
    frozen = {k: v.tobytes() for k, v in lora.base_parameters(res.generator).items()} == before
    ok = identical and merge_err <= 1e-6 and counts_ok and frozen
    report(2, "LoRA identity, merge, count, frozen base", ok, f"zero-init identical={identical}, merge err {merge_err:.1e}, r(m+n)={counts_ok}, base unchanged after 100 steps={frozen}")


# ---------------------------------------------------------------------------
# 3


def test_c03_diffusion_correctness():
    s = D.make_schedule(50)
    ab_exact = all(s.alpha_bar[t] == np.prod(s.alpha[: t + 1]) or s.alpha_bar[t] == math.prod(s.alpha[: t + 1]) for t in range(50))
    rng = np.random.default_rng(0)
    z0 = rng.uniform(0.2, 0.8, size=(8, 8, 3))
    worst_mc = 0.0
    for t in (0, 24, 49):
        draws = np.stack([D.forward_noise(z0, t, rng.standard_normal(z0.shape), s).z_t for _ in range(10_000)])
        ab = s.alpha_bar[t]
        mean_err = abs(draws.mean() - np.sqrt(ab) * z0.mean()) / (np.sqrt(ab) * z0.mean())
        var_err = abs((draws - np.sqrt(ab) * z0).var() - (1 - ab)) / (1 - ab)
        worst_mc = max(worst_mc, mean_err, var_err)
    inv = 0.0
    for t in range(50):
        eps = rng.standard_normal(z0.shape)
        inv = max(inv, float(np.max(np.abs(D.predict_z0(D.forward_noise(z0, t, eps, s).z_t, t, eps, s) - z0))))
    gen = D.make_generator(width=16, blocks=1, T=10, seed=3)
    faithful = True
    n_fix = 0
    for strat in P.STRATEGIES:
        for seed in range(3):
            mask = P.make_mask((8, 8), P.MaskSpec(strat, seed=seed))
            src = rng.uniform(size=(8, 8, 3))
            out = D.inpaint_sample(gen.denoiser, gen.schedule, src, mask, gen.condition([["a", "photo", "of", "attic"]]), np.random.default_rng(seed))
            faithful &= bool(np.array_equal(out[mask == 0], src[mask == 0]))
            n_fix += 1
    ok = ab_exact and worst_mc < 0.02 and inv < 1e-10 and faithful
    report(3, "diffusion schedule, marginal, inversion, inpainting", ok, f"alpha_bar exact={ab_exact}, MC worst rel err {worst_mc:.2%}, inversion err {inv:.1e}, faithful on {n_fix} fixtures={faithful}")


# ---------------------------------------------------------------------------
# 4


def _cells(s, k):
    p = s.placements[k]
    return {(r, c % s.width) for r in range(p.row, p.row + s.window_size) for c in range(p.col, p.col + s.window_size)}


def test_c04_panorama_geometry():
    rng = np.random.default_rng(0)
    p = P.Panorama(rng.uniform(size=(24, 96, 3)))
    round_trip = np.array_equal(P.stitch(P.partition(p)).pixels, p.pixels)
    sched_ok = True
    for w, h, S in ((96, 24, 8), (48, 12, 4), (32, 16, 8)):
        s = P.outpaint_schedule(w, h, S)
        covered = set().union(*(_cells(s, k) for k in range(len(s)))) == {(r, c) for r in range(h) for c in range(w)}
        halves = all(len(_cells(s, k) & _cells(s, s.placements[k].parent)) == S * S // 2 for k in range(1, len(s)))
        per_row = w // (S // 2)
        seams = all(len(_cells(s, i + per_row - 1) & _cells(s, i)) == S * S // 2 for i in range(0, len(s), per_row))
        sched_ok &= covered and halves and seams
    bounds = {"SRM": (0.10, 0.50), "ERM": (0.50, 0.90), "HIM": (0.5, 0.5), "PRM": (1 - 4 / 64, 1 - 4 / 64)}
    mask_ok = True
    for strat, (lo, hi) in bounds.items():
        fr = [P.make_mask((8, 8), P.MaskSpec(strat, seed=k)).mean() for k in range(1000)]
        mask_ok &= lo - 1e-12 <= min(fr) and max(fr) <= hi + 1e-12
    ok = round_trip and sched_ok and mask_ok
    report(4, "partition/stitch, outpaint schedule, mask bounds", ok, f"round trip={round_trip}, coverage+50% overlaps+seam={sched_ok}, bounds over 1000 seeds x 4 strategies={mask_ok}")


# ---------------------------------------------------------------------------
# 5


def test_c05_navigation_oracles():
    from test_metrics import fixture_results
    from test_world import GRAPHS, first_hop, floyd_warshall

    oracle_ok = geo_ok = True
    pairs = 0
    for _, g in GRAPHS:
        Dm = floyd_warshall(g)
        for goal in range(len(g)):
            for cur in range(len(g)):
                oracle_ok &= W.oracle_action(g, cur, goal) == first_hop(g, Dm, cur, goal)
                path = [cur]
                while path[-1] != goal:
                    path.append(first_hop(g, Dm, path[-1], goal))
                geo_ok &= W.geodesic(g, cur, goal) == math.fsum(g.adj[a][b] for a, b in zip(path[:-1], path[1:]))
                pairs += 1
    line = W.WorldGraph([W.Node(i, p, "porch") for i, p in enumerate([(0.0, 0, 0), (2.0, 0, 0), (5.0, 0, 0), (7.5, 0, 0), (5.0, 4.0, 0)])], [(0, 1), (1, 2), (2, 3), (2, 4)])
    r = M.evaluate(fixture_results(line))
    expected = ((7.5 + 9 + 7) / 3, 6.5 / 3, 200 / 3, 100 * (1 + 5.5 / 7) / 3, 11.5 / 3)
    fixture_ok = np.allclose((r.TL, r.NE, r.SR, r.SPL, r.GP), expected, atol=1e-9)
    spl_ok = r.SPL <= r.SR
    rng = np.random.default_rng(0)
    world = W.make_world(11, 14)
    for _ in range(50):
        res = []
        for ep in world.episodes:
            path = [ep.start]
            for _ in range(int(rng.integers(0, 8))):
                path.append(int(rng.choice(world.graph.neighbors(path[-1]))))
            res.append(M.EpisodeResult(tuple(path), ep.path, world.graph))
        rep = M.evaluate(res)
        spl_ok &= rep.SPL <= rep.SR
    ok = oracle_ok and geo_ok and fixture_ok and spl_ok and len(GRAPHS) == 50
    report(5, "oracle, geodesic, metric fixture, SPL<=SR", ok, f"{len(GRAPHS)} graphs / {pairs} pairs: oracle={oracle_ok}, geodesic exact={geo_ok}; fixture={fixture_ok}; SPL<=SR on 51 reports={spl_ok}")


# ---------------------------------------------------------------------------
# 6


def test_c06_frechet_metric():
    rng = np.random.default_rng(0)
    s = M.stats_from_features(rng.normal(size=(300, 16)))
    self_d = M.frechet_distance(s, s)
    va, vb = rng.uniform(0.1, 2, 16), rng.uniform(0.1, 2, 16)
    ma, mb = rng.normal(size=16), rng.normal(size=16)
    a, b = M.FeatureStats(ma, np.diag(va), 100), M.FeatureStats(mb, np.diag(vb), 100)
    diag_err = abs(M.frechet_distance(a, b) - (np.sum((np.sqrt(va) - np.sqrt(vb)) ** 2) + np.sum((ma - mb) ** 2)))
    x = M.stats_from_features(rng.normal(size=(200, 16)) @ rng.normal(size=(16, 16)))
    y = M.stats_from_features(rng.normal(size=(200, 16)) @ rng.normal(size=(16, 16)) + 0.5)
    sym = abs(M.frechet_distance(x, y) - M.frechet_distance(y, x))
    ok = self_d <= 1e-8 and diag_err <= 1e-8 and sym <= 1e-8
    report(6, "Frechet distance", ok, f"FID(X,X)={self_d:.1e}, diagonal closed-form err {diag_err:.1e}, asymmetry {sym:.1e}")


# ---------------------------------------------------------------------------
# 7


@pytest.mark.slow
def test_c07_adapted_generator_closes_domain_gap():
    t0 = time.time()
    runs = [domain_gap_task(seed) for seed in range(3)]
    elapsed = time.time() - t0
    base = float(np.median([r["fid_base"] for r in runs]))
    adapted = float(np.median([r["fid_adapted"] for r in runs]))
    per_seed = ", ".join(f"s{r['seed']}: {r['fid_base']:.3f}->{r['fid_adapted']:.3f}" for r in runs)
    ok = adapted < base and elapsed < 600
    report(7, "adapted vs base Frechet distance (median of 3 seeds)", ok, f"base {base:.3f}, adapted {adapted:.3f} [{per_seed}], {elapsed:.0f}s")


# ---------------------------------------------------------------------------
# 8


@pytest.mark.slow
def test_c08_mix_ratio_sweep():
    t0 = time.time()
    nav = NavRecipe()
    train, _ = nav_worlds(nav)
    gen = world_generator(0, train)
    sweep = mix_ratio_sweep(range(5), MIX_RATIOS, nav, gen)
    elapsed = time.time() - t0
    validate_json(sweep, "mix_ratio_sweep")
    rows = {r["ratio"]: r for r in sweep["rows"]}
    complete = sorted(rows) == sorted(MIX_RATIOS) and all(len(r["runs"]) == 5 for r in rows.values())
    sr0, sr5 = rows[0.0]["SR"], rows[0.5]["SR"]
    table = ", ".join(f"p={r:g}: SR {rows[r]['SR']:.1f}" for r in MIX_RATIOS)
    ok = complete and sr5 >= sr0 and elapsed < 900
    report(8, "mix ratio 0.5 vs 0.0 on held-out worlds (median of 5 seeds)", ok, f"{table}; complete={complete}, {elapsed:.0f}s")


# ---------------------------------------------------------------------------
# 9


def test_c09_ablation_harness():
    recipe = GeneratorRecipe(T=4, base_iters=4, base_images=32)
    recipe.adapt = lora.AdaptationConfig(rank=16, iterations=4, lr=2e-3, optimizer="adam")
    nav = NavRecipe(train_worlds=1, test_worlds=1, nodes=6, episodes=2)
    nav.train.iters_pt, nav.train.iters_ft = 4, 3
    ranks = rank_sweep(0, (4, 16, 64), recipe, nav, n_samples=24)
    train, _ = nav_worlds(nav)
    masks = mask_sweep(0, world_generator(0, train, recipe), nav=nav)
    validate_json(ranks, "rank_sweep")
    validate_json(masks, "mask_sweep")
    finite = all(math.isfinite(v) for rep in (ranks, masks) for row in rep["rows"] for v in row.values() if isinstance(v, float))
    shape_ok = [r["rank"] for r in ranks["rows"]] == [4, 16, 64] and [r["strategy"] for r in masks["rows"]] == list(P.STRATEGIES)
    ok = finite and shape_ok
    report(9, "rank and masking-strategy sweeps", ok, f"rank rows {[r['rank'] for r in ranks['rows']]}, mask rows {[r['strategy'] for r in masks['rows']]}, schema-valid, finite={finite}")


# ---------------------------------------------------------------------------
# 10


def test_c10_cli_determinism(cli_runs):
    (res_a, files_a), (res_b, files_b) = cli_runs
    codes_ok = all(code == 0 for code, _ in res_a.values())
    same_out = res_a == res_b
    same_files = files_a == files_b
    ok = codes_ok and same_out and same_files
    report(10, "CLI re-runs are byte-identical", ok, f"{len(res_a)} invocations over {len(set(k.split()[0] for k in res_a))} step kinds, {len(files_a)} files identical={same_files}, stdout identical={same_out}")
