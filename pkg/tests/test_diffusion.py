import numpy as np
import pytest

from panoenv import autodiff as ad
from panoenv import diffusion as D
from panoenv.pano import MaskSpec, STRATEGIES, make_mask

CAPS = [["a", "photo", "of", "kitchen"]]


@pytest.mark.parametrize("T", [1, 10, 50, 100])
def test_alpha_bar_is_running_product(T):
    s = D.make_schedule(T)
    prod = 1.0
    for t in range(T):
        prod *= 1.0 - s.beta[t]
        assert s.alpha_bar[t] == prod
    assert np.all(np.diff(s.alpha_bar) < 0) or T == 1


def test_schedule_validation():
    with pytest.raises(ValueError):
        D.make_schedule(0)
    with pytest.raises(ValueError):
        D.make_schedule(10, 0.1, 0.01)
    with pytest.raises(ValueError):
        D.schedule_from_betas([0.1, 1.0])


@pytest.mark.parametrize("t", [0, 24, 49])
def test_forward_noise_marginal_monte_carlo(t):
    s = D.make_schedule(50)
    rng = np.random.default_rng(100 + t)
    z0 = rng.uniform(0.2, 0.8, size=(8, 8, 3))
    draws = np.stack([D.forward_noise(z0, t, rng.standard_normal(z0.shape), s).z_t for _ in range(10_000)])
    ab = s.alpha_bar[t]
    mean_cf = np.sqrt(ab) * z0.mean()
    var_cf = 1.0 - ab
    resid = draws - np.sqrt(ab) * z0
    assert abs(draws.mean() - mean_cf) / mean_cf < 0.02
    assert abs(resid.var() - var_cf) / var_cf < 0.02


def test_forward_noise_rejects_bad_input():
    s = D.make_schedule(10)
    with pytest.raises(ValueError):
        D.forward_noise(np.zeros((2, 2)), 0, np.zeros((2, 3)), s)
    with pytest.raises(ValueError):
        D.forward_noise(np.zeros(2), 10, np.zeros(2), s)


@pytest.mark.parametrize("t", [0, 1, 25, 99])
def test_oracle_inversion(t):
    s = D.make_schedule(100)
    rng = np.random.default_rng(t)
    z0, eps = rng.uniform(size=(8, 8, 3)), rng.standard_normal((8, 8, 3))
    z_t = D.forward_noise(z0, t, eps, s).z_t
    assert np.max(np.abs(D.predict_z0(z_t, t, eps, s) - z0)) < 1e-10


@pytest.mark.parametrize("t", [0, 1, 10, 49])
def test_reverse_mean_equals_posterior_mean(t):
    # q(z_{t-1} | z_t, z0) mean with z0 recovered from the noise estimate
    s = D.make_schedule(50)
    rng = np.random.default_rng(7 + t)
    z_t, eps = rng.standard_normal((4, 4, 3)), rng.standard_normal((4, 4, 3))
    ab, b, a = s.alpha_bar[t], s.beta[t], s.alpha[t]
    ab_prev = s.alpha_bar[t - 1] if t > 0 else 1.0
    z0 = (z_t - np.sqrt(1 - ab) * eps) / np.sqrt(ab)
    post = np.sqrt(ab_prev) * b / (1 - ab) * z0 + np.sqrt(a) * (1 - ab_prev) / (1 - ab) * z_t
    np.testing.assert_allclose(D.reverse_mean(z_t, t, eps, s), post, atol=1e-10, rtol=0)


def test_codec_identity():
    x = np.random.default_rng(0).uniform(size=(8, 8, 3))
    c = D.LatentCodec()
    np.testing.assert_array_equal(c.decode(c.encode(x)), x)
    with pytest.raises(ValueError):
        D.LatentCodec("vae")


def test_denoiser_output_shape(tiny_generator):
    g = tiny_generator
    out = g.denoiser(np.zeros((2, 8, 8, 3)), np.array([0, 9]), g.condition(CAPS * 2))
    assert out.shape == (2, 8, 8, 3)


def _fixtures():
    shape = (8, 8)
    for k, strat in enumerate(STRATEGIES):
        for seed in range(3):
            yield f"{strat}-{seed}", make_mask(shape, MaskSpec(strat, seed=seed))
    rim = np.zeros(shape, dtype=np.uint8)
    rim[0, :] = 1
    yield "row", rim
    one = np.zeros(shape, dtype=np.uint8)
    one[3, 5] = 1
    yield "pixel", one


@pytest.mark.parametrize("name,mask", list(_fixtures()))
def test_inpaint_keeps_unmasked_pixels_exactly(tiny_generator, name, mask):
    g = tiny_generator
    src = np.random.default_rng(3).uniform(size=(8, 8, 3))
    out = D.inpaint_sample(g.denoiser, g.schedule, src, mask, g.condition(CAPS), np.random.default_rng(4))
    keep = mask == 0
    assert np.array_equal(out[keep], src[keep])
    assert np.all(np.isfinite(out))
    assert not np.array_equal(out[~keep], src[~keep])


def test_inpaint_batched(tiny_generator):
    g = tiny_generator
    src = np.random.default_rng(3).uniform(size=(2, 8, 8, 3))
    mask = make_mask((8, 8), MaskSpec("PRM"))
    mask = np.stack([mask, 1 - mask])
    out = D.inpaint_sample(g.denoiser, g.schedule, src, mask, g.condition(CAPS * 2), np.random.default_rng(4))
    keep = mask == 0
    assert np.array_equal(out[keep], src[keep])


def test_inpaint_full_mask_matches_sample(tiny_generator):
    g = tiny_generator
    cond = g.condition(CAPS)
    a = D.inpaint_sample(g.denoiser, g.schedule, np.zeros((8, 8, 3)), np.ones((8, 8)), cond, np.random.default_rng(9))
    b = D.sample(g.denoiser, g.schedule, (8, 8, 3), cond, np.random.default_rng(9))
    assert np.array_equal(a, b)


def test_inpaint_empty_mask_returns_source(tiny_generator):
    g = tiny_generator
    src = np.random.default_rng(1).uniform(size=(8, 8, 3))
    out = D.inpaint_sample(g.denoiser, g.schedule, src, np.zeros((8, 8)), g.condition(CAPS), np.random.default_rng(0))
    assert np.array_equal(out, src)


def test_inpaint_rejects_bad_masks(tiny_generator):
    g = tiny_generator
    src = np.zeros((8, 8, 3))
    with pytest.raises(ValueError):
        D.inpaint_sample(g.denoiser, g.schedule, src, np.ones((4, 4)), g.condition(CAPS), np.random.default_rng(0))
    with pytest.raises(ValueError):
        D.inpaint_sample(g.denoiser, g.schedule, src, np.full((8, 8), 0.5), g.condition(CAPS), np.random.default_rng(0))


def test_sample_is_seeded(tiny_generator):
    g = tiny_generator
    a = D.sample(g.denoiser, g.schedule, (2, 8, 8, 3), g.condition(CAPS * 2), np.random.default_rng(5))
    b = D.sample(g.denoiser, g.schedule, (2, 8, 8, 3), g.condition(CAPS * 2), np.random.default_rng(5))
    assert a.shape == (2, 8, 8, 3) and np.array_equal(a, b)


def test_sampling_leaves_no_tape(tiny_generator):
    g = tiny_generator
    D.sample(g.denoiser, g.schedule, (8, 8, 3), g.condition(CAPS), np.random.default_rng(5))
    assert all(p.grad is None for p in g.denoiser.trainable())


def test_training_reduces_loss():
    g = D.make_generator(width=16, blocks=1, T=10, seed=0)
    rng = np.random.default_rng(0)
    data = [(np.full((8, 8, 3), c), ["a", "photo", "of", "kitchen"]) for c in (0.2, 0.5, 0.8)]
    losses = D.train_generator(g, data, 150, rng, lr=3e-3)
    assert np.mean(losses[-20:]) < 0.8 * np.mean(losses[:20])


def test_checkpoint_round_trip(tmp_path, tiny_generator):
    path = tmp_path / "gen.ckpt"
    D.save_generator(path, tiny_generator)
    g2 = D.load_generator(path)
    z = np.random.default_rng(0).standard_normal((1, 8, 8, 3))
    with ad.no_grad():
        a = tiny_generator.denoiser(z, np.array([3]), tiny_generator.condition(CAPS)).data
        b = g2.denoiser(z, np.array([3]), g2.condition(CAPS)).data
    assert np.array_equal(a, b)
    assert np.array_equal(g2.schedule.beta, tiny_generator.schedule.beta)
    assert path.read_bytes() == (D.save_generator(tmp_path / "again.ckpt", g2) or (tmp_path / "again.ckpt").read_bytes())
