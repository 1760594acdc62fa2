import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pgdd.data import gen_dataset
from pgdd.distill import TrainConfig, progressive_target, train_base
from pgdd.network import NULL, DenoiserSpec, denoise_forward
from pgdd.oracle import (
    Component,
    MixtureSpec,
    analytic_eps,
    gaussian,
    log_density,
    oracle_cfg_target,
    oracle_sample,
    ring_mixture,
)
from pgdd.sampler import SingularityError, ddim_step
from pgdd.schedule import NoiseSchedule, diffuse, timestep_grid

COS = NoiseSchedule()


def test_standard_normal_case():
    # alpha = sigma = 1/sqrt(2): E[x|z] = alpha z, eps* = z sigma
    e = analytic_eps(gaussian([0.0], 1.0), np.array([[1.0]]), 0.5, 0, COS)
    assert e[0, 0] == pytest.approx(0.70711, abs=1e-5)


def test_point_mass_limit():
    mix = MixtureSpec([[Component(1.0, (0.7, -0.2), (1e-14, 1e-14))]])
    z = np.array([[0.3, 0.1]])
    a, s = COS.alpha_sigma(0.4)
    np.testing.assert_allclose(analytic_eps(mix, z, 0.4, 0, COS), (z - a * np.array([0.7, -0.2])) / s, rtol=1e-9)


def test_symmetric_mixture_zero():
    mix = MixtureSpec([[Component(0.5, (1.5, 0.0), (0.2, 0.2)), Component(0.5, (-1.5, 0.0), (0.2, 0.2))]])
    np.testing.assert_allclose(analytic_eps(mix, np.zeros((1, 2)), 0.3, 0, COS), 0.0, atol=1e-15)


def test_validation():
    with pytest.raises(ValueError):
        MixtureSpec([[Component(0.5, (0.0,), (1.0,))]])
    with pytest.raises(ValueError):
        MixtureSpec([[Component(1.0, (0.0,), (0.0,))]])
    with pytest.raises(ValueError):
        analytic_eps(ring_mixture(2), np.zeros((1, 2)), 0.5, 2, COS)
    with pytest.raises(SingularityError):
        analytic_eps(ring_mixture(2), np.zeros((1, 2)), 1e-12, 0, NoiseSchedule(t_min=1e-12))


def test_single_class_target_is_conditional():
    mix = ring_mixture(1)
    z = np.random.default_rng(0).standard_normal((5, 2))
    cond = analytic_eps(mix, z, 0.6, 0, COS)
    for g in (0.0, 2.0, 8.0):
        np.testing.assert_allclose(oracle_cfg_target(mix, z, 0.6, 0, g, COS), cond, atol=1e-12)


def test_g0_is_conditional():
    mix = ring_mixture(3)
    z = np.random.default_rng(1).standard_normal((5, 2))
    np.testing.assert_array_equal(oracle_cfg_target(mix, z, 0.3, 1, 0.0, COS), analytic_eps(mix, z, 0.3, 1, COS))


@settings(max_examples=30, deadline=None)
@given(st.floats(0.05, 0.95), st.integers(-1, 2), st.integers(0, 1000))
def test_eps_is_scaled_score(t, c, seed):
    mix = MixtureSpec(
        [
            [Component(0.3, (1.0, 0.5), (0.2, 0.4)), Component(0.7, (-0.5, 1.0), (0.3, 0.1))],
            [Component(1.0, (0.0, -1.5), (0.5, 0.5))],
            [Component(1.0, (2.0, 2.0), (0.05, 0.3))],
        ],
        priors=[0.2, 0.5, 0.3],
    )
    z = np.random.default_rng(seed).standard_normal((3, 2)) * 2
    h = 1e-5
    grad = np.zeros_like(z)
    for d in range(2):
        dz = np.zeros_like(z)
        dz[:, d] = h
        grad[:, d] = (log_density(mix, z + dz, t, c, COS) - log_density(mix, z - dz, t, c, COS)) / (2 * h)
    _, s = COS.alpha_sigma(t)
    np.testing.assert_allclose(analytic_eps(mix, z, t, c, COS), -s * grad, atol=1e-4)


def test_null_uses_priors():
    mix = MixtureSpec([[Component(1.0, (2.0,), (0.1,))], [Component(1.0, (-2.0,), (0.1,))]], priors=[0.9, 0.1])
    z = np.array([[0.0]])
    # at z = 0 a 0.9 prior on the +2 class pulls the posterior mean positive
    e = analytic_eps(mix, z, 0.5, NULL, COS)
    assert e[0, 0] < 0


def test_guided_lands_in_class():
    mix = ring_mixture(2, radius=2.0, std=0.35)
    grid = timestep_grid(COS, 64)
    hits = 0
    for seed in range(1000):
        x = oracle_sample(mix, 0, 8.0, grid, seed, n=1, record="summary").x0
        hits += int(x[0, 0] > 0)
    assert hits / 1000 >= 0.99


def test_error_decreases_with_steps():
    mix = gaussian([1.0, -1.0], [1.0, 0.5])
    errs = []
    for N in (1, 2, 4, 16, 64):
        x = oracle_sample(mix, 0, 0.0, timestep_grid(COS, N), 0, n=10000, record="summary").x0
        errs.append(np.abs(x.std(axis=0) - [1.0, 0.5]).sum() + np.abs(x.mean(axis=0) - [1.0, -1.0]).sum())
    assert np.all(np.diff(errs) < 0), errs
    assert errs[0] > 5 * errs[-1]


def test_deterministic():
    mix = ring_mixture(2)
    grid = timestep_grid(COS, 8)
    a = oracle_sample(mix, np.array([0, 1, 1]), 3.0, grid, 4)
    b = oracle_sample(mix, np.array([0, 1, 1]), 3.0, grid, 4)
    np.testing.assert_array_equal(a.x0, b.x0)


@pytest.mark.parametrize("N", [4, 16, 64])
def test_progressive_target_on_oracle(N):
    mix = ring_mixture(3)
    grid = timestep_grid(COS, N)
    rng = np.random.default_rng(N)
    for _ in range(20):
        i = rng.integers(0, N // 2)
        t, mid, s = grid[2 * i], grid[2 * i + 1], grid[2 * i + 2]
        z = rng.standard_normal((4, 2)) * 2
        c = rng.integers(-1, 3, 4)

        def teacher(zz, tt):
            return oracle_cfg_target(mix, zz, tt, c, 4.0, COS)

        z_mid = ddim_step(z, teacher(z, t), t, mid, COS)
        z_s = ddim_step(z_mid, teacher(z_mid, mid), mid, s, COS)
        eps = progressive_target(teacher, z, t, s, COS)
        np.testing.assert_allclose(ddim_step(z, eps, t, s, COS), z_s, atol=1e-6)


def test_trained_base_approaches_oracle():
    spec = DenoiserSpec("point2d", (64, 64), num_classes=2, embed_dim=16, sigma_data=1.5)
    ds = gen_dataset("mixture2d", {"count": 5000, "holdout": 500}, 0)
    mix = ds.mixture()
    rng = np.random.default_rng(0)
    x, c = ds.x_holdout.astype(float), ds.labels_holdout
    t = rng.uniform(0.05, 0.95, len(x))
    z = diffuse(x, t, rng.standard_normal(x.shape), spec.schedule)
    truth = analytic_eps(mix, z, t, c, spec.schedule)
    gaps, params = [], None
    for steps in (0, 200, 1500):
        cfg = TrainConfig(batch_size=128, steps=steps, learning_rate=1e-3, seed=0)
        params = train_base(spec, ds, cfg)
        gaps.append(float(np.mean((denoise_forward(params, z, t, c) - truth) ** 2)))
    assert gaps[0] > gaps[1] > gaps[2], gaps
