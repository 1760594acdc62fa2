import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pgdd.schedule import (
    NoiseSchedule,
    ScheduleDomainError,
    alpha_sigma,
    diffuse,
    loss_weight,
    snr,
    timestep_grid,
)

COS = NoiseSchedule()
SCHEDULES = [COS, NoiseSchedule(kind="linear-snr")]


def test_cosine_endpoints():
    a, s = alpha_sigma(COS, COS.t_min)
    assert a == pytest.approx(1.0, abs=1e-5) and s == pytest.approx(0.0, abs=2e-3)
    a, s = alpha_sigma(COS, COS.t_max)
    assert a == pytest.approx(0.0, abs=2e-3) and s == pytest.approx(1.0, abs=1e-5)


def test_cosine_midpoint():
    a, s = alpha_sigma(COS, 0.5)
    assert a == pytest.approx(0.70711, abs=1e-5)
    assert s == pytest.approx(0.70711, abs=1e-5)
    assert snr(COS, 0.5) == pytest.approx(0.0, abs=1e-12)


def test_snr_quarter():
    # independent closed form: 2 log cot(pi/8)
    assert snr(COS, 0.25) == pytest.approx(2 * np.log(1 / np.tan(np.pi / 8)), abs=1e-12)
    assert snr(COS, 0.25) == pytest.approx(1.7627, abs=1e-4)


@pytest.mark.parametrize("sched", SCHEDULES, ids=lambda s: s.kind)
def test_variance_preserving(sched):
    t = np.random.default_rng(0).uniform(sched.t_min, sched.t_max, 1000)
    a, s = alpha_sigma(sched, t)
    assert np.max(np.abs(a * a + s * s - 1)) <= 1e-6


@pytest.mark.parametrize("sched", SCHEDULES, ids=lambda s: s.kind)
def test_monotone(sched):
    t = np.sort(np.random.default_rng(1).uniform(sched.t_min, sched.t_max, 1000))
    t = np.unique(t)
    a, s = alpha_sigma(sched, t)
    assert np.all(np.diff(snr(sched, t)) < 0)
    assert np.all(np.diff(a) < 0) and np.all(np.diff(s) > 0)


@pytest.mark.parametrize("t", [0.0, 1.0, -0.1, 0.9995])
def test_domain_error(t):
    with pytest.raises(ScheduleDomainError):
        alpha_sigma(COS, t)


def test_bad_schedule():
    with pytest.raises(ValueError):
        NoiseSchedule(kind="sigmoid")
    with pytest.raises(ValueError):
        NoiseSchedule(t_min=0.6)


def test_diffuse_cases():
    x = np.array([[1.0, 2.0]])
    eps = np.array([[-1.0, 0.5]])
    a, s = alpha_sigma(COS, 0.3)
    np.testing.assert_array_equal(diffuse(x, 0.3, np.zeros_like(x), COS), a * x)
    np.testing.assert_array_equal(diffuse(np.zeros_like(x), 0.3, eps, COS), s * eps)
    z = diffuse(np.array([1.0]), 0.5, np.array([-1.0]), COS)
    assert z[0] == pytest.approx(0.0, abs=1e-12)
    with pytest.raises(ValueError):
        diffuse(x, 0.3, np.zeros((2, 2)), COS)


@settings(max_examples=50, deadline=None)
@given(st.floats(0.001, 0.999), st.floats(-3, 3), st.floats(-3, 3))
def test_diffuse_superposition(t, p, q):
    rng = np.random.default_rng(0)
    x1, x2, e1, e2 = rng.standard_normal((4, 5, 2))
    lhs = diffuse(p * x1 + q * x2, t, p * e1 + q * e2, COS)
    rhs = p * diffuse(x1, t, e1, COS) + q * diffuse(x2, t, e2, COS)
    np.testing.assert_allclose(lhs, rhs, atol=1e-6)


def test_grid():
    np.testing.assert_array_equal(timestep_grid(COS, 1), [COS.t_max, COS.t_min])
    g2 = timestep_grid(COS, 2)
    assert g2[1] == pytest.approx(0.5 * (COS.t_max + COS.t_min))
    g = timestep_grid(COS, 50)
    assert len(g) == 51 and np.all(np.diff(g) < 0)
    assert g[0] == COS.t_max and g[-1] == COS.t_min
    with pytest.raises(ValueError):
        timestep_grid(COS, 0)


def test_loss_weight():
    t = np.array([0.1, 0.5, 0.9])
    np.testing.assert_array_equal(loss_weight(COS, t, "constant-one"), 1.0)
    w = loss_weight(COS, t, "truncated-snr")
    np.testing.assert_allclose(w, np.maximum(np.exp(snr(COS, t)), 1.0))
    with pytest.raises(ValueError):
        loss_weight(COS, t, "p2")


def test_roundtrip_dict():
    for s in SCHEDULES:
        assert NoiseSchedule.from_dict(s.to_dict()) == s
