import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pgdd import autograd as ag
from pgdd.analysis import count_cost
from pgdd.guide import GuideSpec
from pgdd.network import (
    IMAGE16_DEFAULT,
    NULL,
    POINT2D_DEFAULT,
    DenoiserSpec,
    PortShapeError,
    denoise_forward,
    denoise_graph,
    embed_condition,
    embed_time,
    init_denoiser,
    param_count,
)
from pgdd.schedule import ScheduleDomainError

from conftest import SMALL_IMAGE, SMALL_POINT, perturbed
from gradcheck import analytic, numeric, relative_error

TOY = DenoiserSpec("point2d", (4, 4), num_classes=2, embed_dim=4)


def _inputs(spec, B, seed=0):
    rng = np.random.default_rng(seed)
    z = rng.standard_normal((B,) + spec.data_shape)
    t = rng.uniform(0.05, 0.95, B)
    c = rng.integers(0, spec.num_classes, B)
    return z, t, c


def test_init_deterministic():
    a, b = init_denoiser(SMALL_POINT, 3), init_denoiser(SMALL_POINT, 3)
    assert a.checksum() == b.checksum()
    assert init_denoiser(SMALL_POINT, 4).checksum() != a.checksum()


def test_default_param_counts():
    p, i = param_count(init_denoiser(POINT2D_DEFAULT, 0)), param_count(init_denoiser(IMAGE16_DEFAULT, 0))
    assert p < i
    # the accounting module counts the same tensors independently
    assert count_cost(POINT2D_DEFAULT, GuideSpec("tiny", POINT2D_DEFAULT)).base_params == p
    assert count_cost(IMAGE16_DEFAULT, GuideSpec("tiny", IMAGE16_DEFAULT)).base_params == i


def test_default_specs():
    assert POINT2D_DEFAULT.widths == (128, 128, 128) and POINT2D_DEFAULT.embed_dim == 64 and POINT2D_DEFAULT.num_ports == 3
    assert IMAGE16_DEFAULT.widths == (32, 64, 128) and IMAGE16_DEFAULT.embed_dim == 128 and IMAGE16_DEFAULT.num_ports == 3


@pytest.mark.parametrize("kw", [dict(widths=()), dict(num_classes=0), dict(mode="voxel"), dict(embed_dim=3)])
def test_invalid_spec(kw):
    base = dict(mode="point2d", widths=(8,), num_classes=2, embed_dim=4)
    with pytest.raises(ValueError):
        DenoiserSpec(**{**base, **kw})


@pytest.mark.parametrize("spec", [SMALL_POINT, SMALL_IMAGE], ids=["point", "image"])
@pytest.mark.parametrize("B", [1, 3])
def test_shape_and_zero_injection(spec, B):
    params = perturbed(init_denoiser(spec, 0))
    z, t, c = _inputs(spec, B)
    out = denoise_forward(params, z, t, c)
    assert out.shape == z.shape
    zeros = [np.zeros(s) for s in spec.port_shapes(B)]
    np.testing.assert_array_equal(denoise_forward(params, z, t, c, zeros), out)
    np.testing.assert_array_equal(denoise_forward(params, z, t, c), out)


@pytest.mark.parametrize("spec", [SMALL_POINT, SMALL_IMAGE], ids=["point", "image"])
def test_injection_additive(spec):
    params = perturbed(init_denoiser(spec, 0))
    z, t, c = _inputs(spec, 2)
    rng = np.random.default_rng(5)
    J1 = [rng.standard_normal(s) for s in spec.port_shapes(2)]
    J2 = [rng.standard_normal(s) for s in spec.port_shapes(2)]
    summed = denoise_forward(params, z, t, c, [a + b for a, b in zip(J1, J2)])
    # ports add their input to the merged features; verify against a graph that adds twice
    P = {k: ag.Tensor(v) for k, v in params.tensors.items()}
    twice = [ag.Tensor(a) + ag.Tensor(b) for a, b in zip(J1, J2)]
    np.testing.assert_allclose(denoise_graph(P, spec, z, t, c, twice).data, summed, atol=1e-12)
    assert not np.allclose(summed, denoise_forward(params, z, t, c, J1))


def test_port_mismatch():
    params = init_denoiser(SMALL_POINT, 0)
    z, t, c = _inputs(SMALL_POINT, 2)
    bad = [np.zeros((2, 5))] * SMALL_POINT.num_ports
    with pytest.raises(PortShapeError):
        denoise_forward(params, z, t, c, bad)
    with pytest.raises(PortShapeError):
        denoise_forward(params, z, t, c, [np.zeros(s) for s in SMALL_POINT.port_shapes(2)][:1])


def test_domain_and_class_errors():
    params = init_denoiser(SMALL_POINT, 0)
    z, t, c = _inputs(SMALL_POINT, 2)
    with pytest.raises(ScheduleDomainError):
        denoise_forward(params, z, 1.0, c)
    with pytest.raises(ValueError):
        denoise_forward(params, z, t, np.array([0, 2]))
    with pytest.raises(ValueError):
        denoise_forward(params, z[:, :1], t, c)


def test_pure():
    params = perturbed(init_denoiser(SMALL_IMAGE, 0))
    z, t, c = _inputs(SMALL_IMAGE, 2)
    np.testing.assert_array_equal(denoise_forward(params, z, t, c), denoise_forward(params, z, t, c))


def test_embed_time():
    params = init_denoiser(SMALL_POINT, 0)
    grid = np.linspace(0.001, 0.999, 50)
    e = embed_time(params, grid)
    d = np.linalg.norm(e[:, None] - e[None], axis=-1)
    assert np.all(d[~np.eye(50, dtype=bool)] > 0)
    np.testing.assert_array_equal(embed_time(params, 0.3), embed_time(params, 0.3))


def test_embed_condition():
    params = init_denoiser(SMALL_POINT, 0)
    rows = embed_condition(params, np.array([0, 1, NULL]))
    assert not np.allclose(rows[2], rows[0]) and not np.allclose(rows[2], rows[1])
    np.testing.assert_array_equal(embed_condition(params, 1)[0], rows[1])
    one = init_denoiser(DenoiserSpec("point2d", (8,), num_classes=1, embed_dim=4), 0)
    assert one.tensors["cond.table"].shape[0] == 2
    with pytest.raises(ValueError):
        embed_condition(params, 2)


def _l2_loss(spec, z, t, c, target):
    return lambda P: ag.mean(ag.sum_squares(denoise_graph(P, spec, z, t, c) - target))


@pytest.mark.parametrize("spec", [TOY, DenoiserSpec("image16", (2, 2), num_classes=2, embed_dim=4)], ids=["point", "image"])
def test_gradient_check(spec):
    params = {k: v.astype(np.float64) for k, v in perturbed(init_denoiser(spec, 0), 0.2).tensors.items()}
    z, t, c = _inputs(spec, 3)
    c = np.array([0, NULL, 1])
    target = np.random.default_rng(9).standard_normal(z.shape)
    fn = _l2_loss(spec, z, t, c, target)
    assert relative_error(analytic(fn, params), numeric(fn, params)) <= 1e-3


@settings(max_examples=10, deadline=None)
@given(st.integers(1, 4), st.sampled_from(["point2d", "image16"]))
def test_output_shape_property(B, mode):
    spec = SMALL_POINT if mode == "point2d" else SMALL_IMAGE
    params = init_denoiser(spec, 0)
    z, t, c = _inputs(spec, B)
    assert denoise_forward(params, z, t, c).shape == z.shape
    assert [s[0] for s in spec.port_shapes(B)] == [B] * spec.num_ports
