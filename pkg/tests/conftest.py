import numpy as np
import pytest

from pgdd.guide import GuideSpec, init_guide
from pgdd.network import DenoiserSpec, init_denoiser

SMALL_POINT = DenoiserSpec("point2d", (16, 16), num_classes=2, embed_dim=8, sigma_data=1.5)
SMALL_IMAGE = DenoiserSpec("image16", (4, 8), num_classes=3, embed_dim=8)


@pytest.fixture(scope="session")
def point_base():
    return init_denoiser(SMALL_POINT, 0)


@pytest.fixture(scope="session")
def image_base():
    return init_denoiser(SMALL_IMAGE, 0)


def perturbed(params, scale=0.3, seed=1):
    """Copy of ``params`` with every tensor nudged, so zero layers become live."""
    out = params.copy()
    rng = np.random.default_rng(seed)
    for k, v in out.tensors.items():
        out.tensors[k] = (v + scale * rng.standard_normal(v.shape)).astype(np.float32)
    return out


def guide_for(base, variant, zero_init=True, seed=0):
    return init_guide(GuideSpec(variant, base.spec, zero_init=zero_init), seed, base if variant == "full" else None)


@pytest.fixture(scope="session")
def pipeline(tmp_path_factory):
    """Run the shipped recipes once per session (tens of minutes on one core)."""
    import pipeline as pl

    return pl.build(pl.root_dir(tmp_path_factory))


def pytest_terminal_summary(terminalreporter):
    import pipeline as pl

    if not pl.ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(pl.ACCEPTANCE):
        ok, detail = pl.ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}")
