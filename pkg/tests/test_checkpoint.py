import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import array_shapes, arrays

from pgdd.checkpoint import (
    CheckpointError,
    decode,
    encode,
    file_hash,
    load_dataset,
    load_params,
    save_dataset,
    save_params,
)
from pgdd.data import gen_dataset
from pgdd.network import init_denoiser

from conftest import SMALL_IMAGE, SMALL_POINT, guide_for


@settings(max_examples=60, deadline=None)
@given(
    st.dictionaries(
        st.text(min_size=1, max_size=12),
        arrays(np.float32, array_shapes(min_dims=0, max_dims=4, max_side=5), elements=st.floats(width=32, allow_nan=True)),
        max_size=4,
    ),
    st.dictionaries(st.text(max_size=6), st.integers() | st.text(max_size=6), max_size=3),
)
def test_roundtrip_bitwise(tensors, meta):
    m, t = decode(encode(meta, tensors))
    assert m == meta and set(t) == set(tensors)
    for k in tensors:
        assert t[k].dtype == np.float32 and t[k].shape == tensors[k].shape
        assert t[k].tobytes() == tensors[k].tobytes()


@pytest.mark.parametrize("spec", [SMALL_POINT, SMALL_IMAGE])
def test_params_roundtrip(tmp_path, spec):
    base = init_denoiser(spec, 3)
    base.meta.update({"seed": 3, "trainer_step": 0})
    h = save_params(base, tmp_path / "b.pgdd")
    assert h == file_hash(tmp_path / "b.pgdd")
    back = load_params(tmp_path / "b.pgdd", owner="base")
    assert back.checksum() == base.checksum() and back.meta == base.meta and back.spec == base.spec
    # saving the loaded copy gives the same bytes
    assert save_params(back, tmp_path / "c.pgdd") == h
    guide = guide_for(base, "full")
    save_params(guide, tmp_path / "g.pgdd")
    gb = load_params(tmp_path / "g.pgdd")
    assert gb.owner == "guide" and gb.spec == guide.spec and gb.checksum() == guide.checksum()


def test_owner_check(tmp_path):
    save_params(guide_for(init_denoiser(SMALL_POINT, 0), "tiny"), tmp_path / "g.pgdd")
    with pytest.raises(CheckpointError, match="owner"):
        load_params(tmp_path / "g.pgdd", owner="base")


def test_unknown_version():
    buf = bytearray(encode({}, {}))
    buf[4:8] = struct.pack("<I", 99)
    with pytest.raises(CheckpointError, match="version 99"):
        decode(bytes(buf))


@pytest.mark.parametrize(
    "mutate",
    [lambda b: b"XXXX" + b[4:], lambda b: b[:-3], lambda b: b + b"\0"],
)
def test_corrupt(mutate):
    buf = encode({"a": 1}, {"w": np.ones(4, np.float32)})
    with pytest.raises(CheckpointError):
        decode(mutate(buf))


def test_rejects_float64():
    with pytest.raises(CheckpointError):
        encode({}, {"w": np.ones(2)})


def test_dataset_roundtrip(tmp_path):
    ds = gen_dataset("mixture2d", {"count": 50, "holdout": 10}, 4)
    save_dataset(ds, tmp_path / "d.pgdd")
    back = load_dataset(tmp_path / "d.pgdd")
    np.testing.assert_array_equal(back.x, ds.x)
    np.testing.assert_array_equal(back.labels, ds.labels)
    np.testing.assert_array_equal(back.x_holdout, ds.x_holdout)
    assert back.params == ds.params and back.kind == ds.kind
