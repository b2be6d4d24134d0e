import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from eqflow._util import FormatError, derive_rng, derive_seed
from eqflow.io import (
    DATASET_MAGIC,
    ROLLOUT_MAGIC,
    atomic_write,
    load_dataset,
    load_rollout,
    pack_array,
    save_dataset,
    save_rollout,
    unpack_array,
)


def test_header_layout():
    buf = pack_array(np.zeros((3, 2)))
    assert buf[:5] == b"EQFD1"
    assert struct.unpack_from("<III", buf, 5) == (2, 3, 2)
    assert len(buf) == 5 + 12 + 6 * 4


@settings(max_examples=50, deadline=None)
@given(arrays(np.float32, st.lists(st.integers(1, 4), min_size=1, max_size=4).map(tuple), elements=st.floats(-1e6, 1e6, width=32)))
def test_roundtrip_property(arr):
    np.testing.assert_array_equal(unpack_array(pack_array(arr)), arr)


def test_file_roundtrip(tmp_path):
    arr = np.random.default_rng(0).normal(size=(4, 2, 3, 3)).astype(np.float32)
    save_dataset(tmp_path / "d.eqf", arr)
    np.testing.assert_array_equal(load_dataset(tmp_path / "d.eqf"), arr)
    save_rollout(tmp_path / "r.eqf", arr)
    np.testing.assert_array_equal(load_rollout(tmp_path / "r.eqf"), arr)


def test_magic_checked(tmp_path):
    save_rollout(tmp_path / "r.eqf", np.zeros(3))
    with pytest.raises(FormatError):
        load_dataset(tmp_path / "r.eqf")
    with pytest.raises(FormatError):
        unpack_array(b"NOPE!" + b"\0" * 20)


@pytest.mark.parametrize("cut", [1, 4, 7])
def test_truncation_detected(cut):
    buf = pack_array(np.ones((2, 2)), ROLLOUT_MAGIC)
    with pytest.raises(FormatError):
        unpack_array(buf[:-cut], ROLLOUT_MAGIC)


def test_bad_rank():
    with pytest.raises(FormatError):
        unpack_array(DATASET_MAGIC + struct.pack("<I", 0))


def test_atomic_write_leaves_no_temp(tmp_path):
    target = tmp_path / "x.bin"
    target.write_bytes(b"old")
    atomic_write(target, b"new")
    assert target.read_bytes() == b"new"
    assert [p.name for p in tmp_path.iterdir()] == ["x.bin"]


def test_derived_streams():
    a = derive_rng(3, "probes").random(4)
    b = derive_rng(3, "probes").random(4)
    c = derive_rng(3, "init").random(4)
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, c)
    assert derive_seed(1, "x") == derive_seed(1, "x") != derive_seed(2, "x")
