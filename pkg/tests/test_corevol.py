import json
import os

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from bbstat.corevol import (
    BVOLError, BlockVector, DatasetManifest, Mask, Volume, block_offsets, extract_block,
    load_manifest, load_mask, load_volume, save_manifest, save_mask, save_volume,
)
from bbstat.synth import default_spec, dw_signal, generate_phantom


def test_roundtrip_small(tmp_path):
    vol = Volume(np.arange(4.0).reshape(2, 2, 1, 1))
    save_volume(vol, tmp_path / "a.bvol")
    back = load_volume(tmp_path / "a.bvol")
    assert back == vol
    assert back.dims == (2, 2, 1) and back.channels == 1


def test_truncated_payload(tmp_path):
    vol = Volume(np.arange(8.0).reshape(2, 2, 2, 1))
    p = tmp_path / "a.bvol"
    save_volume(vol, p)
    raw = p.read_bytes()
    p.write_bytes(raw[:-4])
    with pytest.raises(BVOLError, match="payload length mismatch"):
        load_volume(p)


def test_non_finite_rejected_before_write(tmp_path):
    arr = np.zeros((2, 2, 1, 1))
    arr[0, 0, 0, 0] = np.nan
    with pytest.raises(BVOLError):
        save_volume(Volume(arr), tmp_path / "n.bvol")
    assert not (tmp_path / "n.bvol").exists()


def test_phantom_roundtrip_3x3(tmp_path):
    spec = default_spec(64)
    truth = generate_phantom(spec)
    vol = dw_signal(truth, spec.b_value, spec.s0, spec.gradients)
    small = Volume(vol.data[20:23, 20:23])
    save_volume(small, tmp_path / "p.bvol")
    back = load_volume(tmp_path / "p.bvol")
    assert back.dims == (3, 3, 1) and back.channels == 6
    np.testing.assert_allclose(back.data, small.data, rtol=1e-6)


def test_file_size_matches_format(tmp_path):
    spec = default_spec(64)
    vol = dw_signal(generate_phantom(spec), spec.b_value, spec.s0, spec.gradients)
    p = tmp_path / "big.bvol"
    save_volume(vol, p)
    raw = p.read_bytes()
    header_len = raw.index(b"\n") + 1
    assert os.path.getsize(p) == header_len + 64 * 64 * 6 * 4


def test_save_is_deterministic(tmp_path):
    vol = Volume(np.random.default_rng(0).normal(size=(3, 4, 2, 2)))
    save_volume(vol, tmp_path / "a.bvol")
    save_volume(vol, tmp_path / "b.bvol")
    assert (tmp_path / "a.bvol").read_bytes() == (tmp_path / "b.bvol").read_bytes()


def test_x_varies_fastest(tmp_path):
    arr = np.zeros((3, 2, 1, 1))
    arr[1, 0, 0, 0] = 7.0
    save_volume(Volume(arr), tmp_path / "o.bvol")
    raw = (tmp_path / "o.bvol").read_bytes()
    payload = np.frombuffer(raw[raw.index(b"\n") + 1:], dtype="<f4")
    assert payload[1] == 7.0


def test_header_is_json(tmp_path):
    save_volume(Volume(np.ones((2, 3, 1, 2))), tmp_path / "h.bvol")
    raw = (tmp_path / "h.bvol").read_bytes()
    head = json.loads(raw[: raw.index(b"\n")])
    assert isinstance(head, dict)


def test_mask_roundtrip(tmp_path):
    m = Mask(np.eye(4, dtype=bool)[..., None])
    save_mask(m, tmp_path / "m.bvol")
    assert load_mask(tmp_path / "m.bvol") == m


def test_manifest_relative_paths(tmp_path):
    for i in range(2):
        save_volume(Volume(np.full((2, 2, 1, 1), float(i))), tmp_path / f"v{i}.bvol")
    man = DatasetManifest([(str(tmp_path / "v0.bvol"), 1), (str(tmp_path / "v1.bvol"), 2)])
    save_manifest(man, tmp_path / "manifest.json", relative_to=tmp_path)
    back = load_manifest(tmp_path / "manifest.json")
    assert list(back.groups) == [1, 2]
    assert load_volume(back.paths[1]).data[0, 0, 0, 0] == 1.0


def test_block_radius_zero_is_voxel():
    vol = Volume(np.random.default_rng(1).normal(size=(3, 3, 1, 4)))
    blk = extract_block(vol, (1, 1, 0), 0)
    assert isinstance(blk, BlockVector)
    np.testing.assert_array_equal(blk.values, vol.data[1, 1, 0])


@pytest.mark.parametrize("dims,n", [((5, 5, 5), 27), ((5, 5, 1), 9)])
def test_constant_block(dims, n):
    vol = Volume(np.full(dims + (1,), 5.0))
    blk = extract_block(vol, (2, 2, dims[2] // 2), 1)
    assert blk.values.shape == (n,) and np.all(blk.values == 5.0)


def test_block_out_of_bounds():
    vol = Volume(np.zeros((4, 4, 4, 1)))
    with pytest.raises(IndexError):
        extract_block(vol, (0, 0, 0), 1)


def test_block_offsets_order():
    off = block_offsets(1, True)
    assert len(off) == 9
    assert [tuple(o) for o in off] == sorted(tuple(o) for o in off)


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 4), st.integers(1, 3),
                                    st.integers(1, 3)),
              elements=st.floats(-1e6, 1e6, width=32)))
def test_roundtrip_property(tmp_path_factory, arr):
    p = tmp_path_factory.mktemp("rt") / "x.bvol"
    save_volume(Volume(arr), p)
    np.testing.assert_array_equal(load_volume(p).data, arr)
