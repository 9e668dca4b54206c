import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from lanm.io import (
    MAGIC,
    FormatError,
    dir_is_nonempty,
    load_checkpoint,
    load_dataset,
    read_array,
    save_checkpoint,
    save_dataset,
    write_array,
)
from lanm.model import LanmModel, ModelConfig
from lanm.scmgen import GenConfig, gen_dataset
from lanm.train import AdamState


def test_header_layout(tmp_path):
    f = tmp_path / "a.bin"
    write_array(f, np.arange(6.0).reshape(2, 3))
    raw = f.read_bytes()
    assert raw[:4] == b"LANM"
    assert struct.unpack("<III", raw[4:16]) == (1, 2, 3)
    assert len(raw) == 16 + 6 * 8
    assert np.frombuffer(raw[16:], "<f8").tolist() == [0, 1, 2, 3, 4, 5]


@settings(max_examples=30, deadline=None)
@given(arr=hnp.arrays(np.float64, hnp.array_shapes(min_dims=2, max_dims=2, max_side=6), elements=st.floats(allow_nan=False)))
def test_array_roundtrip_exact(tmp_path_factory, arr):
    f = tmp_path_factory.mktemp("arr") / "a.bin"
    write_array(f, arr)
    back = read_array(f)
    assert back.shape == arr.shape and back.tobytes() == arr.tobytes()


def test_vector_stored_as_column(tmp_path):
    write_array(tmp_path / "v.bin", [1.0, 2.0])
    assert read_array(tmp_path / "v.bin").shape == (2, 1)
    with pytest.raises(FormatError):
        write_array(tmp_path / "c.bin", np.zeros((2, 2, 2)))


@pytest.mark.parametrize(
    "payload, msg",
    [
        (b"LAN", "truncated header"),
        (b"XXXX" + struct.pack("<III", 1, 1, 1) + bytes(8), "bad magic"),
        (MAGIC + struct.pack("<III", 9, 1, 1) + bytes(8), "unsupported format version 9"),
        (MAGIC + struct.pack("<III", 1, 2, 2) + bytes(8), "expected 48 bytes"),
    ],
)
def test_corrupt_files(tmp_path, payload, msg):
    f = tmp_path / "bad.bin"
    f.write_bytes(payload)
    with pytest.raises(FormatError, match=msg):
        read_array(f)


def test_dataset_roundtrip(tmp_path):
    ds = gen_dataset(GenConfig(ell=3, M=5, per_segment=4, D=4, seed=2, violation_nodes=[2], certify=True))
    save_dataset(ds, tmp_path / "d")
    back = load_dataset(tmp_path / "d")
    for name in ("x", "z", "n", "coeffs"):
        assert getattr(back, name).tobytes() == getattr(ds, name).tobytes()
    assert np.array_equal(back.labels, ds.labels) and back.M == ds.M
    assert back.spec.to_dict() == ds.spec.to_dict()
    np.testing.assert_array_equal(back.mixing(ds.z), ds.mixing(ds.z))
    assert np.array_equal(back.noise_params.beta, ds.noise_params.beta)


def test_dataset_manifest_contents(tmp_path):
    ds = gen_dataset(GenConfig(ell=2, M=3, per_segment=4, seed=0))
    save_dataset(ds, tmp_path / "d")
    man = load_dataset(tmp_path / "d").manifest
    assert (man["ell"], man["D"], man["M"], man["N"]) == (2, 2, 3, 12)
    assert man["adjacency"] == [[0, 1], [0, 0]]
    assert set(man["files"]) >= {"x", "z", "u", "n"}


def test_identity_mixing_roundtrip(tmp_path):
    ds = gen_dataset(GenConfig(ell=2, M=3, per_segment=4, identity_mixing=True))
    save_dataset(ds, tmp_path / "d")
    assert load_dataset(tmp_path / "d").mixing.identity


def test_missing_manifest(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_dataset(tmp_path)
    with pytest.raises(FileNotFoundError):
        load_checkpoint(tmp_path)


def test_dir_is_nonempty(tmp_path):
    assert not dir_is_nonempty(tmp_path / "nope")
    assert not dir_is_nonempty(tmp_path)
    (tmp_path / "f").write_text("x")
    assert dir_is_nonempty(tmp_path)


def _model():
    return LanmModel.init(ModelConfig(ell=2, u_dim=3, x_dim=2, hidden=4, head_hidden=4), seed=1)


def test_checkpoint_roundtrip(tmp_path):
    m = _model()
    st_ = AdamState(m={"flat": np.arange(5.0)}, v={"flat": np.ones(5)}, step=12)
    save_checkpoint(tmp_path / "c", m, st_, {"seed": 3}, np.array([1.0, 2.0]), np.array([0.5, 4.0]))
    m2, st2, meta, mean, scale = load_checkpoint(tmp_path / "c")
    assert m2.config == m.config
    assert all(m2.params[k].tobytes() == m.params[k].tobytes() for k in m.params)
    assert st2.step == 12 and np.array_equal(st2.m["flat"], np.arange(5.0))
    assert meta == {"seed": 3}
    assert mean.tolist() == [1.0, 2.0] and scale.tolist() == [0.5, 4.0]


def test_checkpoint_without_state(tmp_path):
    save_checkpoint(tmp_path / "c", _model())
    _, st_, meta, mean, _ = load_checkpoint(tmp_path / "c")
    assert st_ is None and meta == {} and mean is None


def test_checkpoint_rejects_mismatched_weights(tmp_path):
    save_checkpoint(tmp_path / "c", _model())
    write_array(tmp_path / "c" / "w_dec.0.W.bin", np.zeros((3, 3)))
    with pytest.raises(Exception):
        load_checkpoint(tmp_path / "c")


def test_checkpoint_kind_checked(tmp_path):
    ds = gen_dataset(GenConfig(ell=2, M=3, per_segment=2))
    save_dataset(ds, tmp_path / "d")
    with pytest.raises(FormatError, match="not a checkpoint"):
        load_checkpoint(tmp_path / "d")


def test_checkpoint_bytes_deterministic(tmp_path):
    save_checkpoint(tmp_path / "a", _model(), meta={"k": 1})
    save_checkpoint(tmp_path / "b", _model(), meta={"k": 1})
    for f in sorted((tmp_path / "a").iterdir()):
        assert f.read_bytes() == (tmp_path / "b" / f.name).read_bytes()


def test_checkpoint_load_keeps_parameter_order(tmp_path):
    model = LanmModel.init(ModelConfig(ell=3, u_dim=2, x_dim=4, hidden=3, head_hidden=2), seed=1)
    save_checkpoint(tmp_path, model)
    loaded, *_ = load_checkpoint(tmp_path)
    assert list(loaded.params) == list(model.params)
