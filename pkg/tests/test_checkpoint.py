import json
import zipfile

import numpy as np
import pytest
import torch

from onestep_face import checkpoint as ckpt
from onestep_face.networks import LatentDiscriminator, seeded


def _rewrite(src, dst, edit_manifest=None, drop=None, replace=None):
    with zipfile.ZipFile(src) as zin, zipfile.ZipFile(dst, "w") as zout:
        for info in zin.infolist():
            data = zin.read(info.filename)
            if info.filename == drop:
                continue
            if info.filename == "manifest.json" and edit_manifest:
                m = json.loads(data)
                edit_manifest(m)
                data = json.dumps(m).encode()
            if replace and info.filename in replace:
                data = replace[info.filename]
            zout.writestr(info, data)


@pytest.fixture
def archive(tmp_path):
    tensors = {"a.w": np.arange(6, dtype=np.float32).reshape(2, 3), "b": np.array([1, 2], dtype=np.int64)}
    path = tmp_path / "x.ckpt"
    ckpt.save_archive(path, tensors, {"kind": "test", "T_L": 999})
    return path, tensors


def test_round_trip_and_byte_identical_resave(archive, tmp_path):
    path, tensors = archive
    arrays, manifest = ckpt.load_archive(path)
    assert manifest["kind"] == "test" and manifest["format_version"] == ckpt.FORMAT_VERSION
    for k, v in tensors.items():
        assert np.array_equal(arrays[k], v) and arrays[k].dtype == v.dtype
    again = tmp_path / "y.ckpt"
    meta = {k: v for k, v in manifest.items() if k not in ("format_version", "tensors")}
    ckpt.save_archive(again, arrays, meta)
    assert again.read_bytes() == path.read_bytes()


@pytest.mark.parametrize(
    "edit, field",
    [
        (lambda m: m.update(format_version=2), "format_version"),
        (lambda m: m["tensors"]["a.w"].update(shape=[3, 2]), "tensors.a.w.shape"),
        (lambda m: m["tensors"]["b"].update(dtype="<f8"), "tensors.b.dtype"),
        (lambda m: m.pop("tensors"), "tensors"),
        (lambda m: m["tensors"].pop("b"), "tensors"),
    ],
)
def test_tampered_manifest_names_field(archive, tmp_path, edit, field):
    path, _ = archive
    bad = tmp_path / "bad.ckpt"
    _rewrite(path, bad, edit_manifest=edit)
    with pytest.raises(ckpt.CheckpointError) as e:
        ckpt.load_archive(bad)
    assert e.value.field == field
    assert field in str(e.value)


def test_missing_manifest_and_non_archive(archive, tmp_path):
    path, _ = archive
    bad = tmp_path / "nomanifest.ckpt"
    _rewrite(path, bad, drop="manifest.json")
    with pytest.raises(ckpt.CheckpointError, match="manifest"):
        ckpt.load_archive(bad)
    junk = tmp_path / "junk.ckpt"
    junk.write_bytes(b"not a zip")
    with pytest.raises(ckpt.CheckpointError, match="archive"):
        ckpt.load_archive(junk)


def test_module_shape_mismatch_is_rejected():
    with seeded(0):
        small, big = LatentDiscriminator(4, 16), LatentDiscriminator(4, 32)
    arrays = ckpt.module_tensors("d", small)
    with pytest.raises(ckpt.CheckpointError, match="shape"):
        ckpt.load_module("d", big, arrays)
    del arrays[next(iter(arrays))]
    with pytest.raises(ckpt.CheckpointError, match="missing"):
        ckpt.load_module("d", small, arrays)


def test_optimizer_state_round_trip():
    with seeded(0):
        m = LatentDiscriminator(4, 16)
    opt = torch.optim.AdamW(m.parameters(), lr=1e-3, weight_decay=1e-2)
    m(torch.randn(2, 4, 4, 4), torch.tensor([1, 2])).sum().backward()
    opt.step()
    tensors, groups = ckpt.optimizer_tensors("o", opt)
    opt2 = torch.optim.AdamW(m.parameters(), lr=5.0)
    ckpt.load_optimizer("o", opt2, tensors, json.loads(json.dumps(groups)))
    a, b = opt.state_dict(), opt2.state_dict()
    assert a["param_groups"] == b["param_groups"]
    for i in a["state"]:
        for k in a["state"][i]:
            assert torch.equal(torch.as_tensor(a["state"][i][k]), torch.as_tensor(b["state"][i][k]))


def test_tensor_hash_detects_single_bit():
    t = {"x": torch.zeros(4)}
    h = ckpt.tensor_hash(t)
    assert ckpt.tensor_hash({"x": torch.zeros(4)}) == h
    assert ckpt.tensor_hash({"x": torch.tensor([0.0, 0.0, 0.0, 1e-45])}) != h


def test_zero_dim_tensors_keep_their_shape(tmp_path):
    ckpt.save_archive(tmp_path / "s.ckpt", {"step": np.array(3.0, dtype=np.float32)}, {})
    arrays, _ = ckpt.load_archive(tmp_path / "s.ckpt")
    assert arrays["step"].shape == () and arrays["step"] == 3.0
