"""Checkpoint archives: named tensors plus a JSON manifest in one zip file.

Entries are stored uncompressed with a fixed timestamp and sorted names, so the
same content always produces the same bytes.
"""
from __future__ import annotations

import io
import json
import zipfile
from pathlib import Path

import numpy as np
import torch

FORMAT_VERSION = 1
_EPOCH = (1980, 1, 1, 0, 0, 0)


class CheckpointError(ValueError):
    def __init__(self, field: str, message: str):
        super().__init__(f"checkpoint field {field!r}: {message}")
        self.field = field


def _npy_bytes(arr: np.ndarray) -> bytes:
    buf = io.BytesIO()
    # asarray keeps 0-d arrays 0-d (ascontiguousarray would promote them)
    np.lib.format.write_array(buf, np.asarray(arr, order="C"), allow_pickle=False)
    return buf.getvalue()


def _write(zf, name, data: bytes):
    info = zipfile.ZipInfo(name, date_time=_EPOCH)
    info.compress_type = zipfile.ZIP_STORED
    info.external_attr = 0o644 << 16
    zf.writestr(info, data)


def save_archive(path, tensors: dict, manifest: dict) -> None:
    arrays = {k: (v.detach().cpu().numpy() if torch.is_tensor(v) else np.asarray(v)) for k, v in tensors.items()}
    manifest = dict(manifest)
    manifest["format_version"] = FORMAT_VERSION
    manifest["tensors"] = {k: {"shape": list(a.shape), "dtype": a.dtype.str} for k, a in sorted(arrays.items())}
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with zipfile.ZipFile(tmp, "w") as zf:
        _write(zf, "manifest.json", json.dumps(manifest, sort_keys=True, indent=1).encode())
        for k in sorted(arrays):
            _write(zf, f"tensors/{k}.npy", _npy_bytes(arrays[k]))
    tmp.replace(path)


def load_archive(path) -> tuple[dict, dict]:
    """Return ``(arrays, manifest)``; raises ``CheckpointError`` on inconsistency."""
    try:
        zf = zipfile.ZipFile(path)
    except zipfile.BadZipFile:
        raise CheckpointError("archive", f"{path} is not a checkpoint archive") from None
    with zf:
        try:
            manifest = json.loads(zf.read("manifest.json"))
        except KeyError:
            raise CheckpointError("manifest.json", "missing") from None
        version = manifest.get("format_version")
        if version != FORMAT_VERSION:
            raise CheckpointError("format_version", f"expected {FORMAT_VERSION}, found {version!r}")
        records = manifest.get("tensors")
        if not isinstance(records, dict):
            raise CheckpointError("tensors", "missing tensor table")
        names = {n[len("tensors/") : -len(".npy")] for n in zf.namelist() if n.startswith("tensors/")}
        if names != set(records):
            diff = sorted(names.symmetric_difference(records))
            raise CheckpointError("tensors", f"tensor table does not match archive entries: {diff[:5]}")
        arrays = {}
        for name, rec in records.items():
            arr = np.lib.format.read_array(io.BytesIO(zf.read(f"tensors/{name}.npy")), allow_pickle=False)
            if list(arr.shape) != list(rec.get("shape", [])):
                raise CheckpointError(f"tensors.{name}.shape", f"manifest says {rec.get('shape')}, data is {list(arr.shape)}")
            if arr.dtype.str != rec.get("dtype"):
                raise CheckpointError(f"tensors.{name}.dtype", f"manifest says {rec.get('dtype')}, data is {arr.dtype.str}")
            arrays[name] = arr
    return arrays, manifest


def module_tensors(prefix: str, module: torch.nn.Module) -> dict:
    return {f"{prefix}.{k}": v.detach().cpu().numpy().copy() for k, v in module.state_dict().items()}


def load_module(prefix: str, module: torch.nn.Module, arrays: dict) -> None:
    state = module.state_dict()
    for k, v in state.items():
        name = f"{prefix}.{k}"
        if name not in arrays:
            raise CheckpointError(name, "missing from checkpoint")
        if tuple(arrays[name].shape) != tuple(v.shape):
            raise CheckpointError(name, f"shape {tuple(arrays[name].shape)} does not fit model shape {tuple(v.shape)}")
    module.load_state_dict({k: torch.from_numpy(arrays[f"{prefix}.{k}"].copy()) for k in state})


def optimizer_tensors(prefix: str, opt: torch.optim.Optimizer) -> tuple[dict, list]:
    sd = opt.state_dict()
    tensors = {}
    for idx, st in sd["state"].items():
        for k, v in st.items():
            tensors[f"{prefix}.{idx}.{k}"] = v.detach().cpu().numpy().copy() if torch.is_tensor(v) else np.asarray(v)
    return tensors, sd["param_groups"]


def load_optimizer(prefix: str, opt: torch.optim.Optimizer, arrays: dict, param_groups: list) -> None:
    state: dict = {}
    head = prefix + "."
    for name, arr in arrays.items():
        if not name.startswith(head):
            continue
        idx, key = name[len(head):].split(".", 1)
        state.setdefault(int(idx), {})[key] = torch.from_numpy(arr.copy())
    # JSON turns tuples into lists
    groups = [{k: tuple(v) if k == "betas" else v for k, v in g.items()} for g in param_groups]
    opt.load_state_dict({"state": state, "param_groups": groups})


def tensor_hash(tensors) -> str:
    """Hash over named tensors, used for bit-identity checks."""
    import hashlib

    h = hashlib.sha256()
    for name, t in sorted(tensors.items()):
        arr = t.detach().cpu().numpy() if torch.is_tensor(t) else np.asarray(t)
        h.update(name.encode())
        h.update(np.ascontiguousarray(arr).tobytes())
    return h.hexdigest()
