"""On-disk formats: LANM binary arrays, dataset and checkpoint directories.

A ``.bin`` array file is a 16-byte header (``b"LANM"``, then format version,
rows and cols as little-endian ``u32``) followed by ``rows * cols`` float64
little-endian values in row-major order.
"""

from __future__ import annotations

import json
import os
import struct
from pathlib import Path

import numpy as np

from .scmgen import Dataset, Mixing, ScmSpec, SegmentNoiseParams

MAGIC = b"LANM"
VERSION = 1
_HEADER = struct.Struct("<4sIII")


class FormatError(ValueError):
    pass


def write_array(path, arr) -> None:
    arr = np.asarray(arr, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr.reshape(-1, 1)
    if arr.ndim != 2:
        raise FormatError(f"only 2-D arrays are stored, got shape {arr.shape}")
    rows, cols = arr.shape
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, rows, cols))
        fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def read_array(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise FormatError(f"{path}: truncated header")
    magic, version, rows, cols = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise FormatError(f"{path}: unsupported format version {version}")
    expected = _HEADER.size + 8 * rows * cols
    if len(data) != expected:
        raise FormatError(f"{path}: expected {expected} bytes, found {len(data)}")
    arr = np.frombuffer(data, dtype="<f8", offset=_HEADER.size).reshape(rows, cols)
    return arr.astype(np.float64)


def write_json(path, obj) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_json(path):
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


# ---------------------------------------------------------------------------
# datasets
# ---------------------------------------------------------------------------


def save_dataset(ds: Dataset, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    arrays = {"x": ds.x, "z": ds.z, "u": ds.u}
    if ds.n is not None:
        arrays["n"] = ds.n
    if ds.zbar is not None:
        arrays["zbar"] = ds.zbar
    if ds.noise_params is not None:
        arrays["alpha"] = ds.noise_params.alpha
        arrays["beta"] = ds.noise_params.beta
    if ds.coeffs is not None:
        arrays["coeffs"] = ds.coeffs.reshape(ds.coeffs.shape[0], -1)
    if ds.mixing is not None and not ds.mixing.identity:
        arrays.update(ds.mixing.arrays())
    files = {}
    for name, arr in arrays.items():
        fname = f"{name}.bin"
        write_array(out / fname, arr)
        files[name] = fname
    manifest = dict(ds.manifest)
    manifest.update(
        {
            "ell": ds.ell,
            "D": ds.D,
            "M": ds.M,
            "N": ds.N,
            "files": files,
            "mixing_identity": bool(ds.mixing is not None and ds.mixing.identity),
            "mixing_slope": None if ds.mixing is None else ds.mixing.slope,
        }
    )
    if ds.spec is not None:
        manifest["spec"] = ds.spec.to_dict()
        manifest["adjacency"] = ds.spec.effective_adjacency().tolist()
    write_json(out / "manifest.json", manifest)
    return out


def load_dataset(path) -> Dataset:
    root = Path(path)
    if not (root / "manifest.json").is_file():
        raise FileNotFoundError(f"{root}: no manifest.json")
    man = read_json(root / "manifest.json")
    files = man["files"]

    def get(name):
        return read_array(root / files[name]) if name in files else None

    u = get("u")
    labels = np.argmax(u, axis=1)
    spec = ScmSpec.from_dict(man["spec"]) if man.get("spec") else None
    params = None
    if "alpha" in files:
        params = SegmentNoiseParams(get("alpha"), get("beta"))
    coeffs = get("coeffs")
    if coeffs is not None:
        coeffs = coeffs.reshape(coeffs.shape[0], man["ell"], man["ell"])
    mixing = None
    if man.get("mixing_identity"):
        mixing = Mixing([np.eye(man["D"])] * 3, identity=True)
    elif "mixing_W0" in files:
        weights = [get(f"mixing_W{k}") for k in range(3)]
        embed = get("mixing_embed")
        mixing = Mixing(weights, embed, slope=man.get("mixing_slope") or 0.2)
    return Dataset(
        x=get("x"),
        z=get("z"),
        labels=labels,
        M=int(man["M"]),
        n=get("n"),
        zbar=get("zbar"),
        spec=spec,
        noise_params=params,
        coeffs=coeffs,
        mixing=mixing,
        manifest=man,
    )


def dir_is_nonempty(path) -> bool:
    return os.path.isdir(path) and any(os.scandir(path))


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(out_dir, model, state=None, meta=None, x_mean=None, x_scale=None) -> Path:
    """Write ``manifest.json`` plus one ``.bin`` per weight tensor and Adam moment."""
    from dataclasses import asdict

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    weights = {}
    for name, arr in model.params.items():
        fname = f"w_{name}.bin"
        write_array(out / fname, arr)
        weights[name] = {"file": fname, "shape": list(arr.shape)}
    manifest = {"kind": "checkpoint", "format_version": VERSION, "model": asdict(model.config), "weights": weights}
    if x_mean is not None:
        write_array(out / "x_mean.bin", np.asarray(x_mean).reshape(1, -1))
        write_array(out / "x_scale.bin", np.asarray(x_scale).reshape(1, -1))
        manifest["standardize"] = {"mean": "x_mean.bin", "scale": "x_scale.bin"}
    if state is not None:
        adam = {"step": int(state.step), "moments": {}}
        for key in sorted(state.m):
            write_array(out / f"adam_m_{key}.bin", state.m[key].reshape(1, -1))
            write_array(out / f"adam_v_{key}.bin", state.v[key].reshape(1, -1))
            adam["moments"][key] = {"m": f"adam_m_{key}.bin", "v": f"adam_v_{key}.bin", "size": int(state.m[key].size)}
        manifest["adam"] = adam
    manifest["meta"] = meta or {}
    write_json(out / "manifest.json", manifest)
    return out


def load_checkpoint(path):
    """Returns ``(model, state_or_None, meta, x_mean_or_None, x_scale_or_None)``."""
    from .model import LanmModel, ModelConfig
    from .train import AdamState

    root = Path(path)
    if not (root / "manifest.json").is_file():
        raise FileNotFoundError(f"{root}: no manifest.json")
    man = read_json(root / "manifest.json")
    if man.get("kind") != "checkpoint":
        raise FormatError(f"{root}: not a checkpoint directory")
    config = ModelConfig(**man["model"])
    params = {}
    for name, info in man["weights"].items():
        arr = read_array(root / info["file"])
        params[name] = arr.reshape(info["shape"])
    expected = LanmModel.init(config, seed=0)
    if set(expected.params) != set(params) or any(expected.params[k].shape != params[k].shape for k in params):
        raise FormatError(f"{root}: weights do not match the stored architecture")
    # canonical order: the optimiser's flat moment buffers follow it
    model = LanmModel(config, {k: params[k] for k in expected.params})
    state = None
    if "adam" in man:
        state = AdamState(step=int(man["adam"]["step"]))
        for key, info in man["adam"]["moments"].items():
            state.m[key] = read_array(root / info["m"]).ravel().copy()
            state.v[key] = read_array(root / info["v"]).ravel().copy()
    x_mean = x_scale = None
    if "standardize" in man:
        x_mean = read_array(root / man["standardize"]["mean"]).ravel()
        x_scale = read_array(root / man["standardize"]["scale"]).ravel()
    return model, state, man.get("meta", {}), x_mean, x_scale
