"""Checkpoint archive: parameters keyed ``{subnet}/{layer}/{tensor}`` plus JSON config.

The archive is a zip file with fixed timestamps, so identical states give
byte-identical files.
"""

from __future__ import annotations

import io
import json
import zipfile
from pathlib import Path

import numpy as np
import torch

from .config import RunConfig
from .training import TrainState

FORMAT_TAG = "facedeblur-checkpoint"
FORMAT_VERSION = 1
_EPOCH = (1980, 1, 1, 0, 0, 0)


def _npy_bytes(arr: np.ndarray) -> bytes:
    buf = io.BytesIO()
    np.lib.format.write_array(buf, np.ascontiguousarray(arr), allow_pickle=False)
    return buf.getvalue()


def _npy_load(data: bytes) -> np.ndarray:
    return np.lib.format.read_array(io.BytesIO(data), allow_pickle=False)


def param_key(name: str) -> str:
    """``coarse.scale1.head.weight`` -> ``coarse/scale1.head/weight``."""
    subnet, rest = name.split(".", 1)
    layer, _, tensor = rest.rpartition(".")
    return f"{subnet}/{layer}/{tensor}"


def _write(zf: zipfile.ZipFile, name: str, data: bytes) -> None:
    info = zipfile.ZipInfo(name, date_time=_EPOCH)
    info.compress_type = zipfile.ZIP_DEFLATED
    info.external_attr = 0o644 << 16
    zf.writestr(info, data)


def save_checkpoint(path: Path, state: TrainState, cfg: RunConfig) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with zipfile.ZipFile(path, "w") as zf:
        _write(zf, "format.json", json.dumps({"format": FORMAT_TAG, "version": FORMAT_VERSION}).encode())
        _write(zf, "config.json", json.dumps(cfg.to_dict(), sort_keys=True, indent=1).encode())
        _write(zf, "state.json", json.dumps({"stage": state.stage, "iteration": state.iteration}).encode())
        for name, tensor in state.model.state_dict().items():
            _write(zf, f"params/{param_key(name)}.npy", _npy_bytes(tensor.detach().cpu().numpy()))


def _read_format(zf: zipfile.ZipFile, path: Path) -> None:
    try:
        fmt = json.loads(zf.read("format.json"))
    except KeyError:
        raise ValueError(f"{path} is not a checkpoint (no format tag)") from None
    if fmt.get("format") != FORMAT_TAG or fmt.get("version") != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint format {fmt}")


def load_checkpoint(path: Path, cfg: RunConfig | None = None) -> tuple[TrainState, RunConfig]:
    """Rebuild the training state stored at ``path``.

    The stored config is used unless ``cfg`` is given; parameter shapes must
    match either way.
    """
    path = Path(path)
    with zipfile.ZipFile(path) as zf:
        _read_format(zf, path)
        if cfg is None:
            cfg = RunConfig.from_dict(json.loads(zf.read("config.json")))
        meta = json.loads(zf.read("state.json"))
        state = cfg.make_state()
        model_sd = state.model.state_dict()
        loaded = {}
        for name, ref in model_sd.items():
            key = f"params/{param_key(name)}.npy"
            try:
                arr = _npy_load(zf.read(key))
            except KeyError:
                raise ValueError(f"{path}: missing parameter {key}") from None
            if tuple(arr.shape) != tuple(ref.shape):
                raise ValueError(f"{path}: {key} has shape {arr.shape}, model expects {tuple(ref.shape)}")
            loaded[name] = torch.from_numpy(arr.copy()).to(ref.dtype)
        state.model.load_state_dict(loaded)

    state.stage = int(meta["stage"])
    state.iteration = int(meta["iteration"])
    return state, cfg


def load_model(path: Path):
    """Model in eval mode plus its config, for inference and evaluation."""
    state, cfg = load_checkpoint(path)
    state.model.eval()
    return state.model, cfg
