"""Checkpoint directories: ``manifest.json`` plus one raw little-endian array per tensor.

Uses the same array convention as scene containers. A full checkpoint holds
model parameters, AdamW moments and the torch RNG state so a resumed run
retraces the original one; an encoder export keeps only the encoder weights.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import torch

from .model import EncoderOnly, ModelConfig, SceneMAE
from .teacher import ContainerError, MissingArrayError, read_array, write_array

_DTYPE_NAME = {torch.float32: "f32", torch.float64: "f64", torch.int64: "i64", torch.int32: "i32", torch.uint8: "u8"}
_TORCH_DTYPE = {v: k for k, v in _DTYPE_NAME.items()}


def _write_tensor(directory, name, tensor):
    t = tensor.detach().cpu()
    return write_array(directory, name, t.numpy(), _DTYPE_NAME[t.dtype])


def save_checkpoint(path, model: SceneMAE | EncoderOnly, optimizer=None, meta=None, encoder_only=False) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    state = model.state_dict()
    if encoder_only:
        state = {k: v for k, v in state.items() if k.startswith(SceneMAE.ENCODER_PREFIXES)}
    arrays = [_write_tensor(path, f"param/{k}", v) for k, v in state.items()]

    optim_steps = {}
    if optimizer is not None and not encoder_only:
        names = [n for n, _ in model.named_parameters()]
        by_id = {id(p): n for n, p in model.named_parameters()}
        order = [p for g in optimizer.param_groups for p in g["params"]]
        assert sorted(by_id[id(p)] for p in order) == sorted(names)
        for p in order:
            st = optimizer.state.get(p)
            if not st:
                continue
            n = by_id[id(p)]
            arrays.append(_write_tensor(path, f"optim/{n}/exp_avg", st["exp_avg"]))
            arrays.append(_write_tensor(path, f"optim/{n}/exp_avg_sq", st["exp_avg_sq"]))
            optim_steps[n] = float(st["step"])
        arrays.append(_write_tensor(path, "rng/torch", torch.get_rng_state()))

    manifest = {
        "kind": "encoder" if encoder_only else "full",
        "model_config": model.config.to_dict(),
        "arrays": arrays,
        "optim_steps": optim_steps,
        "meta": meta or {},
    }
    (path / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return path


def read_checkpoint(path) -> dict:
    """Manifest plus all arrays as tensors, keyed by array name."""
    path = Path(path)
    mpath = path / "manifest.json"
    if not mpath.exists():
        raise ContainerError(f"{path} is not a checkpoint (no manifest.json)")
    manifest = json.loads(mpath.read_text())
    tensors = {}
    for entry in manifest["arrays"]:
        arr = read_array(path, entry)
        tensors[entry["name"]] = torch.from_numpy(arr).to(_TORCH_DTYPE[entry["dtype"]])
    return {"manifest": manifest, "tensors": tensors}


def load_model(path, dtype=None):
    """Rebuild the network stored at ``path``: :class:`SceneMAE` for full checkpoints, else :class:`EncoderOnly`."""
    ck = read_checkpoint(path)
    config = ModelConfig.from_dict(ck["manifest"]["model_config"])
    model = SceneMAE(config) if ck["manifest"]["kind"] == "full" else EncoderOnly(config)
    state = {k[len("param/"):]: v for k, v in ck["tensors"].items() if k.startswith("param/")}
    missing = set(model.state_dict()) - set(state)
    if missing:
        raise MissingArrayError(f"checkpoint lacks parameters {sorted(missing)[:5]}")
    model.load_state_dict(state)
    if dtype is not None:
        model.to(dtype)
    return model, ck


def restore_optimizer(optimizer, model, ck) -> None:
    by_name = dict(model.named_parameters())
    for n, step in ck["manifest"].get("optim_steps", {}).items():
        p = by_name[n]
        optimizer.state[p] = {
            "step": torch.tensor(step),
            "exp_avg": ck["tensors"][f"optim/{n}/exp_avg"].clone(),
            "exp_avg_sq": ck["tensors"][f"optim/{n}/exp_avg_sq"].clone(),
        }
    if "rng/torch" in ck["tensors"]:
        torch.set_rng_state(ck["tensors"]["rng/torch"])


def export_encoder(checkpoint_path, out_path) -> Path:
    model, ck = load_model(checkpoint_path)
    meta = dict(ck["manifest"].get("meta", {}))
    meta["exported_from"] = str(checkpoint_path)
    return save_checkpoint(out_path, model, meta=meta, encoder_only=True)


def tensors_equal(a: dict, b: dict) -> bool:
    return a.keys() == b.keys() and all(np.array_equal(a[k].numpy(), b[k].numpy()) for k in a)
