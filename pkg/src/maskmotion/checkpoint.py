"""Flat-file checkpoints: manifest.json + weights.f32.

The weights file is raw little-endian float32, tensors packed back to back in
manifest order (sorted by name). The manifest records every tensor's name,
shape and byte offset, plus the full run config, the adapter activation, and
the training recipe, so a checkpoint can be rebuilt without any pickled code.
Names are namespaced "model.", "adapter." and "lora.".
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np
import torch

from .adapter import AdapterConfig, MaskAdapter
from .lora import LoraConfig, attach_lora, base_named_parameters, lora_named_parameters
from .model import MMDiT, ModelConfig

MANIFEST_NAME = "manifest.json"
WEIGHTS_NAME = "weights.f32"
FORMAT = "maskmotion-flat-f32/1"


class CheckpointError(RuntimeError):
    """Raised for malformed or inconsistent checkpoint files."""


def _to_f32(t: torch.Tensor) -> np.ndarray:
    return t.detach().cpu().numpy().astype("<f4", copy=False)


def named_tensors(model: MMDiT, adapter: MaskAdapter | None = None) -> dict[str, np.ndarray]:
    """All persistable tensors under canonical namespaced names."""
    out = {}
    for name, p in base_named_parameters(model):
        out[f"model.{name}"] = _to_f32(p)
    for name, p in lora_named_parameters(model):
        out[f"lora.{name.replace('.base.', '.')}"] = _to_f32(p)
    if adapter is not None:
        for name, p in adapter.named_parameters():
            out[f"adapter.{name}"] = _to_f32(p)
    return out


def weights_digest(tensors: dict[str, np.ndarray], namespace: str | None = None) -> str:
    """sha256 over the raw bytes of the (sorted) tensors in a namespace."""
    h = hashlib.sha256()
    for name in sorted(tensors):
        if namespace is not None and not name.startswith(namespace + "."):
            continue
        h.update(np.ascontiguousarray(tensors[name]).tobytes())
    return h.hexdigest()


def base_hash(model: MMDiT) -> str:
    return weights_digest(named_tensors(model), "model")


def save_checkpoint(
    ckpt_dir: Path,
    model: MMDiT,
    adapter: MaskAdapter | None = None,
    config: dict | None = None,
    train_info: dict | None = None,
) -> dict:
    """Write manifest.json + weights.f32; returns the manifest."""
    ckpt_dir = Path(ckpt_dir)
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    tensors = named_tensors(model, adapter)
    params = []
    offset = 0
    for name in sorted(tensors):
        arr = tensors[name]
        params.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += arr.nbytes
    manifest = {
        "format": FORMAT,
        "endianness": "little",
        "dtype": "float32",
        "total_bytes": offset,
        "model_config": vars(model.cfg).copy(),
        "adapter_config": vars(adapter.cfg).copy() if adapter is not None else None,
        "activation": adapter.cfg.activation if adapter is not None else None,
        "lora_layers": sorted(model.lora_layers),
        "lora_config": _lora_cfg_dict(model),
        "config": config or {},
        "train": train_info or {},
        "params": params,
        "hashes": {
            "model": weights_digest(tensors, "model"),
            "adapter": weights_digest(tensors, "adapter") if adapter is not None else None,
            "lora": weights_digest(tensors, "lora") if model.lora_layers else None,
        },
    }
    with open(ckpt_dir / WEIGHTS_NAME, "wb") as fh:
        for entry in params:
            fh.write(np.ascontiguousarray(tensors[entry["name"]]).tobytes())
    (ckpt_dir / MANIFEST_NAME).write_text(json.dumps(manifest, sort_keys=True, indent=2) + "\n")
    return manifest


def _lora_cfg_dict(model: MMDiT) -> dict | None:
    if not model.lora_layers:
        return None
    block = model.blocks[sorted(model.lora_layers)[0]]
    wrapper = block.q_v
    return {"rank": wrapper.rank, "alpha": wrapper.alpha}


def read_manifest(ckpt_dir: Path) -> dict:
    path = Path(ckpt_dir) / MANIFEST_NAME
    if not path.exists():
        raise CheckpointError(f"{ckpt_dir} has no {MANIFEST_NAME}")
    manifest = json.loads(path.read_text())
    if manifest.get("format") != FORMAT:
        raise CheckpointError(f"unsupported checkpoint format {manifest.get('format')!r}")
    return manifest


def load_tensors(ckpt_dir: Path) -> tuple[dict, dict[str, np.ndarray]]:
    ckpt_dir = Path(ckpt_dir)
    manifest = read_manifest(ckpt_dir)
    blob = (ckpt_dir / WEIGHTS_NAME).read_bytes()
    if len(blob) != manifest["total_bytes"]:
        raise CheckpointError(
            f"weights file holds {len(blob)} bytes, manifest says {manifest['total_bytes']}"
        )
    tensors = {}
    for entry in manifest["params"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        arr = np.frombuffer(blob, dtype="<f4", count=count, offset=start).reshape(shape)
        tensors[entry["name"]] = arr.copy()
    return manifest, tensors


def load_checkpoint(ckpt_dir: Path) -> tuple[MMDiT, MaskAdapter | None, dict]:
    """Rebuild model (with LoRA re-attached) and adapter from a checkpoint."""
    manifest, tensors = load_tensors(ckpt_dir)
    model = MMDiT(ModelConfig(**manifest["model_config"]))
    if manifest["lora_layers"]:
        attach_lora(model, manifest["lora_layers"], LoraConfig(**manifest["lora_config"]))
    _load_into(model, tensors, "model.", base_named_parameters(model))
    if manifest["lora_layers"]:
        _load_into(model, tensors, "lora.", lora_named_parameters(model))
    adapter = None
    if manifest["adapter_config"] is not None:
        adapter = MaskAdapter(
            model.cfg.latent_channels, AdapterConfig(**manifest["adapter_config"])
        )
        _load_into(adapter, tensors, "adapter.", adapter.named_parameters())
    return model, adapter, manifest


def _load_into(module, tensors: dict[str, np.ndarray], prefix: str, named) -> None:
    seen = set()
    with torch.no_grad():
        for name, param in named:
            key = prefix + name.replace(".base.", ".")
            if key not in tensors:
                raise CheckpointError(f"checkpoint lacks tensor {key}")
            arr = tensors[key]
            if tuple(arr.shape) != tuple(param.shape):
                raise CheckpointError(
                    f"{key}: checkpoint shape {arr.shape} != parameter {tuple(param.shape)}"
                )
            param.copy_(torch.from_numpy(arr))
            seen.add(key)
    stored = {k for k in tensors if k.startswith(prefix)}
    extra = stored - seen
    if extra:
        raise CheckpointError(f"checkpoint holds unused tensors: {sorted(extra)[:5]}")
