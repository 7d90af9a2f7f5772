"""Checkpoint format: a safetensors file of named tensors.

The safetensors metadata header carries two string entries:

* ``format`` -- always ``"affedit/1"``
* ``config`` -- JSON object with dimensions, seed and ``categories`` ordering

Tensor names are ``<component>.<state-dict key>``, e.g.
``mapper.blocks.0.msa.in_proj_weight``.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Mapping

import torch
from safetensors.torch import load_file, save_file
from safetensors import safe_open

from .errors import ConfigurationError, MissingArtifactError

FORMAT = "affedit/1"


def save_checkpoint(path, modules: Mapping[str, torch.nn.Module], config: dict) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tensors = {}
    for prefix, module in modules.items():
        for key, value in module.state_dict().items():
            tensors[f"{prefix}.{key}"] = value.detach().contiguous().cpu()
    save_file(tensors, str(path), metadata={"format": FORMAT, "config": json.dumps(config, sort_keys=True)})
    return path


def read_header(path, producer: str | None = None) -> dict:
    path = Path(path)
    if not path.exists():
        raise MissingArtifactError(path, producer)
    with safe_open(str(path), framework="pt") as fh:
        meta = fh.metadata() or {}
    if meta.get("format") != FORMAT:
        raise ConfigurationError(f"{path}: not an affedit checkpoint")
    return json.loads(meta["config"])


def load_into(path, modules: Mapping[str, torch.nn.Module], producer: str | None = None) -> dict:
    """Load tensors into ``modules`` in place and return the config header."""
    path = Path(path)
    if not path.exists():
        raise MissingArtifactError(path, producer)
    config = read_header(path)
    tensors = load_file(str(path))
    for prefix, module in modules.items():
        state = {k[len(prefix) + 1:]: v for k, v in tensors.items() if k.startswith(prefix + ".")}
        if not state:
            raise ConfigurationError(f"{path}: no tensors for component {prefix!r}")
        module.load_state_dict(state)
    return config


def checksum(*modules: torch.nn.Module) -> str:
    """SHA-256 over every parameter and buffer, in state-dict order."""
    h = hashlib.sha256()
    for module in modules:
        for key, value in module.state_dict().items():
            h.update(key.encode())
            h.update(value.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()
