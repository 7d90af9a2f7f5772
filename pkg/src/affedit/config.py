"""Run configuration: TOML file + defaults, validated against a published JSON schema.

Relative paths are resolved against the directory of the config file (or
the working directory when no file is given). Command-line flags are
applied on top with :func:`apply_overrides`.
"""

from __future__ import annotations

import copy
import hashlib
import json
import sys
from importlib import resources
from pathlib import Path

import jsonschema

from .errors import ConfigurationError

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

DEFAULTS = {
    "seed": 0,
    "paths": {
        "workdir": "runs",
        "manifest": None,
        "spectrum_checkpoint": "runs/spectrum.safetensors",
        "backbone_checkpoint": "runs/backbone.safetensors",
        "pipeline_checkpoint": "runs/pipeline.safetensors",
        "cache": "runs/cache",
        "store": "runs/records.jsonl",
        "lexicon": None,
        "templates": None,
    },
    "model": {
        "vocab_size": 4096,
        "max_len": 16,
        "request_channels": 32,
        "semantic_channels": 64,
        "mapper_depth": 4,
        "mapper_heads": 4,
        "latent_channels": 4,
        "image_size": 64,
        "autoencoder_width": 64,
        "denoiser_width": 32,
    },
    "schedule": {"T": 50, "kind": "linear-beta", "eta": 1.0},
    "edit": {"t": 37},
    "corpus": {"size": 2000, "seed": 0, "classifier_gain": 3.0},
    "spectrum": {"steps": 300, "batch_size": 32, "lr": 1e-3, "alpha": 0.2, "eps": 1e-6},
    "backbone": {"autoencoder_steps": 300, "autoencoder_lr": 2e-3, "denoiser_steps": 2000,
                 "denoiser_lr": 1e-3, "batch_size": 64},
    "mapper": {"steps": 400, "batch_size": 32, "lr": 1e-3, "beta": 10.0, "squared": False},
    "supervisor": {"offline": True, "endpoint": None, "model": "default", "api_key_env": "AFFEDIT_API_KEY",
                   "timeout": 30.0, "max_retries": 3, "min_interval": 0.0, "workers": 1},
    "evaluation": {"kld_direction": "target||predicted", "kld_eps": 1e-8},
    "dataset": {"policy": "category", "max_retries": 3, "split_size": 3000, "percentile": None},
}

PATH_KEYS = ("workdir", "manifest", "spectrum_checkpoint", "backbone_checkpoint", "pipeline_checkpoint",
             "cache", "store", "lexicon", "templates")


def schema() -> dict:
    text = resources.files("affedit").joinpath("schema").joinpath("config.schema.json").read_text()
    return json.loads(text)


def _merge(base: dict, extra: dict) -> dict:
    out = copy.deepcopy(base)
    for key, value in extra.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], value)
        else:
            out[key] = value
    return out


def validate(doc: dict):
    try:
        jsonschema.validate(doc, schema())
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigurationError(f"invalid config at {where}: {exc.message}") from None


def load_config(path=None, overrides: dict | None = None) -> dict:
    """Defaults <- TOML file <- overrides, validated, with absolute paths."""
    doc = {}
    base = Path.cwd()
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigurationError(f"config file not found: {path}")
        with open(path, "rb") as fh:
            try:
                doc = tomllib.load(fh)
            except tomllib.TOMLDecodeError as exc:
                raise ConfigurationError(f"{path}: {exc}") from None
        base = path.resolve().parent
    validate(doc)
    cfg = _merge(DEFAULTS, doc)
    if overrides:
        cfg = apply_overrides(cfg, overrides)
    validate(cfg)
    for key in PATH_KEYS:
        value = cfg["paths"].get(key)
        if value is not None:
            cfg["paths"][key] = str((base / value).resolve())
    if cfg["model"]["semantic_channels"] % cfg["model"]["mapper_heads"]:
        raise ConfigurationError("model.semantic_channels must be divisible by model.mapper_heads")
    if cfg["edit"]["t"] > cfg["schedule"]["T"]:
        raise ConfigurationError("edit.t must not exceed schedule.T")
    return cfg


def apply_overrides(cfg: dict, overrides: dict) -> dict:
    """``overrides`` maps dotted keys (``"edit.t"``) to values; ``None`` values are ignored."""
    out = copy.deepcopy(cfg)
    for dotted, value in overrides.items():
        if value is None:
            continue
        node = out
        *parents, leaf = dotted.split(".")
        for p in parents:
            node = node.setdefault(p, {})
        node[leaf] = value
    return out


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest()[:16]
