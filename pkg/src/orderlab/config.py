"""Unified run configuration with dotted-path overrides."""

from __future__ import annotations

import copy
import hashlib
import json
from typing import Any

CONFIG_VERSION = 1

DEFAULTS: dict[str, Any] = {
    "version": CONFIG_VERSION,
    "data": {
        "source": "synthetic",
        "n_personas": 4,
        "n_train": 2000,
        "n_test": 200,
        "n_categories": 8,
        "seed": 42,
        "train_jsonl": None,
        "test_jsonl": None,
    },
    "model": {
        "arch": "decoder_only",
        "d_model": 64,
        "n_heads": 4,
        "n_layers": 2,
        "d_ff": 256,
        "max_seq_len": 64,
        "dropout_rate": 0.0,
        "tie_embeddings": True,
    },
    "train": {
        "name": None,
        "objective": "mle",
        "gamma": 1.0,
        "kl_direction": "forward",
        "lr": 3e-4,
        "batch_size": 32,
        "epochs": 10,
        "seed": 42,
        "beta1": 0.9,
        "beta2": 0.999,
        "eps": 1e-8,
        "grad_clip_norm": 1.0,
        "shuffle_at_eval": False,
    },
    "decode": {
        "model": "mle",
        "strategy": "topk_topp",
        "k": 50,
        "p": 0.9,
        "max_new_tokens": 32,
        "temperature": 1.0,
        "seed": 42,
        "limit": None,
    },
    "metrics": {
        "entropy_order": 4,
        "consistency_scorer": None,
    },
    "analysis": {
        "model": "mle",
        "metrics": ["bleu1", "bleu2", "rouge_l", "cider"],
        "limit": None,
        "perm_cap": 120,
        "sweep_strategy": "greedy",
        "runs": 20,
        "master_seed": 42,
        "variance_strategy": "topk_topp",
        "pairs_per_sample": 4,
        "seed": 42,
        "compare": ["mle", "orig"],
        "report_metric": "bleu1",
    },
    "output_dir": "runs/default",
}


class ConfigError(ValueError):
    """Schema violation; ``path`` is the offending dotted key."""

    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}")
        self.path = path


def _merge(base: dict, override: dict, prefix: str = "") -> None:
    for key, value in override.items():
        path = f"{prefix}{key}"
        if key not in base:
            raise ConfigError(path, "unknown key")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(path, "expected an object")
            _merge(base[key], value, path + ".")
        else:
            base[key] = value


def load_config(doc: dict | None = None, overrides: list[str] | None = None) -> dict:
    """Defaults, then the JSON document, then ``key.path=value`` overrides."""
    cfg = copy.deepcopy(DEFAULTS)
    if doc is not None:
        if "version" not in doc:
            raise ConfigError("version", "missing mandatory field")
        _merge(cfg, doc)
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(item, "override must look like key.path=value")
        path, raw = item.split("=", 1)
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node: Any = {}
        cur = node
        parts = path.split(".")
        for p in parts[:-1]:
            cur[p] = {}
            cur = cur[p]
        cur[parts[-1]] = value
        _merge(cfg, node)
    if cfg["version"] != CONFIG_VERSION:
        raise ConfigError("version", f"unsupported version {cfg['version']!r}")
    return cfg


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(canonical_json(cfg).encode("utf-8")).hexdigest()
