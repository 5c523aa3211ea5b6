"""Declarative run configuration: one JSON file, strict keys, stable hash.

Every knob has an explicit default; unknown keys are rejected so typos fail
loudly. The canonical JSON serialization's SHA-256 prefix tags every output
file a run produces.
"""

from __future__ import annotations

import copy
import hashlib
import json
import os

from .errors import ConfigError
from .generator import GeneratorConfig
from .streaming import ScheduleConfig
from .training import TrainConfig

DEFAULTS: dict = {
    "seed": 0,
    "paths": {
        "out_dir": "runs/default",
    },
    "model": {
        "channels": 4,
        "height": 8,
        "width": 8,
        "patch": 4,
        "model_dim": 32,
        "n_heads": 4,
        "n_layers": 2,
        "denoise_steps": 4,
        "text_dim": 16,
        "rope_base": 10000.0,
    },
    "fusion": {
        "feature_channels": 6,
        "text_tokens": 4,
        "extractor_seed": 7,
    },
    "train": {
        "optimizer": "adam",
        "lr": 1e-3,
        "steps": 50,
        "batch_size": 2,
        "lambda_3d": 0.1,
        "enable_l3d": False,
        "detach_conditioning": True,
        "frames": 81,
        "dmd_grid": 8,
    },
    "schedule": {
        "long_context_latents": 18,
        "long_generate_latents": 3,
        "short_context_latents": 3,
        "short_generate_latents": 18,
    },
}


def _merge(defaults: dict, override: dict, path: str = "") -> dict:
    out = copy.deepcopy(defaults)
    for key, value in override.items():
        here = f"{path}.{key}" if path else key
        if key not in defaults:
            raise ConfigError(f"unknown config key: {here}")
        if isinstance(defaults[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"config key {here} must be a section")
            out[key] = _merge(defaults[key], value, here)
        else:
            out[key] = value
    return out


class RunConfig:
    """Resolved configuration tree plus typed builders for each subsystem."""

    def __init__(self, tree: dict):
        self.tree = tree

    @classmethod
    def from_tree(cls, override: dict | None = None) -> "RunConfig":
        tree = _merge(DEFAULTS, override or {})
        env_seed = os.environ.get("EW_SEED")
        if env_seed is not None:
            tree["seed"] = int(env_seed)
        return cls(tree)

    @classmethod
    def from_file(cls, path) -> "RunConfig":
        try:
            with open(path) as fh:
                override = json.load(fh)
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except json.JSONDecodeError as e:
            raise ConfigError(f"config file {path} is not valid JSON: {e}") from None
        if not isinstance(override, dict):
            raise ConfigError(f"config file {path} must contain a JSON object")
        return cls.from_tree(override)

    def to_json(self) -> str:
        return json.dumps(self.tree, indent=2, sort_keys=True)

    def config_hash(self) -> str:
        canon = json.dumps(self.tree, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canon.encode("utf-8")).hexdigest()[:12]

    @property
    def seed(self) -> int:
        return self.tree["seed"]

    @property
    def out_dir(self) -> str:
        return self.tree["paths"]["out_dir"]

    def generator_config(self) -> GeneratorConfig:
        return GeneratorConfig(**self.tree["model"])

    def schedule_config(self) -> ScheduleConfig:
        return ScheduleConfig(**self.tree["schedule"])

    def train_config(self) -> TrainConfig:
        return TrainConfig(seed=self.seed, **self.tree["train"])

    def fusion_kwargs(self) -> dict:
        f = self.tree["fusion"]
        return {"feature_channels": f["feature_channels"], "text_tokens": f["text_tokens"],
                "extractor_seed": f["extractor_seed"]}
