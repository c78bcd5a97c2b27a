"""Experiment configuration: TOML parsing, schema validation and seed streams."""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import jsonschema
import numpy as np
import tomli

from .families import ContextSplit, make_family
from .mdp import ValidationError


class ConfigError(ValueError):
    pass


DEFAULTS = {
    "experiment": {"family": "slipgrid", "gamma": 0.9, "output_dir": "runs/default"},
    "family": {},
    "split": {"name": "default"},
    "metric": {"tol": 1e-8, "vi_tol": 1e-10},
    "bounds": {"n_draws": 200, "random_families": True, "grid_sizes": [3, 4],
               "radius_fractions": [0.0, 0.05, 0.2, 0.5], "chat_offsets": [0.0, 0.01, 0.05, 0.1],
               "n_theorem1_families": 50, "bound_form": "stated"},
    "model": {"k": 5, "alpha": 1.0, "aggregator": "mean", "latent_dim": 16, "context_dim": 8,
              "hidden": 64, "q_hidden": 64},
    "train": {"total_steps": 3000, "batch_size": 128, "probe_size": 128, "lr": 3e-4,
              "model_lr": 1e-3, "tau": 0.01, "target_update_every": 2, "warmup_steps": 250,
              "buffer_capacity": 100000},
    "eval": {"episodes": 5, "eval_every": 0},
    "analysis": {"seeds": [0, 1, 2, 3, 4], "windows_per_context": 32, "alpha_without": 0.0},
    "probe": {"k": 5, "windows_per_context": 400, "steps": 5000, "hidden": 64},
}


def _schema(name):
    text = resources.files("zeuslab").joinpath("schemas", name).read_text()
    return json.loads(text)


def validate_document(doc, schema_name):
    """Validate an emitted JSON document against its shipped schema."""
    jsonschema.validate(doc, _schema(schema_name))


def _merge(base, over):
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


@dataclass
class ExperimentConfig:
    raw: dict
    text: str
    path: str | None = None

    @property
    def seed(self) -> int:
        return int(self.raw["experiment"]["seed"])

    @property
    def gamma(self) -> float:
        return float(self.raw["experiment"]["gamma"])

    @property
    def output_dir(self) -> Path:
        return Path(self.raw["experiment"]["output_dir"])

    def section(self, name) -> dict:
        return self.raw[name]

    def family(self):
        fid = self.raw["experiment"]["family"]
        kwargs = dict(self.raw["family"])
        if fid in ("slipgrid", "absorbing"):
            kwargs.setdefault("gamma", self.gamma)
        return make_family(fid, **kwargs)

    def split(self) -> ContextSplit:
        sp = self.raw["split"]
        fam = self.family()
        if sp.get("name", "default") == "default" and "train" not in sp:
            split = fam.default_split()
        else:
            split = ContextSplit(tuple(sp["train"]), tuple(sp.get("eval_interpolation", ())),
                                 tuple(sp.get("eval_extrapolation", ())))
        for c in split.train + split.eval_interpolation + split.eval_extrapolation:
            fam.check_context(c)
        if not split.check():
            raise ConfigError("split violates the interpolation/extrapolation hull rule")
        return split

    def config_hash(self) -> str:
        return hashlib.sha256(self.text.encode()).hexdigest()

    def seed_sequence(self, *path) -> np.random.SeedSequence:
        """Independent stream for a named purpose, derived from the root seed."""
        key = [self.seed] + [int(hashlib.sha256(str(p).encode()).hexdigest()[:8], 16) for p in path]
        return np.random.SeedSequence(key)


def parse_config(text: str, seed_override=None, out_override=None, path=None) -> ExperimentConfig:
    try:
        doc = tomli.loads(text)
    except tomli.TOMLDecodeError as exc:
        raise ConfigError(f"config parse error: {exc}") from exc
    if seed_override is not None:
        doc.setdefault("experiment", {})["seed"] = int(seed_override)
    if out_override is not None:
        doc.setdefault("experiment", {})["output_dir"] = str(out_override)
    try:
        jsonschema.validate(doc, _schema("config.schema.json"))
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"config field {where}: {exc.message}") from exc
    raw = _merge(DEFAULTS, doc)
    cfg = ExperimentConfig(raw, text, path)
    if not 0.0 <= cfg.gamma < 1.0:
        raise ConfigError(f"experiment.gamma must satisfy gamma < 1 (and >= 0), got {cfg.gamma}")
    try:
        cfg.split()
        if raw["model"]["aggregator"] not in ("sum", "mean", "concat", "product", "min", "max"):
            raise ConfigError(f"model.aggregator {raw['model']['aggregator']!r} is not supported")
    except (ValidationError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"config rejected: {exc}") from exc
    return cfg


def load_config(path, seed_override=None, out_override=None) -> ExperimentConfig:
    text = Path(path).read_text()
    return parse_config(text, seed_override, out_override, str(path))
