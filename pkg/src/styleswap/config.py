"""Run configuration: one validated document drives every workbench command.

Validation happens before any compute; unknown keys are rejected with their
full dotted path so a typo cannot silently fall back to a default.
"""

import copy
import json
import time
from pathlib import Path

import yaml

from .utils import FORMAT_VERSION, fingerprint_json


class ConfigError(ValueError):
    pass


DEFAULT_CONFIG = {
    "run": {
        "seed": 0,
        "out_dir": "runs/desk",
        "determinism": True,
        "format_version": FORMAT_VERSION,
    },
    "data": {
        "source": "procedural",      # procedural | cifar10
        "data_root": None,           # archive location for cifar10
        "train_size": 2000,          # procedural corpus sizes
        "test_size": 1000,
        "eval_subset": 50,           # stratified attack-evaluation size
        "nonrobust": {"epsilon": 4.0, "steps": 40, "step_size": None,
                      "target_rule": "rotation", "norm": "l2",
                      "base_subset": None},
        "robust": {"steps": 50, "step_size": 0.1, "init": "train_image",
                   "base_subset": 1000},
    },
    "zoo": {
        "epochs_standard": 4,
        "epochs_at": 4,
        "epochs_derived": 5,
        "lr": 0.05,
        "batch_size": 128,
        "seed": 0,
        "at_epsilon": 8.0 / 255.0,
        "at_steps": 4,
        "iat_alpha": 1.0,
    },
    "extractor": {
        "backend": "seeded_random",  # seeded_random | imagenet
        "weights_path": None,
        "seed": 0,
        "upsample_to": None,
    },
    "selector": {
        "strategy": "confidence_weighted",
        "ratio": "5:5",              # non-robust : robust
        "probe_mode": "style_synthesis",
        "pool_size": 12,
        "probe_iters": 500,
    },
    "engine": {
        "alpha": 1.0,
        "beta": 80000.0,
        "content_mode": "feature",
        "budget_multiplier": 0.9,
        "max_iters": 60,
        "step_size": 0.05,
        "adam_eps": 1500.0,
        "patience": 25,
        "plateau_rel": 1e-4,
    },
    "attack": {
        "pgd_epsilon": 8.0 / 255.0,
        "pgd_steps": 20,
        "pgd_step_size": 2.0 / 255.0,
        "sweep_weights": [10000.0, 40000.0, 80000.0],
        "rnr_ratios": ["1:9", "3:7", "5:5", "7:3", "9:1"],
        "rnr_targets": [8, 9, 4],
        "grid_targets": [0, 4, 6],
        "grid_columns": 10,
    },
    "probe": {
        "r_target": 8,               # ship
        "nr_target": 0,              # airplane
        "probe_size": 200,
        "epsilon": 16.0 / 255.0,
        "steps": 40,
    },
}

# simple leaf validators keyed by dotted path
_CHECKS = {
    "run.seed": lambda v: isinstance(v, int),
    "run.determinism": lambda v: isinstance(v, bool),
    "data.source": lambda v: v in ("procedural", "cifar10"),
    "data.train_size": lambda v: isinstance(v, int) and v >= 0,
    "data.test_size": lambda v: isinstance(v, int) and v >= 0,
    "data.eval_subset": lambda v: isinstance(v, int) and v > 0,
    "data.nonrobust.epsilon": lambda v: isinstance(v, (int, float)) and v > 0,
    "data.nonrobust.steps": lambda v: isinstance(v, int) and v >= 1,
    "data.robust.steps": lambda v: isinstance(v, int) and v >= 0,
    "zoo.epochs_standard": lambda v: isinstance(v, int) and v >= 0,
    "zoo.at_epsilon": lambda v: isinstance(v, (int, float)) and v >= 0,
    "extractor.backend": lambda v: v in ("seeded_random", "imagenet"),
    "selector.strategy": lambda v: v in ("random", "random_from_target_class",
                                         "confidence_weighted"),
    "selector.probe_mode": lambda v: v in ("style_synthesis", "raw_image"),
    "engine.alpha": lambda v: isinstance(v, (int, float)) and v >= 0,
    "engine.beta": lambda v: isinstance(v, (int, float)) and v >= 0,
    "engine.budget_multiplier": lambda v: isinstance(v, (int, float)) and v > 0,
    "engine.max_iters": lambda v: isinstance(v, int) and v >= 1,
    "attack.pgd_epsilon": lambda v: isinstance(v, (int, float)) and v >= 0,
    "probe.epsilon": lambda v: isinstance(v, (int, float)) and v > 0,
}


def _type_matches(value, default):
    if default is None or value is None:
        return True
    if isinstance(default, bool):
        return isinstance(value, bool)
    if isinstance(default, (int, float)):
        return isinstance(value, (int, float)) and not isinstance(value, bool)
    return isinstance(value, type(default))


def _walk_validate(value, default, path):
    if isinstance(default, dict):
        if not isinstance(value, dict):
            raise ConfigError(f"{path or '<root>'}: expected a mapping")
        unknown = set(value) - set(default)
        if unknown:
            raise ConfigError(f"{path or '<root>'}: unknown key(s) {sorted(unknown)}")
        merged = {}
        for key, sub_default in default.items():
            sub_path = f"{path}.{key}" if path else key
            if key in value:
                merged[key] = _walk_validate(value[key], sub_default, sub_path)
            else:
                merged[key] = copy.deepcopy(sub_default)
        return merged
    if not _type_matches(value, default):
        raise ConfigError(f"{path}: expected {type(default).__name__}, got {value!r} "
                          f"({type(value).__name__})")
    check = _CHECKS.get(path)
    if check and not check(value):
        raise ConfigError(f"{path}: invalid value {value!r}")
    return value


def resolve_config(partial=None) -> dict:
    """Merge a partial document over the defaults and validate every field."""
    merged = _walk_validate(partial or {}, DEFAULT_CONFIG, "")
    # cross-field constraints that single-leaf checks cannot express
    if merged["engine"]["alpha"] + merged["engine"]["beta"] <= 0:
        raise ConfigError("engine: alpha and beta cannot both be zero")
    return merged


def load_config(path=None, overrides=()) -> dict:
    doc = {}
    if path:
        text = Path(path).read_text()
        doc = yaml.safe_load(text) or {}
        if not isinstance(doc, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form dotted.path=value")
        dotted, raw = item.split("=", 1)
        node = doc
        parts = dotted.strip().split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {dotted}: {p} is not a mapping")
        node[parts[-1]] = yaml.safe_load(raw)
    return resolve_config(doc)


def config_fingerprint(config: dict) -> str:
    return fingerprint_json(config)


class RunManifest:
    """Written before any compute, marked complete after the last output, so
    an interrupted run is detectable and a finished one is replayable."""

    def __init__(self, run_dir, config, command):
        self.path = Path(run_dir) / "manifest.json"
        self.doc = {
            "format_version": FORMAT_VERSION,
            "command": command,
            "config": config,
            "config_fingerprint": config_fingerprint(config),
            "inputs": {},
            "outputs": [],
            "created": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()),
            "completed": False,
        }
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._write()

    def _write(self):
        self.path.write_text(json.dumps(self.doc, indent=2, sort_keys=True))

    def record_input(self, name, fingerprint):
        self.doc["inputs"][name] = fingerprint
        self._write()

    def record_output(self, path):
        self.doc["outputs"].append(str(path))
        self._write()

    def complete(self):
        self.doc["completed"] = True
        self._write()
