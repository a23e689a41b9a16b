"""Experiment configuration: JSON schema, defaults and validation."""

from __future__ import annotations

import copy
import json
from pathlib import Path

from .regularizers import RegularizerSpec
from .trainer import TrainConfig

SCHEMA_VERSION = 1

DATASET_KINDS = ("digits", "mnist_idx", "csv", "blobs")
SCENARIO_KINDS = ("class_il", "rotated_domain_il", "mnist360", "joint", "sgd")
STREAM_KINDS = ("class_il", "rotated_domain_il", "mnist360")

DEFAULTS = {
    "schema_version": SCHEMA_VERSION,
    "name": "experiment",
    "dataset": {"kind": "digits", "side": 8, "pad": 2, "test_fraction": 0.2, "split_seed": 0},
    "scenario": {"kind": "rotated_domain_il", "n_tasks": 20},
    "model": {"hidden": [100, 100]},
    "train": {
        "alpha": 1.0,
        "regularizer": {"kind": "None", "beta": 1.0, "temperature": None, "offdiag_weight": 1.0},
        "buffer_capacity": 500,
        "batch_size": 32,
        "epochs_per_task": 1,
        "learning_rate": 0.05,
    },
    "seed": 0,
    "n_seeds": 1,
    "eval": {"n_bins": 10, "include_first_task_fwt": False, "robustness": False, "corruption_seed": 0},
    "output_dir": "runs/experiment",
}

_DATASET_DEFAULTS = {
    "digits": {"side": 8, "pad": 2, "test_fraction": 0.2, "split_seed": 0},
    "mnist_idx": {},
    "csv": {"image_shape": None},
    "blobs": {"n_classes": 4, "dim": 16, "n_per_class": 100, "seed": 0, "spread": 0.08,
              "test_fraction": 0.2, "split_seed": 0},
}
_DATASET_PATHS = {"mnist_idx": ("train_images", "train_labels", "test_images", "test_labels"),
                  "csv": ("train", "test")}


class ConfigError(ValueError):
    """The experiment configuration is malformed."""


def _merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


def _require(cond: bool, message: str) -> None:
    if not cond:
        raise ConfigError(message)


def normalize(raw: dict, base_dir: Path | None = None) -> dict:
    """Fill defaults, resolve relative paths and validate; returns a new dict."""
    _require(isinstance(raw, dict), "config must be a JSON object")
    version = raw.get("schema_version", SCHEMA_VERSION)
    _require(version == SCHEMA_VERSION, f"unsupported schema_version {version!r} (expected {SCHEMA_VERSION})")
    unknown = set(raw) - set(DEFAULTS) - {"sweep"}
    _require(not unknown, f"unknown config keys: {sorted(unknown)}")

    dataset_raw = raw.get("dataset", DEFAULTS["dataset"])
    _require(isinstance(dataset_raw, dict), "dataset must be an object")
    dkind = dataset_raw.get("kind", "digits")
    _require(dkind in DATASET_KINDS, f"dataset.kind must be one of {DATASET_KINDS}, got {dkind!r}")
    cfg = _merge({k: v for k, v in DEFAULTS.items() if k != "dataset"}, {k: v for k, v in raw.items() if k != "dataset"})
    cfg["dataset"] = _merge({"kind": dkind, **_DATASET_DEFAULTS[dkind]}, dataset_raw)

    base_dir = Path(base_dir) if base_dir is not None else Path.cwd()
    for key in _DATASET_PATHS.get(dkind, ()):
        _require(key in cfg["dataset"], f"dataset.{key} is required for kind {dkind!r}")
        path = Path(cfg["dataset"][key])
        if not path.is_absolute():
            path = (base_dir / path).resolve()
        _require(path.exists(), f"dataset.{key}: {path} does not exist")
        cfg["dataset"][key] = str(path)

    scen = cfg["scenario"]
    _require(isinstance(scen, dict), "scenario must be an object")
    kind = scen.get("kind")
    _require(kind in SCENARIO_KINDS, f"scenario.kind must be one of {SCENARIO_KINDS}, got {kind!r}")
    if kind in ("joint", "sgd"):
        inner = scen.get("stream", {"kind": "class_il", "n_tasks": 5})
        _require(isinstance(inner, dict) and inner.get("kind") in STREAM_KINDS,
                 f"scenario.stream.kind must be one of {STREAM_KINDS}")
        _check_stream(inner)
        scen["stream"] = inner
    else:
        _check_stream(scen)

    model = cfg["model"]
    hidden = model.get("hidden")
    _require(isinstance(hidden, list) and all(isinstance(h, int) and h >= 1 for h in hidden),
             "model.hidden must be a list of positive integers")

    _require(isinstance(cfg["n_seeds"], int) and cfg["n_seeds"] >= 1, "n_seeds must be an integer >= 1")
    _require(isinstance(cfg["seed"], int), "seed must be an integer")
    try:
        train_config(cfg, cfg["seed"])
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"train: {exc}") from None
    _require(isinstance(cfg["eval"]["n_bins"], int) and cfg["eval"]["n_bins"] >= 1, "eval.n_bins must be >= 1")
    if "sweep" in cfg:
        _require(isinstance(cfg["sweep"], dict) and all(isinstance(v, list) and v for v in cfg["sweep"].values()),
                 "sweep must map dotted keys to non-empty lists")
    return cfg


def _check_stream(scen: dict) -> None:
    kind = scen["kind"]
    if kind in ("class_il", "rotated_domain_il"):
        n = scen.get("n_tasks")
        _require(isinstance(n, int) and n >= 1, f"scenario.n_tasks must be a positive integer for {kind}")
    else:
        for key in ("samples_per_block", "test_per_block"):
            v = scen.get(key)
            _require(v is None or (isinstance(v, int) and v >= 2), f"scenario.{key} must be an integer >= 2")


def train_config(cfg: dict, seed: int) -> TrainConfig:
    t = dict(cfg["train"])
    reg = RegularizerSpec(**t.pop("regularizer"))
    if cfg["scenario"]["kind"] == "sgd":
        t["buffer_capacity"] = 0
        reg = RegularizerSpec("None", beta=0.0)
    return TrainConfig(regularizer=reg, seed=seed, **t)


def load(path) -> dict:
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file {path} not found") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    return normalize(raw, path.parent)


def set_dotted(cfg: dict, dotted: str, value) -> dict:
    out = copy.deepcopy(cfg)
    node = out
    keys = dotted.split(".")
    for key in keys[:-1]:
        node = node.setdefault(key, {})
    node[keys[-1]] = value
    return out


def dumps(cfg: dict) -> str:
    return json.dumps(cfg, indent=2, sort_keys=True) + "\n"
