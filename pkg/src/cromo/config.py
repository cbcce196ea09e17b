"""Experiment configuration: schema validation, canonical hashing, presets.

A configuration is a nested mapping (usually YAML on disk). Validation fills
defaults, rejects unknown keys, and normalizes values; the canonical hash is
taken over the sorted-key JSON encoding of the normalized document, so two
documents that differ only in key order share a hash.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Any

import yaml

from .data import (CIFAR100_STATS, CIFAR10_STATS, AugmentationPolicy,
                   LabeledDataset, SyntheticConfig, TaskSequence, load_dataset,
                   split_class_incremental, split_data_incremental)
from .evaluation import ProbeConfig
from .models import ModelConfig
from .trainer import OptimizerConfig, TrainConfig

STRATEGY_ALIASES = {
    # Table-style ablation rows: (base strategy, mix source, mix embed, zeta override)
    "within_task_mix": ("cromo_star", "current", "current", 0.0),
    "cross_task_mix": ("cromo_star", "buffer", "current", 0.0),
}
BASE_STRATEGIES = ("finetune", "er", "cassle", "cassle_plus", "cromo_star", "cromo")


class ConfigError(ValueError):
    """Schema violation in an experiment configuration."""


@dataclass
class _Field:
    default: Any
    types: tuple
    choices: tuple | None = None


def _f(default, types, choices=None):
    if not isinstance(types, tuple):
        types = (types,)
    return _Field(default, types, choices)


SCHEMA: dict[str, Any] = {
    "name": _f("run", str),
    "seed": _f(0, int),
    "output_root": _f("runs", str),
    "data": {
        "dataset": _f("synthetic-gaussians", str,
                      ("cifar10", "cifar100", "tinyimagenet", "synthetic-gaussians")),
        "root": _f("./data", str),
        "split": _f("class_incremental", str,
                    ("class_incremental", "data_incremental")),
        "num_tasks": _f(2, int),
        "split_seed": _f(1, int),
        "synthetic": {
            "classes": _f(4, int),
            "per_class_train": _f(200, int),
            "per_class_test": _f(50, int),
            "channels": _f(2, int),
            "image_size": _f(8, int),
            "layout": _f("confusable_pairs", str, ("ring", "confusable_pairs")),
            "center_scale": _f(55.0, (int, float)),
            "pair_offset": _f(20.0, (int, float)),
            "noise_std": _f(8.0, (int, float)),
            "seed": _f(5, int),
        },
        "augmentation": {
            "preset": _f("synthetic", str, ("cifar10", "cifar100", "synthetic", "none")),
            "noise_std": _f(0.06, (int, float)),
        },
    },
    "model": {
        "arch": _f("mlp", str, ("resnet18", "resnet50", "small_cnn", "mlp")),
        "in_channels": _f(2, int),
        "image_size": _f(8, int),
        "feature_dim": _f(16, int),
        "projector_hidden": _f(16, int),
        "projector_dim": _f(8, int),
        "predictor_hidden": _f(16, int),
        "distill_hidden": _f(0, int),
        "distill_batchnorm": _f(True, bool),
        "mlp_hidden": _f([32], list),
        "mlp_norm": _f("none", str, ("batch", "layer", "none")),
    },
    "loss": {
        "kind": _f("simclr", str, ("simclr", "barlow_twins", "byol", "corinfomax")),
        "temperature": _f(0.5, (int, float)),
        "lambda_bt": _f(5e-3, (int, float)),
        "corinfomax_eps": _f(0.1, (int, float)),
        "lambda_cov": _f(0.01, (int, float)),
        "invariance_weight": _f(1.0, (int, float)),
        "ema_momentum": _f(0.99, (int, float)),
    },
    "strategy": {
        "name": _f("cromo", str, BASE_STRATEGIES + tuple(STRATEGY_ALIASES)),
        "zeta": _f(1.0, (int, float)),
        "alpha": _f(1.0, (int, float)),
        "mix_source": _f("buffer", str, ("buffer", "current")),
        "mix_embed": _f("frozen", str, ("frozen", "current")),
    },
    "trainer": {
        "epochs_per_task": _f(1, (int, list)),
        "batch_size": _f(64, int),
        "warmup_epochs": _f(0, int),
        "buffer_budget": _f(20, int),
        "replay_batch_size": _f(64, int),
        "optimizer": {
            "kind": _f("sgd", str, ("sgd", "lars")),
            "lr": _f(0.1, (int, float)),
            "weight_decay": _f(1e-4, (int, float)),
            "momentum": _f(0.9, (int, float)),
        },
    },
    "eval": {
        "probe_epochs": _f(100, int),
        "probe_lr": _f(0.2, (int, float)),
        "probe_batch_size": _f(256, int),
        "probe_seed": _f(0, int),
        "knn_k": _f(200, int),
    },
    "confusion": {
        "learners": _f(["simclr", "supervised"], list),
        "modes": _f(["cil_minibatch", "single_pool"], list),
        "iterations": _f(400, int),
        "probe_cadence": _f(200, int),
        "num_tasks": _f(2, int),
        "batch_size": _f(64, int),
        "supervised_lr": _f(0.1, (int, float)),
    },
}


def _validate_node(node_schema: dict, doc: Any, path: str) -> dict:
    if doc is None:
        doc = {}
    if not isinstance(doc, dict):
        raise ConfigError(f"{path or 'config'}: expected a mapping")
    unknown = set(doc) - set(node_schema)
    if unknown:
        raise ConfigError(f"{path or 'config'}: unknown keys {sorted(unknown)}")
    out = {}
    for key, spec in node_schema.items():
        child_path = f"{path}.{key}" if path else key
        if isinstance(spec, dict):
            out[key] = _validate_node(spec, doc.get(key), child_path)
            continue
        value = doc.get(key, spec.default)
        if isinstance(value, bool) and bool not in spec.types:
            raise ConfigError(f"{child_path}: bad type bool")
        if not isinstance(value, spec.types):
            names = "/".join(t.__name__ for t in spec.types)
            raise ConfigError(f"{child_path}: expected {names}, "
                              f"got {type(value).__name__}")
        if float in spec.types and isinstance(value, int) and not isinstance(value, bool):
            value = float(value)
        if spec.choices is not None and value not in spec.choices:
            raise ConfigError(f"{child_path}: {value!r} not one of {spec.choices}")
        out[key] = value
    return out


def validate_config(doc: dict) -> dict:
    """Normalize a config document; raises ConfigError on any violation."""
    return _validate_node(SCHEMA, doc, "")


def config_hash(doc: dict) -> str:
    """Canonical hash over the normalized document."""
    normalized = validate_config(doc)
    blob = json.dumps(normalized, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:12]


def apply_overrides(doc: dict, overrides: list[str]) -> dict:
    """Apply dotted key=value overrides; values parsed as YAML scalars."""
    out = json.loads(json.dumps(doc))
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} must look like section.key=value")
        dotted, raw = item.split("=", 1)
        keys = dotted.split(".")
        node = out
        for k in keys[:-1]:
            node = node.setdefault(k, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override path {dotted!r} crosses a scalar")
        node[keys[-1]] = yaml.safe_load(raw)
    return out


def load_config(source: str | Path) -> dict:
    """Read a config from a YAML path or a named preset."""
    if isinstance(source, str) and source in PRESETS:
        return json.loads(json.dumps(PRESETS[source]))
    path = Path(source)
    if not path.exists():
        raise ConfigError(f"config {source!r} is neither a file nor a preset; "
                          f"presets: {sorted(PRESETS)}")
    try:
        doc = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return doc


# ---------------------------------------------------------------------------
# materialization

def resolve_strategy(strategy_doc: dict) -> tuple[str, str, str, float]:
    """Translate a (possibly aliased) strategy into trainer settings."""
    name = strategy_doc["name"]
    if name in STRATEGY_ALIASES:
        base, src, embd, zeta = STRATEGY_ALIASES[name]
        return base, src, embd, zeta
    zeta = strategy_doc["zeta"]
    if name == "cromo_star":
        zeta = 0.0
    return name, strategy_doc["mix_source"], strategy_doc["mix_embed"], zeta


def make_policy(doc: dict) -> AugmentationPolicy:
    aug = doc["data"]["augmentation"]
    preset = aug["preset"]
    if preset == "cifar10":
        return AugmentationPolicy.cifar(CIFAR10_STATS)
    if preset == "cifar100":
        return AugmentationPolicy.cifar(CIFAR100_STATS)
    if preset == "synthetic":
        return AugmentationPolicy.synthetic(aug["noise_std"])
    return AugmentationPolicy(train_ops=[], eval_ops=[], mean=(0.5,), std=(0.5,))


def make_model_config(doc: dict) -> ModelConfig:
    m = doc["model"]
    return ModelConfig(arch=m["arch"], in_channels=m["in_channels"],
                       image_size=m["image_size"], feature_dim=m["feature_dim"],
                       projector_hidden=m["projector_hidden"],
                       projector_dim=m["projector_dim"],
                       predictor_hidden=m["predictor_hidden"],
                       use_predictor=doc["loss"]["kind"] == "byol",
                       distill_hidden=m["distill_hidden"],
                       distill_batchnorm=m["distill_batchnorm"],
                       mlp_hidden=tuple(m["mlp_hidden"]),
                       mlp_norm=m["mlp_norm"])


def make_train_config(doc: dict) -> TrainConfig:
    doc = validate_config(doc)
    base, mix_source, mix_embed, zeta = resolve_strategy(doc["strategy"])
    t = doc["trainer"]
    o = t["optimizer"]
    loss = doc["loss"]
    return TrainConfig(
        strategy=base, ssl_kind=loss["kind"],
        model=make_model_config(doc), policy=make_policy(doc),
        epochs_per_task=t["epochs_per_task"], batch_size=t["batch_size"],
        optimizer=OptimizerConfig(kind=o["kind"], lr=o["lr"],
                                  weight_decay=o["weight_decay"],
                                  momentum=o["momentum"]),
        warmup_epochs=t["warmup_epochs"], buffer_budget=t["buffer_budget"],
        replay_batch_size=t["replay_batch_size"],
        alpha=doc["strategy"]["alpha"], zeta=zeta, seed=doc["seed"],
        temperature=loss["temperature"], lambda_bt=loss["lambda_bt"],
        corinfomax_eps=loss["corinfomax_eps"], lambda_cov=loss["lambda_cov"],
        invariance_weight=loss["invariance_weight"],
        ema_momentum=loss["ema_momentum"],
        mix_source=mix_source, mix_embed=mix_embed,
        config_hash=config_hash(doc),
    )


def make_datasets(doc: dict) -> tuple[LabeledDataset, LabeledDataset]:
    d = doc["data"]
    synthetic = SyntheticConfig(**d["synthetic"]) \
        if d["dataset"] == "synthetic-gaussians" else None
    return load_dataset(d["dataset"], d["root"], synthetic=synthetic)


def make_sequence(doc: dict, train_ds: LabeledDataset) -> TaskSequence:
    d = doc["data"]
    if d["split"] == "class_incremental":
        return split_class_incremental(train_ds, d["num_tasks"], d["split_seed"])
    return split_data_incremental(train_ds, d["num_tasks"], d["split_seed"])


def make_probe_config(doc: dict) -> ProbeConfig:
    e = doc["eval"]
    return ProbeConfig(epochs=e["probe_epochs"], lr=e["probe_lr"],
                       batch_size=e["probe_batch_size"], seed=e["probe_seed"])


# ---------------------------------------------------------------------------
# presets

_BENCHMARK_HYPERPARAMS = {
    # dataset -> per-ssl (batch, lr, optimizer, weight decay, projector dim)
    "cifar10": {
        "corinfomax": (512, 0.1, "sgd", 1e-4, 64),
        "simclr": (512, 0.6, "sgd", 5e-4, 128),
        "byol": (256, 1.0, "lars", 1e-5, 4096),
        "barlow_twins": (256, 0.3, "lars", 1e-4, 2048),
    },
    "cifar100": {
        "corinfomax": (512, 0.1, "sgd", 1e-4, 128),
        "simclr": (512, 0.6, "sgd", 5e-4, 128),
        "byol": (256, 1.0, "lars", 1e-5, 4096),
        "barlow_twins": (256, 0.3, "lars", 1e-4, 2048),
    },
    "tinyimagenet": {
        "corinfomax": (256, 0.5, "sgd", 1e-4, 64),
        "simclr": (256, 0.3, "sgd", 5e-4, 2048),
        "byol": (256, 0.3, "lars", 1e-5, 4096),
        "barlow_twins": (256, 0.3, "lars", 1e-4, 2048),
    },
}

_SPLIT_SETTINGS = {
    # (dataset, num tasks) -> (epochs per task, buffer budget)
    ("cifar10", 2): (500, 500),
    ("cifar100", 5): (750, 500),
    ("cifar100", 10): ([600] + [350] * 9, 100),
    ("tinyimagenet", 10): ([500] + [350] * 9, 100),
}


def make_benchmark_preset(dataset: str, num_tasks: int, ssl: str, strategy: str) -> dict:
    batch, lr, opt, wd, proj = _BENCHMARK_HYPERPARAMS[dataset][ssl]
    epochs, budget = _SPLIT_SETTINGS[(dataset, num_tasks)]
    arch = "resnet50" if dataset == "tinyimagenet" else "resnet18"
    image_size = 64 if dataset == "tinyimagenet" else 32
    aug = "cifar100" if dataset != "cifar10" else "cifar10"
    return {
        "name": f"{dataset}_split{num_tasks}_{ssl}_{strategy}",
        "seed": 5,
        "data": {"dataset": dataset, "split": "class_incremental",
                 "num_tasks": num_tasks, "split_seed": 5,
                 "augmentation": {"preset": aug}},
        "model": {"arch": arch, "in_channels": 3, "image_size": image_size,
                  "projector_hidden": 2048, "projector_dim": proj,
                  "predictor_hidden": 4096},
        "loss": {"kind": ssl},
        "strategy": {"name": strategy},
        "trainer": {"epochs_per_task": epochs, "batch_size": batch,
                    "warmup_epochs": 10, "buffer_budget": budget,
                    "replay_batch_size": 64,
                    "optimizer": {"kind": opt, "lr": lr, "weight_decay": wd}},
    }


def _toy_preset(strategy: str, ssl: str = "simclr") -> dict:
    return {
        "name": f"toy_{strategy}_{ssl}",
        "seed": 3,
        "data": {"dataset": "synthetic-gaussians", "num_tasks": 2,
                 "split_seed": 1},
        "model": {"arch": "mlp", "in_channels": 2, "image_size": 8,
                  "feature_dim": 16, "projector_hidden": 16,
                  "projector_dim": 8, "predictor_hidden": 16,
                  "mlp_hidden": [32]},
        "loss": {"kind": ssl, "corinfomax_eps": 1.0},
        "strategy": {"name": strategy},
        "trainer": {"epochs_per_task": 120, "batch_size": 64,
                    "buffer_budget": 20, "replay_batch_size": 16,
                    "optimizer": {"kind": "sgd", "lr": 0.15,
                                  "weight_decay": 1e-4}},
        "eval": {"probe_epochs": 40, "probe_lr": 0.3, "probe_batch_size": 128,
                 "knn_k": 20},
    }


def _build_presets() -> dict[str, dict]:
    presets: dict[str, dict] = {}
    for (dataset, n_tasks) in _SPLIT_SETTINGS:
        for ssl in ("simclr", "barlow_twins", "byol", "corinfomax"):
            for strategy in BASE_STRATEGIES:
                doc = make_benchmark_preset(dataset, n_tasks, ssl, strategy)
                presets[doc["name"]] = doc
    for strategy in BASE_STRATEGIES + tuple(STRATEGY_ALIASES):
        doc = _toy_preset(strategy)
        presets[doc["name"]] = doc
    # full-scale schedule-confusion cells on CIFAR100 (10 tasks x 10 classes),
    # one preset per learner; desk runs should use toy_confusion instead
    confusion_rows = {
        "corinfomax": ("sgd", 0.5, 512, 1000),
        "barlow_twins": ("lars", 0.3, 256, 1000),
        "simclr": ("lars", 0.6, 512, 1000),
        "byol": ("lars", 1.0, 256, 1000),
        "supervised": ("sgd", 0.075, 128, 200),
    }
    for learner, (opt, lr, batch, epochs) in confusion_rows.items():
        iters = epochs * math.ceil(50_000 / batch)
        loss_kind = learner if learner != "supervised" else "simclr"
        presets[f"cifar100_confusion_{learner}"] = {
            "name": f"cifar100_confusion_{learner}",
            "seed": 5,
            "data": {"dataset": "cifar100", "num_tasks": 10, "split_seed": 5,
                     "augmentation": {"preset": "cifar100"}},
            "model": {"arch": "resnet18", "in_channels": 3, "image_size": 32,
                      "projector_hidden": 2048,
                      "projector_dim": _BENCHMARK_HYPERPARAMS["cifar100"].get(
                          loss_kind, (0, 0, 0, 0, 2048))[4],
                      "predictor_hidden": 4096},
            "loss": {"kind": loss_kind},
            "trainer": {"batch_size": batch,
                        "optimizer": {"kind": opt, "lr": lr}},
            "confusion": {"learners": [learner],
                          "modes": ["cil_minibatch", "single_pool",
                                    "dil_minibatch"],
                          "iterations": iters, "probe_cadence": iters // 10,
                          "num_tasks": 10, "batch_size": batch,
                          "supervised_lr": 0.075},
        }
    presets["toy_confusion"] = {
        "name": "toy_confusion",
        "seed": 1,
        "data": {"dataset": "synthetic-gaussians", "num_tasks": 2,
                 "split_seed": 1},
        "model": {"arch": "mlp", "in_channels": 2, "image_size": 8,
                  "feature_dim": 16, "projector_hidden": 16,
                  "projector_dim": 8, "predictor_hidden": 16,
                  "mlp_hidden": [32]},
        "loss": {"kind": "simclr"},
        "trainer": {"batch_size": 64,
                    "optimizer": {"kind": "sgd", "lr": 0.15}},
        "eval": {"probe_epochs": 40, "probe_lr": 0.3, "probe_batch_size": 128},
        "confusion": {"learners": ["simclr", "supervised"],
                      "modes": ["cil_minibatch", "single_pool", "dil_minibatch"],
                      "iterations": 1800, "probe_cadence": 600,
                      "num_tasks": 2, "batch_size": 64},
    }
    return presets


PRESETS = _build_presets()
