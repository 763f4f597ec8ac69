"""Run configuration: JSON schema, validation, and object builders.

A config describes one experiment grid: a shared data block, a shared training
block, and either one method (top-level scheduler/strategy/compression blocks)
or a `methods` array of labelled method blocks. Cells are (method x seed).
Unknown keys are rejected everywhere.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import jsonschema
import numpy as np

from . import seeding
from .compress import Compressor
from .datasim import Dataset, dirichlet_partition, generate_synthetic, stratified_split
from .errors import ConfigurationError
from .ispcore import IspConfig, IspSchedule, FixedSchedule, LinearSchedule, make_surrogate
from .numkit import ModelSpec
from .orchestrator import ClientPool, TrainingConfig
from .sampling import build_strategy

_SCHEDULER_SCHEMA = {
    "oneOf": [
        {
            "type": "object",
            "additionalProperties": False,
            "required": ["kind", "m"],
            "properties": {
                "kind": {"const": "fixed"},
                "m": {"type": "integer", "minimum": 1},
            },
        },
        {
            "type": "object",
            "additionalProperties": False,
            "required": ["kind", "m_start", "m_final", "step_every"],
            "properties": {
                "kind": {"const": "linear"},
                "m_start": {"type": "integer", "minimum": 1},
                "m_final": {"type": "integer", "minimum": 1},
                "step_every": {"type": "integer", "minimum": 1},
            },
        },
        {
            "type": "object",
            "additionalProperties": False,
            "required": ["kind"],
            "properties": {
                "kind": {"const": "isp"},
                "solve_every": {"type": "integer", "minimum": 1},
                "depth": {"type": "integer", "minimum": 1},
                "resolution": {"type": "integer", "minimum": 1},
                "momentum": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
                "ema_window": {"type": "integer", "minimum": 1},
                "intermediate_size": {"type": ["integer", "null"], "minimum": 1},
                "initial_m": {"type": "integer", "minimum": 1},
                "mode": {"enum": ["feasibility", "relative_improvement"]},
                "ri_exponent": {"type": "number", "exclusiveMinimum": 0},
                "intermediate_epochs": {"type": ["integer", "null"], "minimum": 1},
                "surrogate": {
                    "type": ["object", "null"],
                    "additionalProperties": False,
                    "required": ["size"],
                    "properties": {
                        "size": {"type": "integer", "minimum": 1},
                        "label_noise": {"type": "number", "minimum": 0, "maximum": 1},
                        "feature_jitter": {"type": "number", "minimum": 0},
                    },
                },
            },
        },
    ]
}

_STRATEGY_SCHEMA = {
    "oneOf": [
        {
            "type": "object",
            "additionalProperties": False,
            "required": ["kind"],
            "properties": {"kind": {"const": "uniform"}},
        },
        {
            "type": "object",
            "additionalProperties": False,
            "required": ["kind", "pool_size"],
            "properties": {
                "kind": {"const": "pow_d"},
                "pool_size": {"type": "integer", "minimum": 1},
            },
        },
        {
            "type": "object",
            "additionalProperties": False,
            "required": ["kind"],
            "properties": {"kind": {"const": "valuation"}},
        },
    ]
}

_COMPRESSION_SCHEMA = {
    "type": ["object", "null"],
    "additionalProperties": False,
    "required": ["kind", "fraction"],
    "properties": {
        "kind": {"enum": ["top_k", "rand_k"]},
        "fraction": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
    },
}

_METHOD_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["label", "scheduler"],
    "properties": {
        "label": {"type": "string", "minLength": 1},
        "scheduler": _SCHEDULER_SCHEMA,
        "strategy": _STRATEGY_SCHEMA,
        "compression": _COMPRESSION_SCHEMA,
    },
}

CONFIG_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["data", "training"],
    "properties": {
        "label": {"type": "string", "minLength": 1},
        "data": {
            "type": "object",
            "additionalProperties": False,
            "required": ["classes", "p", "n", "class_sep", "alpha", "M"],
            "properties": {
                "classes": {"type": "integer", "minimum": 2},
                "p": {"type": "integer", "minimum": 1},
                "n": {"type": "integer", "minimum": 2},
                "class_sep": {"type": "number", "minimum": 0},
                "alpha": {"type": "number", "exclusiveMinimum": 0},
                "M": {"type": "integer", "minimum": 1},
            },
        },
        "training": {
            "type": "object",
            "additionalProperties": False,
            "required": ["rounds", "epochs", "lr", "optimizer", "batch_size", "seeds"],
            "properties": {
                "rounds": {"type": "integer", "minimum": 0},
                "epochs": {"type": "integer", "minimum": 1},
                "lr": {"type": "number", "minimum": 0},
                "optimizer": {"enum": ["sgd", "adam"]},
                "batch_size": {"type": "integer", "minimum": 1},
                "patience": {"type": "integer", "minimum": 1},
                "seeds": {
                    "type": "array",
                    "minItems": 1,
                    "items": {"type": "integer", "minimum": 0},
                },
                "model": {
                    "type": "object",
                    "additionalProperties": False,
                    "required": ["kind"],
                    "properties": {
                        "kind": {"enum": ["softmax", "mlp"]},
                        "hidden": {"type": "integer", "minimum": 1},
                    },
                },
            },
        },
        "scheduler": _SCHEDULER_SCHEMA,
        "strategy": _STRATEGY_SCHEMA,
        "compression": _COMPRESSION_SCHEMA,
        "methods": {"type": "array", "minItems": 1, "items": _METHOD_SCHEMA},
        "output": {
            "type": "object",
            "additionalProperties": False,
            "properties": {"dir": {"type": "string", "minLength": 1}},
        },
    },
}

DEFAULT_PATIENCE = 100


def _error_path(error: jsonschema.exceptions.ValidationError) -> str:
    parts = [str(p) for p in error.absolute_path]
    return ".".join(parts) if parts else "<root>"


def validate_config(config: dict) -> None:
    """Schema plus cross-field checks. Raises ConfigurationError naming the
    offending field path."""
    validator = jsonschema.Draft202012Validator(CONFIG_SCHEMA)
    errors = sorted(validator.iter_errors(config), key=jsonschema.exceptions.relevance)
    if errors:
        best = jsonschema.exceptions.best_match(errors)
        raise ConfigurationError(f"{_error_path(best)}: {best.message}")

    has_top = "scheduler" in config
    has_methods = "methods" in config
    if has_top == has_methods:
        raise ConfigurationError(
            "<root>: provide either a top-level 'scheduler' block or a 'methods' array"
        )

    data = config["data"]
    if data["M"] > data["n"]:
        raise ConfigurationError("data.M: more clients than dataset rows")

    for where, method in _method_blocks(config):
        sched = method["scheduler"]
        for key in ("m", "m_start", "m_final", "initial_m", "intermediate_size"):
            value = sched.get(key)
            if value is not None and value > data["M"]:
                raise ConfigurationError(f"{where}.scheduler.{key}: exceeds data.M")
        surrogate = sched.get("surrogate")
        if surrogate is not None and surrogate["size"] > data["n"]:
            raise ConfigurationError(f"{where}.scheduler.surrogate.size: exceeds data.n")
        strat = method.get("strategy")
        if strat is not None and strat.get("pool_size", 0) > data["M"]:
            raise ConfigurationError(f"{where}.strategy.pool_size: exceeds data.M")

    labels = [m["label"] for _, m in _method_blocks(config)]
    if len(labels) != len(set(labels)):
        raise ConfigurationError("methods: labels must be unique")


def _method_blocks(config: dict) -> list[tuple[str, dict]]:
    if "methods" in config:
        return [(f"methods[{i}]", m) for i, m in enumerate(config["methods"])]
    method = {
        "label": config.get("label", "default"),
        "scheduler": config["scheduler"],
    }
    if "strategy" in config:
        method["strategy"] = config["strategy"]
    if "compression" in config and config["compression"] is not None:
        method["compression"] = config["compression"]
    return [("<root>", method)]


def method_cells(config: dict) -> list[dict]:
    """Normalized method blocks (label, scheduler, strategy, compression)."""
    cells = []
    for _, method in _method_blocks(config):
        cells.append(
            {
                "label": method["label"],
                "scheduler": method["scheduler"],
                "strategy": method.get("strategy", {"kind": "uniform"}),
                "compression": method.get("compression"),
            }
        )
    return cells


def config_hash(config: dict) -> str:
    canonical = json.dumps(config, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode()).hexdigest()


def load_config(path: str | Path) -> dict:
    try:
        config = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"{path}: not valid JSON: {exc}") from exc
    validate_config(config)
    return config


@dataclass
class RunCell:
    """Everything needed to execute one (method, seed) cell."""

    label: str
    seed: int
    pool: ClientPool
    training: TrainingConfig
    scheduler: object
    strategy: object
    compressor: Compressor | None
    dataset: Dataset
    partition: object


def build_model(config: dict) -> ModelSpec:
    data = config["data"]
    model_cfg = config["training"].get("model", {"kind": "softmax"})
    return ModelSpec(
        kind=model_cfg["kind"],
        num_classes=data["classes"],
        num_features=data["p"],
        hidden=model_cfg.get("hidden", 16) if model_cfg["kind"] == "mlp" else 0,
    )


def build_cell(config: dict, method: dict, seed: int) -> RunCell:
    """Materialize data, clients, scheduler, strategy, and compressor for one
    cell. Data is regenerated per seed so seeds are fully independent draws."""
    data = config["data"]
    training_cfg = config["training"]
    model = build_model(config)

    dataset = generate_synthetic(
        classes=data["classes"], p=data["p"], n=data["n"], class_sep=data["class_sep"], seed=seed
    )
    partition = dirichlet_partition(dataset.labels, data["M"], data["alpha"], seed)
    handles = stratified_split(dataset.labels, partition)
    pool = ClientPool(dataset, handles, model)

    training = TrainingConfig(
        rounds=training_cfg["rounds"],
        epochs=training_cfg["epochs"],
        learning_rate=training_cfg["lr"],
        optimizer=training_cfg["optimizer"],
        batch_size=training_cfg["batch_size"],
        patience=training_cfg.get("patience", DEFAULT_PATIENCE),
        seed=seed,
    )

    sched_cfg = method["scheduler"]
    kind = sched_cfg["kind"]
    if kind == "fixed":
        scheduler = FixedSchedule(sched_cfg["m"])
    elif kind == "linear":
        scheduler = LinearSchedule(
            sched_cfg["m_start"], sched_cfg["m_final"], sched_cfg["step_every"]
        )
    else:
        isp_kwargs = {
            k: sched_cfg[k]
            for k in (
                "solve_every",
                "depth",
                "resolution",
                "momentum",
                "ema_window",
                "intermediate_size",
                "initial_m",
                "mode",
                "ri_exponent",
                "intermediate_epochs",
            )
            if k in sched_cfg
        }
        isp_cfg = IspConfig(**isp_kwargs)
        surrogate = None
        surrogate_cfg = sched_cfg.get("surrogate")
        if surrogate_cfg is not None:
            train_rows = np.concatenate([h.train_indices for h in handles])
            surrogate = make_surrogate(
                dataset.features[train_rows],
                dataset.labels[train_rows],
                model,
                size=surrogate_cfg["size"],
                seed=seed,
                label_noise=surrogate_cfg.get("label_noise", 0.0),
                feature_jitter=surrogate_cfg.get("feature_jitter", 0.0),
            )
        scheduler = IspSchedule(isp_cfg, surrogate=surrogate)

    strategy_rng = seeding.substream(seed, seeding.STRATEGY)
    data_sizes = np.array([len(h.train_indices) for h in handles], dtype=float)
    strategy = build_strategy(method["strategy"], data["M"], data_sizes, strategy_rng)

    compression_cfg = method.get("compression")
    compressor = None
    if compression_cfg is not None:
        compressor = Compressor(kind=compression_cfg["kind"], fraction=compression_cfg["fraction"])

    return RunCell(
        label=method["label"],
        seed=seed,
        pool=pool,
        training=training,
        scheduler=scheduler,
        strategy=strategy,
        compressor=compressor,
        dataset=dataset,
        partition=partition,
    )
