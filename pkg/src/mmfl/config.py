"""Run configuration: YAML parsing, validation, and state construction.

The topology recipe follows the heterogeneous benchmark layout: most clients
can train every model while a small fraction is missing one; processor
counts split into a full-capacity group (B = number of available models), a
half-capacity group (B = ceil of half), and single-processor clients. The
communication budget is given either directly (``budget``) or as an active
rate, in which case m = rate * V.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import yaml

from .engine import ExperimentState, Method
from .models import ModelSpec, TrainConfig, init_weights
from .synthdata import DatasetSpec, generate_test_pool, partition_to_clients
from .topology import ClientProfile, SystemTopology, build_topology

_TAG_AVAIL = 21
_TAG_SPLIT = 22
_TAG_WEIGHTS = 23


class ConfigError(ValueError):
    """Invalid run configuration; carries all field-level problems."""

    def __init__(self, problems: list[str]):
        self.problems = problems
        super().__init__("invalid config:\n  " + "\n  ".join(problems))


@dataclass(frozen=True)
class TopologySpec:
    num_clients: int
    all_models_fraction: float = 0.9
    processor_split: tuple[float, float, float] = (0.25, 0.50, 0.25)


@dataclass(frozen=True)
class RunConfig:
    topology: TopologySpec
    num_models: int
    datasets: tuple[DatasetSpec, ...]
    models: tuple[ModelSpec, ...]
    train: TrainConfig
    method: str = "lvr"
    stale_beta: float = 1.0
    active_rate: float | None = 0.1
    budget: float | None = None
    rounds: int = 150
    eval_interval: int = 10
    seeds: tuple[int, ...] = (0,)
    output_dir: str = "out"

    def method_obj(self, kind: str | None = None) -> Method:
        return Method(kind=kind or self.method, stale_beta=self.stale_beta)

    def budget_for(self, topology: SystemTopology) -> float:
        if self.budget is not None:
            return float(self.budget)
        return self.active_rate * topology.total_processors


_TOP_KEYS = {
    "num_clients",
    "num_models",
    "all_models_fraction",
    "processor_split",
    "dataset",
    "datasets",
    "model",
    "models",
    "train",
    "method",
    "stale_beta",
    "active_rate",
    "budget",
    "rounds",
    "eval_interval",
    "seeds",
    "output_dir",
}
_DATASET_KEYS = {
    "num_labels",
    "feature_dim",
    "samples_per_label_pool",
    "label_fraction_per_client",
    "high_client_fraction",
    "high_low_ratio",
    "noise_scale",
    "count_jitter",
}
_MODEL_KEYS = {"kind", "hidden_dims"}
_TRAIN_KEYS = {
    "local_epochs",
    "batch_size",
    "learning_rate",
    "lr_schedule",
    "lr_gamma",
    "local_unit",
}
_SPLIT_KEYS = {"full", "half", "single"}


def _dataset_spec(block: dict, problems: list[str], where: str) -> DatasetSpec | None:
    unknown = set(block) - _DATASET_KEYS
    if unknown:
        problems.append(f"{where}: unknown keys {sorted(unknown)}")
        return None
    try:
        return DatasetSpec(**block)
    except (TypeError, ValueError) as exc:
        problems.append(f"{where}: {exc}")
        return None


def _model_spec(block: dict, dataset: DatasetSpec, problems: list[str], where: str) -> ModelSpec | None:
    unknown = set(block) - _MODEL_KEYS
    if unknown:
        problems.append(f"{where}: unknown keys {sorted(unknown)}")
        return None
    try:
        return ModelSpec(
            kind=block.get("kind", "softmax"),
            feature_dim=dataset.feature_dim,
            num_labels=dataset.num_labels,
            hidden_dims=tuple(block.get("hidden_dims", ())),
        )
    except (TypeError, ValueError) as exc:
        problems.append(f"{where}: {exc}")
        return None


def parse_config_dict(raw: dict) -> RunConfig:
    """Validate a config mapping; raises ConfigError listing every problem."""
    problems: list[str] = []
    if not isinstance(raw, dict):
        raise ConfigError(["config root must be a mapping"])
    unknown = set(raw) - _TOP_KEYS
    if unknown:
        problems.append(f"unknown keys {sorted(unknown)}")

    num_models = raw.get("num_models", 1)
    if not isinstance(num_models, int) or num_models < 1:
        problems.append("num_models must be a positive integer")
        num_models = 1

    num_clients = raw.get("num_clients")
    if not isinstance(num_clients, int) or num_clients < 1:
        problems.append("num_clients must be a positive integer")
        num_clients = 1

    split_block = raw.get("processor_split", {"full": 0.25, "half": 0.50, "single": 0.25})
    split = (0.25, 0.50, 0.25)
    if not isinstance(split_block, dict) or set(split_block) - _SPLIT_KEYS:
        problems.append("processor_split must map {full, half, single} to fractions")
    else:
        split = (
            float(split_block.get("full", 0.0)),
            float(split_block.get("half", 0.0)),
            float(split_block.get("single", 0.0)),
        )
        if abs(sum(split) - 1.0) > 1e-9:
            problems.append(f"processor_split fractions sum to {sum(split)}, expected 1.0")

    all_frac = raw.get("all_models_fraction", 0.9)
    if not 0 <= all_frac <= 1:
        problems.append("all_models_fraction must be in [0, 1]")

    # dataset block(s): one broadcast to all models, or a per-model list
    datasets: list[DatasetSpec] = []
    if "datasets" in raw:
        blocks = raw["datasets"]
        if not isinstance(blocks, list) or len(blocks) != num_models:
            problems.append("datasets must be a list with one entry per model")
        else:
            for i, block in enumerate(blocks):
                ds = _dataset_spec(block, problems, f"datasets[{i}]")
                if ds:
                    datasets.append(ds)
    else:
        ds = _dataset_spec(raw.get("dataset", {}) or {}, problems, "dataset")
        if ds:
            datasets = [ds] * num_models

    models: list[ModelSpec] = []
    if len(datasets) == num_models:
        if "models" in raw:
            blocks = raw["models"]
            if not isinstance(blocks, list) or len(blocks) != num_models:
                problems.append("models must be a list with one entry per model")
                blocks = []
        else:
            blocks = [raw.get("model", {}) or {}] * num_models
        for i, block in enumerate(blocks):
            ms = _model_spec(block, datasets[i], problems, f"model[{i}]")
            if ms:
                models.append(ms)
        if len(models) != num_models:
            models = []

    train_block = raw.get("train", {}) or {}
    train = None
    if set(train_block) - _TRAIN_KEYS:
        problems.append(f"train: unknown keys {sorted(set(train_block) - _TRAIN_KEYS)}")
    else:
        try:
            train = TrainConfig(**train_block)
        except (TypeError, ValueError) as exc:
            problems.append(f"train: {exc}")

    method = raw.get("method", "lvr")
    stale_beta = float(raw.get("stale_beta", 1.0))
    try:
        Method(kind=method, stale_beta=stale_beta)
    except ValueError as exc:
        problems.append(str(exc))

    active_rate = raw.get("active_rate")
    budget = raw.get("budget")
    if budget is None and active_rate is None:
        active_rate = 0.1
    if active_rate is not None and not 0 < active_rate <= 1:
        problems.append(f"active_rate {active_rate} outside (0, 1]")
    if budget is not None and budget <= 0:
        problems.append("budget must be positive")

    rounds = raw.get("rounds", 150)
    if not isinstance(rounds, int) or rounds < 0:
        problems.append("rounds must be a nonnegative integer")
        rounds = 0
    eval_interval = raw.get("eval_interval", 10)
    if not isinstance(eval_interval, int) or eval_interval < 1:
        problems.append("eval_interval must be a positive integer")
        eval_interval = 1

    seeds = raw.get("seeds", [0])
    if not isinstance(seeds, list) or not seeds or not all(isinstance(s, int) for s in seeds):
        problems.append("seeds must be a nonempty list of integers")
        seeds = [0]

    if problems:
        raise ConfigError(problems)

    return RunConfig(
        topology=TopologySpec(
            num_clients=num_clients,
            all_models_fraction=float(all_frac),
            processor_split=split,
        ),
        num_models=num_models,
        datasets=tuple(datasets),
        models=tuple(models),
        train=train,
        method=method,
        stale_beta=stale_beta,
        active_rate=active_rate,
        budget=budget,
        rounds=rounds,
        eval_interval=eval_interval,
        seeds=tuple(seeds),
        output_dir=str(raw.get("output_dir", "out")),
    )


def parse_config(path: str | Path) -> RunConfig:
    raw = yaml.safe_load(Path(path).read_text())
    return parse_config_dict(raw or {})


def _rng(*tags: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(t) for t in tags]))


def sample_availability(config: RunConfig, seed: int) -> dict[int, frozenset[int]]:
    """Per-client available model sets; a fixed fraction misses one model."""
    n = config.topology.num_clients
    s_all = frozenset(range(config.num_models))
    rng = _rng(seed, _TAG_AVAIL)
    n_limited = round((1 - config.topology.all_models_fraction) * n)
    limited = set(rng.permutation(n)[:n_limited].tolist())
    out: dict[int, frozenset[int]] = {}
    for cid in range(n):
        if cid in limited and config.num_models > 1:
            drop = int(rng.integers(0, config.num_models))
            out[cid] = s_all - {drop}
        else:
            out[cid] = s_all
    return out


def sample_processor_counts(
    available: dict[int, frozenset[int]], split: tuple[float, float, float], seed: int
) -> dict[int, int]:
    """Assign B_i: full group B=|S_i|, half group B=ceil(|S_i|/2), rest B=1."""
    n = len(available)
    rng = _rng(seed, _TAG_SPLIT)
    order = rng.permutation(n).tolist()
    n_full = round(split[0] * n)
    n_half = round(split[1] * n)
    counts: dict[int, int] = {}
    for pos, cid in enumerate(order):
        k = len(available[cid])
        if pos < n_full:
            counts[cid] = max(1, k)
        elif pos < n_full + n_half:
            counts[cid] = max(1, int(np.ceil(k / 2)))
        else:
            counts[cid] = 1
    return counts


def build_state(config: RunConfig, seed: int) -> ExperimentState:
    """Materialize topology, data, weights, and pools for one seed.

    Runs in two passes because client data sizes depend on per-model tier
    draws, which need model membership first: a placeholder topology fixes
    availability, then datasets set the real sample counts.
    """
    available = sample_availability(config, seed)
    counts = sample_processor_counts(available, config.topology.processor_split, seed)

    placeholder = [
        ClientProfile(
            client_id=cid,
            num_processors=counts[cid],
            samples_per_model={s: 1 for s in sorted(available[cid])},
        )
        for cid in range(config.topology.num_clients)
    ]
    skeleton = build_topology(placeholder, config.num_models)

    datasets: dict[int, dict[int, object]] = {}
    for s in range(config.num_models):
        datasets[s] = partition_to_clients(config.datasets[s], skeleton, s, seed)

    profiles = [
        ClientProfile(
            client_id=cid,
            num_processors=counts[cid],
            samples_per_model={
                s: len(datasets[s][cid]) for s in sorted(available[cid])
            },
        )
        for cid in range(config.topology.num_clients)
    ]
    topology = build_topology(profiles, config.num_models)

    weights = {
        s: init_weights(config.models[s], _seed_for_weights(seed, s))
        for s in range(config.num_models)
    }
    test_pools = {
        s: generate_test_pool(config.datasets[s], s, seed)
        for s in range(config.num_models)
    }
    return ExperimentState(
        topology=topology,
        model_specs=dict(enumerate(config.models)),
        train_cfg=config.train,
        weights=weights,
        datasets=datasets,
        test_pools=test_pools,
        budget=config.budget_for(topology),
        seed=seed,
    )


def _seed_for_weights(seed: int, model_id: int) -> int:
    mix = np.random.SeedSequence([seed, _TAG_WEIGHTS, model_id])
    return int(mix.generate_state(1)[0])
