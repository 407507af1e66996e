"""Synthetic non-IID multi-model classification data.

Each model gets its own Gaussian-blob classification problem: one prototype
mean per label, samples drawn as mean plus isotropic noise. Client datasets
are non-IID two ways: every client only sees a fraction of the labels, and
clients split into a small high-data tier and a large low-data tier. Tier
membership is redrawn per model, so a client can be data-rich for one model
and data-poor for another.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .topology import SystemTopology

TEST_POOL_FRACTION = 0.2

# Salts keeping the independent per-purpose RNG streams apart.
_SALT_PROTO = 101
_SALT_TIER = 202
_SALT_LABELS = 303
_SALT_SAMPLES = 404
_SALT_TEST = 505


@dataclass(frozen=True)
class DatasetSpec:
    """Knobs for one model's synthetic dataset.

    ``samples_per_label_pool`` sizes the idealized pooled dataset; 20% of the
    pool is held out as an IID test set and the rest is the budget spread
    over clients by the tier plan. ``count_jitter`` optionally perturbs each
    client's sample count by a uniform factor in [1-j, 1+j] (default: exact
    counts).
    """

    num_labels: int
    feature_dim: int
    samples_per_label_pool: int
    label_fraction_per_client: float = 0.30
    high_client_fraction: float = 0.10
    high_low_ratio: float = 10.0
    noise_scale: float = 0.8
    count_jitter: float = 0.0

    def __post_init__(self) -> None:
        if self.num_labels < 2:
            raise ValueError("num_labels must be >= 2")
        if self.feature_dim < 1:
            raise ValueError("feature_dim must be >= 1")
        if self.samples_per_label_pool < 1:
            raise ValueError("samples_per_label_pool must be >= 1")
        if not 0 < self.label_fraction_per_client <= 1:
            raise ValueError("label_fraction_per_client must be in (0, 1]")
        if not 0 <= self.high_client_fraction <= 1:
            raise ValueError("high_client_fraction must be in [0, 1]")
        if self.high_low_ratio < 1:
            raise ValueError("high_low_ratio must be >= 1")
        if self.noise_scale < 0:
            raise ValueError("noise_scale must be >= 0")
        if not 0 <= self.count_jitter < 1:
            raise ValueError("count_jitter must be in [0, 1)")

    @property
    def pool_total(self) -> int:
        return self.num_labels * self.samples_per_label_pool

    @property
    def client_budget(self) -> int:
        return self.pool_total - round(TEST_POOL_FRACTION * self.pool_total)

    @property
    def labels_per_client(self) -> int:
        k = int(np.ceil(self.label_fraction_per_client * self.num_labels))
        if not 1 <= k <= self.num_labels:
            raise ValueError(
                f"infeasible label sharding: need {k} labels from {self.num_labels}"
            )
        return k


@dataclass(frozen=True)
class ClientDataset:
    features: np.ndarray  # (n, feature_dim)
    labels: np.ndarray  # (n,) int
    model_id: int

    def __post_init__(self) -> None:
        if len(self.features) != len(self.labels):
            raise ValueError("features and labels must have equal length")

    def __len__(self) -> int:
        return len(self.labels)


def _rng(seed: int, *tags: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), *map(int, tags)]))


def generate_label_prototypes(spec: DatasetSpec, seed: int) -> np.ndarray:
    """One mean vector per label, (num_labels, feature_dim).

    Means are standard normal draws; in the dimensions used here they are
    pairwise distinct and well separated relative to ``noise_scale``.
    """
    rng = _rng(seed, _SALT_PROTO)
    means = rng.normal(size=(spec.num_labels, spec.feature_dim))
    # Re-draw any exact collision (practically unreachable, cheap to guard).
    for i in range(spec.num_labels):
        for j in range(i):
            if np.array_equal(means[i], means[j]):
                means[i] = rng.normal(size=spec.feature_dim)
    return means


def _sample_blob(
    means: np.ndarray, labels: np.ndarray, noise: float, rng: np.random.Generator
) -> np.ndarray:
    return means[labels] + noise * rng.normal(size=(len(labels), means.shape[1]))


@dataclass(frozen=True)
class TierPlan:
    """Resolved per-model tier assignment and sample counts."""

    high_clients: frozenset[int]
    low_clients: frozenset[int]
    low_count: int
    high_count: int

    def count_for(self, client_id: int) -> int:
        return self.high_count if client_id in self.high_clients else self.low_count

    @property
    def planned_total(self) -> int:
        return len(self.high_clients) * self.high_count + len(self.low_clients) * self.low_count

    @property
    def high_tier_share(self) -> float:
        total = self.planned_total
        if total == 0:
            return 0.0
        return len(self.high_clients) * self.high_count / total


def tier_plan(
    spec: DatasetSpec, topology: SystemTopology, model_id: int, seed: int
) -> TierPlan:
    """Split the model's clients into high/low data tiers and size their shards.

    The low-tier count is the largest integer consuming at most the client
    budget; the high tier holds ``high_low_ratio`` times that. Redrawn
    independently per model from the seed.
    """
    members = sorted(topology.model_clients[model_id])
    if not members:
        raise ValueError(f"model {model_id} has no clients")
    rng = _rng(seed, _SALT_TIER, model_id)
    n_high = round(spec.high_client_fraction * len(members))
    order = rng.permutation(len(members))
    high = frozenset(members[i] for i in order[:n_high])
    low = frozenset(members) - high

    denom = n_high * spec.high_low_ratio + (len(members) - n_high)
    low_count = int(spec.client_budget // denom) if denom > 0 else 0
    if low_count < 1:
        raise ValueError(
            f"model {model_id}: pool budget {spec.client_budget} too small for "
            f"{len(members)} clients at ratio {spec.high_low_ratio}"
        )
    high_count = int(round(spec.high_low_ratio * low_count))
    return TierPlan(high_clients=high, low_clients=low, low_count=low_count, high_count=high_count)


def partition_to_clients(
    spec: DatasetSpec,
    topology: SystemTopology,
    model_id: int,
    seed: int,
) -> dict[int, ClientDataset]:
    """Client datasets for one model under label sharding plus data tiers.

    Every client draws a label subset (without replacement; overlap across
    clients allowed) and samples only from those labels. Same seed gives
    bit-identical output.
    """
    if not 0 <= model_id < topology.num_models:
        raise ValueError(f"model_id {model_id} outside [0, {topology.num_models})")
    means = generate_label_prototypes(spec, seed)
    plan = tier_plan(spec, topology, model_id, seed)
    k = spec.labels_per_client

    datasets: dict[int, ClientDataset] = {}
    for cid in sorted(topology.model_clients[model_id]):
        label_rng = _rng(seed, _SALT_LABELS, model_id, cid)
        subset = np.sort(label_rng.choice(spec.num_labels, size=k, replace=False))
        count = plan.count_for(cid)
        sample_rng = _rng(seed, _SALT_SAMPLES, model_id, cid)
        if spec.count_jitter > 0:
            factor = sample_rng.uniform(1 - spec.count_jitter, 1 + spec.count_jitter)
            count = max(1, int(round(count * factor)))
        labels = subset[sample_rng.integers(0, k, size=count)]
        features = _sample_blob(means, labels, spec.noise_scale, sample_rng)
        datasets[cid] = ClientDataset(features=features, labels=labels, model_id=model_id)
    return datasets


def generate_pool(spec: DatasetSpec, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Class-balanced pooled dataset: samples_per_label_pool rows per label."""
    means = generate_label_prototypes(spec, seed)
    labels = np.repeat(np.arange(spec.num_labels), spec.samples_per_label_pool)
    rng = _rng(seed, _SALT_SAMPLES, 0xF00D)
    features = _sample_blob(means, labels, spec.noise_scale, rng)
    return features, labels


def generate_test_pool(
    spec: DatasetSpec, model_id: int, seed: int
) -> tuple[np.ndarray, np.ndarray]:
    """Held-out IID test pool for one model (20% of the pool, class balanced)."""
    means = generate_label_prototypes(spec, seed)
    per_label = max(1, round(TEST_POOL_FRACTION * spec.samples_per_label_pool))
    labels = np.repeat(np.arange(spec.num_labels), per_label)
    rng = _rng(seed, _SALT_TEST, model_id)
    features = _sample_blob(means, labels, spec.noise_scale, rng)
    return features, labels


def export_dataset(dataset: ClientDataset, path: str | Path) -> None:
    """Write one dataset as delimited text: feature columns then the label."""
    rows = np.column_stack([dataset.features, dataset.labels.astype(float)])
    header = ",".join(
        [f"x{j}" for j in range(dataset.features.shape[1])] + ["label"]
    )
    np.savetxt(path, rows, delimiter=",", header=header, comments="")
