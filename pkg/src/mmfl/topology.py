"""Clients, processors, and per-model data weights.

A client ``i`` owns ``B_i`` processors, each able to run one training task
per global round. Model ``s`` is trainable by the clients holding data for
it; their data weights ``d[i, s]`` sum to one per model. Everything here is
immutable after construction and safe to share across round workers.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Mapping, NamedTuple


class ProcessorRef(NamedTuple):
    """One training slot of a client. Orders by (client_id, slot)."""

    client_id: int
    slot: int


@dataclass(frozen=True)
class ClientProfile:
    """Static description of one client.

    ``samples_per_model`` maps model index to local sample count; a model is
    available to the client exactly when its count is positive.
    """

    client_id: int
    num_processors: int
    samples_per_model: Mapping[int, int]

    def __post_init__(self) -> None:
        if self.client_id < 0:
            raise ValueError(f"client_id must be >= 0, got {self.client_id}")
        if self.num_processors < 1:
            raise ValueError(
                f"client {self.client_id}: num_processors must be >= 1, "
                f"got {self.num_processors}"
            )
        for model_id, count in self.samples_per_model.items():
            if model_id < 0:
                raise ValueError(f"client {self.client_id}: negative model index {model_id}")
            if count < 0:
                raise ValueError(
                    f"client {self.client_id}: negative sample count for model {model_id}"
                )

    @property
    def available_models(self) -> frozenset[int]:
        return frozenset(s for s, n in self.samples_per_model.items() if n > 0)

    def sample_count(self, model_id: int) -> int:
        return int(self.samples_per_model.get(model_id, 0))


@dataclass(frozen=True)
class SystemTopology:
    """Full system description shared by sampling, training, and aggregation.

    Invariants (enforced by :func:`build_topology`):
      * per-model data weights sum to 1 within 1e-12,
      * ``total_processors`` counts the processors of every client that can
        train at least one model,
      * membership is symmetric: client i is in ``model_clients[s]`` exactly
        when s is available to i.
    """

    clients: tuple[ClientProfile, ...]
    num_models: int
    data_weights: Mapping[tuple[int, int], float]
    model_clients: Mapping[int, frozenset[int]]
    total_processors: int
    processors: tuple[ProcessorRef, ...] = field(repr=False)

    def client(self, client_id: int) -> ClientProfile:
        return self.clients[client_id]

    def weight(self, client_id: int, model_id: int) -> float:
        return self.data_weights[(client_id, model_id)]

    def feasible_models(self, client_id: int) -> tuple[int, ...]:
        return tuple(sorted(self.clients[client_id].available_models))

    def processors_for_model(self, model_id: int) -> tuple[ProcessorRef, ...]:
        refs = []
        for cid in sorted(self.model_clients[model_id]):
            for b in range(self.clients[cid].num_processors):
                refs.append(ProcessorRef(cid, b))
        return tuple(refs)


def compute_data_weights(
    profiles: Iterable[ClientProfile],
    num_models: int | None = None,
) -> dict[tuple[int, int], float]:
    """Per-model dataset fractions d[i, s] = n[i, s] / sum_j n[j, s].

    When ``num_models`` is given, every model index in [0, num_models) must
    have a positive total sample count.
    """
    profiles = list(profiles)
    if num_models is None:
        seen = [s for p in profiles for s in p.available_models]
        num_models = max(seen) + 1 if seen else 0

    totals = {s: 0 for s in range(num_models)}
    for p in profiles:
        for s in p.available_models:
            if s >= num_models:
                raise ValueError(
                    f"client {p.client_id}: model index {s} outside [0, {num_models})"
                )
            totals[s] += p.sample_count(s)

    weights: dict[tuple[int, int], float] = {}
    for s in range(num_models):
        if totals[s] <= 0:
            raise ValueError(f"empty model population: model {s} has no samples")
        for p in profiles:
            if s in p.available_models:
                weights[(p.client_id, s)] = p.sample_count(s) / totals[s]
    return weights


def build_topology(profiles: Iterable[ClientProfile], num_models: int) -> SystemTopology:
    """Assemble and validate a :class:`SystemTopology` from client profiles.

    Client ids must be unique and contiguous from zero. Raises ``ValueError``
    on duplicate ids, out-of-range model indices, or a model no client can
    train.
    """
    profiles = sorted(profiles, key=lambda p: p.client_id)
    if not profiles:
        raise ValueError("empty client list")
    ids = [p.client_id for p in profiles]
    if len(set(ids)) != len(ids):
        raise ValueError("duplicate client ids")
    if ids != list(range(len(ids))):
        raise ValueError("client ids must be contiguous from 0")

    weights = compute_data_weights(profiles, num_models)

    model_clients = {
        s: frozenset(p.client_id for p in profiles if s in p.available_models)
        for s in range(num_models)
    }

    participating = sorted(
        {p.client_id for p in profiles if p.available_models}
    )
    clients = tuple(profiles)
    processors = tuple(
        ProcessorRef(cid, b)
        for cid in participating
        for b in range(clients[cid].num_processors)
    )
    total = len(processors)

    return SystemTopology(
        clients=clients,
        num_models=num_models,
        data_weights=weights,
        model_clients=model_clients,
        total_processors=total,
        processors=processors,
    )
