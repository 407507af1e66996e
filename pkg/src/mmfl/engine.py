"""Global-round protocol: allocate, train, aggregate, record.

One round runs (1) method-specific information gathering, (2) plan
construction, (3) an independent categorical assignment draw, (4) local
training for the active processors (reusing results when the plan already
required training everyone), (5) aggregation, (6) stale-store refresh for
methods keeping stale updates, (7) metrics.

Aggregation coefficients are P = d / (B * p), making every sampled step an
unbiased estimator of the full-participation step sum_i d_i G_i. The stale
rules replace the sampled term with the residual against beta-scaled stale
updates while adding the deterministic stale sum, preserving unbiasedness
for any beta.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from .models import (
    DivergenceError,
    LocalUpdate,
    ModelSpec,
    TrainConfig,
    accuracy,
    local_train,
    loss,
)
from .sampling import (
    Assignment,
    SamplingPlan,
    gvr_magnitudes,
    lvr_magnitudes,
    random_plan,
    sample_assignment,
    solve_plan,
    stalevr_magnitudes,
)
from .staleness import StaleStore, beta_opt
from .synthdata import ClientDataset
from .topology import ProcessorRef, SystemTopology

METHOD_KINDS = (
    "random",
    "full",
    "gvr",
    "lvr",
    "stale_naive",
    "stale_vr",
    "stale_vre",
)
STALE_KINDS = ("stale_naive", "stale_vr", "stale_vre")

# RNG stream tags; every stream is derived from (seed, tag, ...) so results
# never depend on execution order.
TAG_ASSIGN = 11
TAG_TRAIN = 12
TAG_INIT = 13


class ProtocolError(RuntimeError):
    """An active processor failed to supply its update."""


@dataclass(frozen=True)
class Method:
    """A training method; ``stale_beta`` applies to the naive stale rule only."""

    kind: str
    stale_beta: float = 1.0

    def __post_init__(self) -> None:
        if self.kind not in METHOD_KINDS:
            raise ValueError(f"unknown method {self.kind!r}; choose from {METHOD_KINDS}")
        if self.kind == "stale_naive" and not 0 <= self.stale_beta <= 1:
            raise ValueError("stale_beta must be in [0, 1]")

    @property
    def label(self) -> str:
        return self.kind


@dataclass
class ModelRoundMetrics:
    loss: float
    accuracy: float | None = None
    step_size: float | None = None
    participation_variance: float | None = None
    surrogate_objective: float | None = None


@dataclass
class RoundMetrics:
    round_index: int
    models: dict[int, ModelRoundMetrics]
    updates_uploaded: int = 0
    loss_scalars_uploaded: int = 0
    gradient_computations: int = 0
    stale_memory_slots: int = 0


@dataclass
class ExperimentState:
    """Mutable per-run state; weights and the stale store evolve per round."""

    topology: SystemTopology
    model_specs: dict[int, ModelSpec]
    train_cfg: TrainConfig
    weights: dict[int, np.ndarray]
    datasets: dict[int, dict[int, ClientDataset]]
    test_pools: dict[int, tuple[np.ndarray, np.ndarray]]
    budget: float
    seed: int
    store: StaleStore = field(default_factory=StaleStore)
    round_index: int = 0
    prev_step_size: dict[int, float] = field(default_factory=dict)

    def learning_rate(self, model_id: int) -> float:
        cfg = self.train_cfg
        if cfg.lr_schedule == "constant":
            return cfg.learning_rate
        k = cfg.local_epochs
        # decaying schedule; the max term uses the previously realized
        # coefficient sum (the current round's is unknown before training)
        gamma = max(cfg.lr_gamma, 4.0 * k * self.prev_step_size.get(model_id, 1.0))
        return cfg.learning_rate * (k + cfg.lr_gamma) / ((self.round_index + 1) * k + gamma)


def _rng(*tags: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(t) for t in tags]))


def _client_pairs(topology: SystemTopology) -> list[tuple[int, int]]:
    return sorted(
        (cid, s)
        for s in range(topology.num_models)
        for cid in topology.model_clients[s]
    )


def full_participation_step(
    topology: SystemTopology,
    updates: dict[tuple[int, int], np.ndarray],
    model_id: int,
) -> np.ndarray:
    """sum_i d[i,s] G[i,s] over the model's clients."""
    step = None
    for cid in sorted(topology.model_clients[model_id]):
        term = topology.weight(cid, model_id) * updates[(cid, model_id)]
        step = term if step is None else step + term
    assert step is not None
    return step


def _sampled_sum(
    topology: SystemTopology,
    assignment: Assignment,
    plan: SamplingPlan,
    model_id: int,
    term_for: Callable[[int], np.ndarray],
    dim: int,
) -> tuple[np.ndarray, float]:
    """Inverse-probability-weighted sum over the model's active processors."""
    total = np.zeros(dim)
    coeff_sum = 0.0
    for ref in sorted(assignment.active.get(model_id, frozenset())):
        p = plan.probs[(ref, model_id)]
        d = topology.weight(ref.client_id, model_id)
        b = topology.client(ref.client_id).num_processors
        coeff = d / (b * p)
        total += coeff * term_for(ref.client_id)
        coeff_sum += coeff
    return total, coeff_sum


def aggregate_plain(
    weights: dict[int, np.ndarray],
    assignment: Assignment,
    updates: dict[tuple[int, int], np.ndarray],
    plan: SamplingPlan,
    topology: SystemTopology,
) -> tuple[dict[int, np.ndarray], dict[int, float]]:
    """w' = w - sum over actives of P * G, with P = d/(B p)."""
    new_weights: dict[int, np.ndarray] = {}
    coeff_sums: dict[int, float] = {}
    for s in range(topology.num_models):
        def term(cid: int, s: int = s) -> np.ndarray:
            try:
                return updates[(cid, s)]
            except KeyError:
                raise ProtocolError(f"missing update for client {cid}, model {s}") from None

        delta, coeff_sums[s] = _sampled_sum(
            topology, assignment, plan, s, term, len(weights[s])
        )
        new_weights[s] = weights[s] - delta
    return new_weights, coeff_sums


def aggregate_stale_naive(
    weights: dict[int, np.ndarray],
    assignment: Assignment,
    updates: dict[tuple[int, int], np.ndarray],
    plan: SamplingPlan,
    topology: SystemTopology,
    store: StaleStore,
    beta_global: float,
) -> tuple[dict[int, np.ndarray], dict[int, float]]:
    """Stale rule with one global beta; beta = 0 reduces to aggregate_plain."""
    betas = {
        (cid, s): beta_global
        for s in range(topology.num_models)
        for cid in sorted(topology.model_clients[s])
    }
    return aggregate_stale_vr(weights, assignment, updates, plan, topology, store, betas)


def aggregate_stale_vr(
    weights: dict[int, np.ndarray],
    assignment: Assignment,
    updates: dict[tuple[int, int], np.ndarray],
    plan: SamplingPlan,
    topology: SystemTopology,
    store: StaleStore,
    betas: dict[tuple[int, int], float],
) -> tuple[dict[int, np.ndarray], dict[int, float]]:
    """Adaptive stale rule: deterministic stale sum plus sampled residuals.

    w' = w - [ sum_i d * beta_i * h_i  +  sum_actives d (G - beta h) / (B p) ]

    Stale updates are treated as zero vectors where the store has none, so
    clients without history contribute only their fresh term.
    """
    new_weights: dict[int, np.ndarray] = {}
    coeff_sums: dict[int, float] = {}
    for s in range(topology.num_models):
        fixed = np.zeros(len(weights[s]))
        for cid in sorted(topology.model_clients[s]):
            h = store.stale_update(cid, s)
            if h is None:
                continue
            fixed += topology.weight(cid, s) * (betas.get((cid, s), 0.0) * h)

        def term(cid: int, s: int = s) -> np.ndarray:
            try:
                g = updates[(cid, s)]
            except KeyError:
                raise ProtocolError(f"missing update for client {cid}, model {s}") from None
            h = store.stale_update(cid, s)
            if h is None:
                return g
            return g - betas.get((cid, s), 0.0) * h

        sampled, coeff_sums[s] = _sampled_sum(
            topology, assignment, plan, s, term, len(weights[s])
        )
        new_weights[s] = weights[s] - (fixed + sampled)
    return new_weights, coeff_sums


def _build_plan(
    state: ExperimentState,
    method: Method,
    losses: dict[tuple[int, int], float],
    updates: dict[tuple[int, int], np.ndarray],
    etas: dict[int, float],
) -> SamplingPlan:
    topo = state.topology
    if method.kind == "lvr":
        return solve_plan(lvr_magnitudes(topo, losses), state.budget)
    if method.kind == "gvr":
        norms = {
            key: float(np.linalg.norm(g)) for key, g in sorted(updates.items())
        }
        return solve_plan(gvr_magnitudes(topo, norms, etas), state.budget)
    if method.kind == "stale_vr":
        residuals = {}
        for (cid, s), g in sorted(updates.items()):
            h = state.store.stale_update(cid, s)
            residuals[(cid, s)] = float(np.linalg.norm(g if h is None else g - h))
        return solve_plan(stalevr_magnitudes(topo, residuals, etas), state.budget)
    # random, stale_naive, and stale_vre allocate uniformly: they gather no
    # per-client information before the draw
    return random_plan(topo, state.budget)


def run_round(state: ExperimentState, method: Method, rng: np.random.Generator) -> RoundMetrics:
    """Execute one global round in place and return its metrics."""
    topo = state.topology
    tau = state.round_index
    etas = {s: state.learning_rate(s) for s in range(topo.num_models)}
    metrics = RoundMetrics(round_index=tau, models={})

    # Evaluation pass at the round's starting weights. Only loss-based
    # sampling actually uploads these scalars; for every other method they
    # are simulator-side measurements.
    losses: dict[tuple[int, int], float] = {}
    for cid, s in _client_pairs(topo):
        ds = state.datasets[s][cid]
        losses[(cid, s)] = loss(state.weights[s], ds.features, ds.labels, state.model_specs[s])
    if method.kind == "lvr":
        metrics.loss_scalars_uploaded = len(losses)

    updates: dict[tuple[int, int], np.ndarray] = {}

    def train_client(cid: int, s: int) -> np.ndarray:
        if (cid, s) in updates:
            return updates[(cid, s)]
        ds = state.datasets[s][cid]
        cfg = replace(state.train_cfg, learning_rate=etas[s])
        try:
            up: LocalUpdate = local_train(
                state.weights[s],
                ds.features,
                ds.labels,
                state.model_specs[s],
                cfg,
                _rng(state.seed, TAG_TRAIN, tau, cid, s),
                source=ProcessorRef(cid, 0),
                model_id=s,
                round_index=tau,
            )
        except DivergenceError as exc:
            raise DivergenceError(f"method {method.kind}: {exc}") from exc
        updates[(cid, s)] = up.delta
        metrics.gradient_computations += 1
        return up.delta

    # (1) information gathering: these methods need updates from everyone
    # before they can allocate, and the later steps reuse the results
    if method.kind in ("gvr", "stale_vr", "full"):
        for cid, s in _client_pairs(topo):
            train_client(cid, s)

    if method.kind == "full":
        plan = None
        assignment = None
        metrics.updates_uploaded = sum(
            len(topo.model_clients[s]) for s in range(topo.num_models)
        )
    else:
        # (2) plan and (3) independent assignment draw
        plan = _build_plan(state, method, losses, updates, etas)
        assignment = sample_assignment(plan, rng, tau)
        metrics.updates_uploaded = assignment.total_active()
        # (4) local training for active processors (cache skips retraining)
        for ref, s in assignment.active_pairs():
            train_client(ref.client_id, s)

    # surrogate objective of the realized draw, at the starting weights
    surrogate: dict[int, float] = {}
    for s in range(topo.num_models):
        if method.kind == "full":
            surrogate[s] = sum(
                topo.weight(cid, s) * losses[(cid, s)]
                for cid in sorted(topo.model_clients[s])
            )
        else:
            total = 0.0
            for ref in sorted(assignment.active.get(s, frozenset())):
                p = plan.probs[(ref, s)]
                d = topo.weight(ref.client_id, s)
                b = topo.client(ref.client_id).num_processors
                total += d / (b * p) * losses[(ref.client_id, s)]
            surrogate[s] = total

    # (5) aggregation
    if method.kind == "full":
        coeff_sums = {}
        new_weights = {}
        for s in range(topo.num_models):
            new_weights[s] = state.weights[s] - full_participation_step(topo, updates, s)
            coeff_sums[s] = sum(
                topo.weight(cid, s) for cid in topo.model_clients[s]
            )
    elif method.kind in ("random", "gvr", "lvr"):
        new_weights, coeff_sums = aggregate_plain(
            state.weights, assignment, updates, plan, topo
        )
    elif method.kind == "stale_naive":
        new_weights, coeff_sums = aggregate_stale_naive(
            state.weights, assignment, updates, plan, topo, state.store, method.stale_beta
        )
    else:  # stale_vr, stale_vre
        betas: dict[tuple[int, int], float] = {}
        if method.kind == "stale_vr":
            for (cid, s), g in sorted(updates.items()):
                h = state.store.stale_update(cid, s)
                if h is not None:
                    betas[(cid, s)] = beta_opt(g, h)
        else:
            active_clients = {
                (ref.client_id, s) for ref, s in assignment.active_pairs()
            }
            for cid, s in _client_pairs(topo):
                if not state.store.has(cid, s):
                    continue
                fresh = updates.get((cid, s)) if (cid, s) in active_clients else None
                betas[(cid, s)] = state.store.beta_estimate(cid, s, tau, fresh_update=fresh)
        new_weights, coeff_sums = aggregate_stale_vr(
            state.weights, assignment, updates, plan, topo, state.store, betas
        )

    # (6) the server refreshes its memory with the updates it received
    if method.kind in STALE_KINDS:
        received = (
            sorted({(ref.client_id, s) for ref, s in assignment.active_pairs()})
            if assignment is not None
            else sorted(updates)
        )
        for cid, s in received:
            state.store.refresh(cid, s, updates[(cid, s)], tau)
    metrics.stale_memory_slots = state.store.memory_slots

    # (7) metrics
    for s in range(topo.num_models):
        global_loss = sum(
            topo.weight(cid, s) * losses[(cid, s)]
            for cid in sorted(topo.model_clients[s])
        )
        metrics.models[s] = ModelRoundMetrics(
            loss=global_loss,
            step_size=coeff_sums[s],
            participation_variance=(coeff_sums[s] - 1.0) ** 2,
            surrogate_objective=surrogate[s],
        )

    state.weights = new_weights
    state.prev_step_size = dict(coeff_sums)
    state.round_index = tau + 1
    return metrics


def evaluate(state: ExperimentState, with_accuracy: bool = True) -> RoundMetrics:
    """Evaluation-only metrics row at the current weights."""
    topo = state.topology
    metrics = RoundMetrics(
        round_index=state.round_index,
        models={},
        stale_memory_slots=state.store.memory_slots,
    )
    for s in range(topo.num_models):
        global_loss = 0.0
        for cid in sorted(topo.model_clients[s]):
            ds = state.datasets[s][cid]
            global_loss += topo.weight(cid, s) * loss(
                state.weights[s], ds.features, ds.labels, state.model_specs[s]
            )
        acc = None
        if with_accuracy:
            tx, ty = state.test_pools[s]
            acc = accuracy(state.weights[s], tx, ty, state.model_specs[s])
        metrics.models[s] = ModelRoundMetrics(loss=global_loss, accuracy=acc)
    return metrics


def run_rounds(
    state: ExperimentState,
    method: Method,
    num_rounds: int,
    eval_interval: int = 10,
) -> list[RoundMetrics]:
    """Drive ``num_rounds`` rounds plus a final evaluation-only row.

    Test accuracy is attached every ``eval_interval`` rounds (at the round's
    starting weights) and always on the final row. The assignment stream for
    round t is derived from (seed, t) alone, so different methods on the
    same seed see the same stream roots.
    """
    history: list[RoundMetrics] = []
    for _ in range(num_rounds):
        tau = state.round_index
        rng = _rng(state.seed, TAG_ASSIGN, tau)
        do_eval = eval_interval > 0 and tau % eval_interval == 0
        acc: dict[int, float] = {}
        if do_eval:
            for s in range(state.topology.num_models):
                tx, ty = state.test_pools[s]
                acc[s] = accuracy(state.weights[s], tx, ty, state.model_specs[s])
        metrics = run_round(state, method, rng)
        for s, value in acc.items():
            metrics.models[s].accuracy = value
        history.append(metrics)
    history.append(evaluate(state))
    return history


def metrics_to_rows(history: list[RoundMetrics]) -> list[dict[str, object]]:
    rows = []
    for m in history:
        for s in sorted(m.models):
            mm = m.models[s]
            rows.append(
                {
                    "round": m.round_index,
                    "model": s,
                    "loss": mm.loss,
                    "accuracy": mm.accuracy,
                    "step_size": mm.step_size,
                    "participation_variance": mm.participation_variance,
                    "surrogate_objective": mm.surrogate_objective,
                    "updates_uploaded": m.updates_uploaded,
                    "loss_scalars_uploaded": m.loss_scalars_uploaded,
                    "gradient_computations": m.gradient_computations,
                    "stale_memory_slots": m.stale_memory_slots,
                }
            )
    return rows


METRIC_COLUMNS = (
    "round",
    "model",
    "loss",
    "accuracy",
    "step_size",
    "participation_variance",
    "surrogate_objective",
    "updates_uploaded",
    "loss_scalars_uploaded",
    "gradient_computations",
    "stale_memory_slots",
)


def format_metric_rows(history: list[RoundMetrics]) -> str:
    """Render history as delimited text with a fixed header; floats use repr
    so identical runs serialize byte-identically."""
    lines = [",".join(METRIC_COLUMNS)]
    for row in metrics_to_rows(history):
        cells = []
        for col in METRIC_COLUMNS:
            value = row[col]
            if value is None:
                cells.append("")
            elif isinstance(value, float):
                cells.append(repr(value))
            else:
                cells.append(str(value))
        lines.append(",".join(cells))
    return "\n".join(lines) + "\n"


def final_accuracies(history: list[RoundMetrics]) -> dict[int, float]:
    last = history[-1]
    out = {}
    for s, mm in last.models.items():
        if mm.accuracy is None:
            raise ValueError("final metrics row carries no accuracy")
        out[s] = mm.accuracy
    return out


def mean_step_sizes(history: list[RoundMetrics]) -> dict[int, float]:
    sums: dict[int, list[float]] = {}
    for m in history:
        for s, mm in m.models.items():
            if mm.step_size is not None:
                sums.setdefault(s, []).append(mm.step_size)
    return {s: float(np.mean(v)) for s, v in sums.items()}
