"""Per-round sampling plans over (processor, model) pairs.

The optimized plans all share one shape: given a nonnegative magnitude
``u[(i,b), s]`` per feasible pair, the variance-minimizing probabilities are
proportional to the magnitudes, with a single shared constant inside an
unsaturated processor set V0 and row-normalized (probabilities summing to
exactly one) outside it. V0 is the largest set satisfying

    0 < (m - V + k) <= sum_{V0} M / max_{V0} M,      k = |V0|,

where ``M`` is a processor's magnitude row sum and ``m`` the expected number
of uploaded updates per round. What distinguishes the methods is only the
magnitude definition:

  * loss-based:      u = d * f / B            (loss value f, forward pass only)
  * gradient-based:  u = d * ||G|| / (B * eta)
  * stale-residual:  u = d * ||G - h|| / (B * eta)

Magnitudes get a tiny positive floor so every feasible pair keeps a strictly
positive probability.

Per-processor capacity is fixed at one task per round (row sums bounded by
one). Client-specific uplink caps would replace that bound with a per-row
limit in the same saturation machinery; they are an extension point, not
implemented here.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Mapping

import numpy as np

from .topology import ProcessorRef, SystemTopology

PLAN_SUM_TOL = 1e-9
FLOOR_SCALE = 1e-8


class PlanError(ValueError):
    """Infeasible budget or violated plan invariant."""


@dataclass(frozen=True)
class MagnitudeTable:
    """Floored magnitudes per (processor, model) pair with row sums."""

    entries: Mapping[tuple[ProcessorRef, int], float]
    per_processor_sum: Mapping[ProcessorRef, float]

    @property
    def processors(self) -> tuple[ProcessorRef, ...]:
        return tuple(sorted(self.per_processor_sum))

    def row(self, ref: ProcessorRef) -> dict[int, float]:
        return {
            s: u for (r, s), u in self.entries.items() if r == ref
        }


@dataclass(frozen=True)
class SamplingPlan:
    """Probabilities p[(i,b), s] with total budget m and the V0 set used."""

    probs: Mapping[tuple[ProcessorRef, int], float]
    budget: float
    v0_set: frozenset[ProcessorRef]

    def validate(self) -> None:
        rows: dict[ProcessorRef, float] = {}
        total = 0.0
        for (ref, _s), p in self.probs.items():
            if not p > 0:
                raise PlanError(f"probability {p} not positive for {ref}")
            rows[ref] = rows.get(ref, 0.0) + p
            total += p
        for ref, rowsum in rows.items():
            if rowsum > 1 + PLAN_SUM_TOL:
                raise PlanError(f"row sum {rowsum} > 1 for {ref}")
        if abs(total - self.budget) > PLAN_SUM_TOL:
            raise PlanError(f"plan total {total} != budget {self.budget}")

    def row_sum(self, ref: ProcessorRef) -> float:
        return sum(p for (r, _s), p in self.probs.items() if r == ref)


@dataclass(frozen=True)
class Assignment:
    """Realized active sets per model; a processor joins at most one."""

    active: Mapping[int, frozenset[ProcessorRef]]
    round_index: int

    def active_pairs(self) -> list[tuple[ProcessorRef, int]]:
        pairs = [
            (ref, s) for s, refs in self.active.items() for ref in refs
        ]
        return sorted(pairs)

    def total_active(self) -> int:
        return sum(len(refs) for refs in self.active.values())


def _floor(raw: dict[tuple[ProcessorRef, int], float]) -> MagnitudeTable:
    top = max(raw.values(), default=0.0)
    eps = FLOOR_SCALE * (top if top > 0 else 1.0)
    entries = {key: max(value, eps) for key, value in raw.items()}
    sums: dict[ProcessorRef, float] = {}
    for (ref, _s), u in sorted(entries.items()):
        sums[ref] = sums.get(ref, 0.0) + u
    return MagnitudeTable(entries=entries, per_processor_sum=sums)


def _per_client_table(
    topology: SystemTopology,
    values: Mapping[tuple[int, int], float],
    scale: Mapping[int, float] | float | None,
    what: str,
) -> MagnitudeTable:
    raw: dict[tuple[ProcessorRef, int], float] = {}
    for ref in topology.processors:
        profile = topology.client(ref.client_id)
        for s in sorted(profile.available_models):
            try:
                v = values[(ref.client_id, s)]
            except KeyError:
                raise ValueError(
                    f"missing {what} for client {ref.client_id}, model {s}"
                ) from None
            if v < 0:
                raise ValueError(
                    f"negative {what} {v} for client {ref.client_id}, model {s}"
                )
            eta = 1.0
            if scale is not None:
                eta = scale[s] if isinstance(scale, Mapping) else float(scale)
                if eta <= 0:
                    raise ValueError(f"nonpositive learning rate for model {s}")
            d = topology.weight(ref.client_id, s)
            raw[(ref, s)] = d * v / (profile.num_processors * eta)
    return _floor(raw)


def lvr_magnitudes(
    topology: SystemTopology, local_losses: Mapping[tuple[int, int], float]
) -> MagnitudeTable:
    """Loss-based magnitudes d*f/B; identical for all slots of a client."""
    return _per_client_table(topology, local_losses, None, "loss")


def gvr_magnitudes(
    topology: SystemTopology,
    update_norms: Mapping[tuple[int, int], float],
    learning_rates: Mapping[int, float] | float,
) -> MagnitudeTable:
    """Gradient-based magnitudes d*||G||/(B*eta)."""
    return _per_client_table(topology, update_norms, learning_rates, "update norm")


def stalevr_magnitudes(
    topology: SystemTopology,
    residual_norms: Mapping[tuple[int, int], float],
    learning_rates: Mapping[int, float] | float,
) -> MagnitudeTable:
    """Stale-residual magnitudes d*||G - h||/(B*eta)."""
    return _per_client_table(topology, residual_norms, learning_rates, "residual norm")


def find_v0(per_processor_sums: Mapping[ProcessorRef, float], m: float) -> frozenset[ProcessorRef]:
    """Largest unsaturated set for budget m.

    Processors are ordered by ascending row sum M (ties broken by ref for
    determinism); candidates peel off from the largest-M end until
    0 < (m - V + k) <= sum(M over kept) / max(M over kept) holds.
    """
    items = sorted(per_processor_sums.items(), key=lambda kv: (kv[1], kv[0]))
    if not items:
        raise PlanError("empty processor set")
    for _ref, msum in items:
        if not msum > 0:
            raise PlanError("all row sums must be positive")
    total_v = len(items)
    prefix = np.cumsum([msum for _ref, msum in items])
    for k in range(total_v, 0, -1):
        c = m - total_v + k
        if c <= 0:
            continue
        max_m = items[k - 1][1]
        if c * max_m <= prefix[k - 1] * (1 + 1e-12):
            return frozenset(ref for ref, _ in items[:k])
    raise AssertionError(f"no feasible V0 for m={m}, V={total_v}")


def solve_plan(table: MagnitudeTable, m: float) -> SamplingPlan:
    """Closed-form optimal plan for the given magnitudes and budget.

    At m = V every processor is saturated (its row sums to exactly one) and
    the whole formula collapses to row normalization, so that boundary is
    handled explicitly.
    """
    refs = table.processors
    total_v = len(refs)
    if not 0 < m <= total_v + PLAN_SUM_TOL:
        raise PlanError(f"budget m={m} outside (0, V={total_v}]")

    probs: dict[tuple[ProcessorRef, int], float] = {}
    if m >= total_v - 1e-12:
        v0: frozenset[ProcessorRef] = frozenset()
        for (ref, s), u in sorted(table.entries.items()):
            probs[(ref, s)] = u / table.per_processor_sum[ref]
        plan = SamplingPlan(probs=probs, budget=float(total_v), v0_set=v0)
        plan.validate()
        return plan

    v0 = find_v0(table.per_processor_sum, m)
    k = len(v0)
    denom = sum(table.per_processor_sum[ref] for ref in sorted(v0))
    c = m - total_v + k
    for (ref, s), u in sorted(table.entries.items()):
        if ref in v0:
            probs[(ref, s)] = c * u / denom
        else:
            probs[(ref, s)] = u / table.per_processor_sum[ref]
    plan = SamplingPlan(probs=probs, budget=float(m), v0_set=v0)
    plan.validate()
    return plan


def random_plan(topology: SystemTopology, m: float) -> SamplingPlan:
    """Uniform plan: equal probability on every feasible pair, total m.

    Rows that would exceed probability one get capped at uniform row sum one
    and the remaining budget is spread over the rest (repeated until stable),
    so the grand total still equals m.
    """
    total_v = topology.total_processors
    if not 0 < m <= total_v + PLAN_SUM_TOL:
        raise PlanError(f"budget m={m} outside (0, V={total_v}]")

    rows = {
        ref: topology.feasible_models(ref.client_id) for ref in topology.processors
    }
    fixed: dict[ProcessorRef, float] = {}  # capped rows: per-pair probability
    remaining = float(min(m, total_v))
    while True:
        open_pairs = sum(len(models) for ref, models in rows.items() if ref not in fixed)
        if open_pairs == 0:
            break
        q = remaining / open_pairs
        newly_capped = [
            ref
            for ref, models in sorted(rows.items())
            if ref not in fixed and q * len(models) > 1.0
        ]
        if not newly_capped:
            break
        for ref in newly_capped:
            fixed[ref] = 1.0 / len(rows[ref])
            remaining -= 1.0
    probs: dict[tuple[ProcessorRef, int], float] = {}
    for ref in topology.processors:
        per_pair = fixed.get(ref, q)
        for s in rows[ref]:
            probs[(ref, s)] = per_pair
    plan = SamplingPlan(probs=probs, budget=float(m), v0_set=frozenset())
    plan.validate()
    return plan


def sample_assignment(
    plan: SamplingPlan, rng: np.random.Generator, round_index: int = 0
) -> Assignment:
    """One categorical draw per processor over (models..., idle).

    Draws are independent across processors; the marginal probability of a
    pair being active equals its plan entry exactly.
    """
    by_ref: dict[ProcessorRef, list[tuple[int, float]]] = {}
    for (ref, s), p in sorted(plan.probs.items()):
        by_ref.setdefault(ref, []).append((s, p))

    models = sorted({s for _ref, s in plan.probs})
    active: dict[int, set[ProcessorRef]] = {s: set() for s in models}
    for ref in sorted(by_ref):
        cells = by_ref[ref]
        u = rng.random()
        cum = 0.0
        for s, p in cells:
            cum += p
            if u < cum:
                active[s].add(ref)
                break
        # u >= row sum: idle this round
    return Assignment(
        active={s: frozenset(refs) for s, refs in active.items()},
        round_index=round_index,
    )


def export_plan(plan: SamplingPlan, path: str | Path) -> None:
    """Dump a plan as delimited text: client, slot, model, probability."""
    lines = ["client,slot,model,probability"]
    for (ref, s), p in sorted(plan.probs.items()):
        lines.append(f"{ref.client_id},{ref.slot},{s},{p!r}")
    Path(path).write_text("\n".join(lines) + "\n")
