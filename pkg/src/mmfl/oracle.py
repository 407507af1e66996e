"""Independent brute-force verifiers for the closed-form results.

None of these reuse the solver code they check: the plan search enumerates
the probability lattice directly, the beta search scans a grid, and the
Monte-Carlo estimator re-derives aggregation sums from first principles.
"""

from __future__ import annotations

from typing import Mapping

import numpy as np

from .sampling import MagnitudeTable, SamplingPlan
from .topology import ProcessorRef, SystemTopology

GRID_GUARD_PAIRS = 6


def analytic_plan_objective(table: MagnitudeTable, plan: SamplingPlan) -> float:
    """Exact sampling variance of the plan: sum over pairs of (1/p - 1) u^2.

    Valid because processor draws are independent within each model, so all
    cross-terms cancel; itself cross-checked against Monte-Carlo variance.
    """
    total = 0.0
    for key, u in sorted(table.entries.items()):
        p = plan.probs[key]
        total += (1.0 / p - 1.0) * u * u
    return total


def analytic_delta_variance(
    topology: SystemTopology,
    plan: SamplingPlan,
    residuals: Mapping[tuple[int, int], np.ndarray],
) -> float:
    """Total variance of the aggregated step: sum (1-p)/p ||d r / B||^2.

    ``residuals`` holds, per (client, model), whatever vector the sampled
    term carries (G for plain aggregation, G - beta*h for stale rules).
    """
    total = 0.0
    for (ref, s), p in sorted(plan.probs.items()):
        d = topology.weight(ref.client_id, s)
        b = topology.client(ref.client_id).num_processors
        r = residuals[(ref.client_id, s)]
        total += (1.0 - p) / p * float(r @ r) * (d / b) ** 2
    return total


def _row_split_costs(mags: np.ndarray, row_units: int, unit: float) -> np.ndarray:
    """cost[r] = min objective of one processor row holding r lattice units.

    Exhaustive over lattice splits of r units across the row's cells, each
    cell getting at least one unit and at most ``row_units`` (probability 1).
    Index 0 is unused padding (a row always holds >= 1 unit per cell).
    """
    r_max = row_units
    inf = np.inf
    # cost of a single cell holding x units, x = 0..r_max (0 -> inf)
    x = np.arange(r_max + 1, dtype=float)
    with np.errstate(divide="ignore"):
        cell = [
            np.where(x > 0, u * u * (1.0 / (x * unit) - 1.0), inf) for u in mags
        ]
    best = cell[0]
    for nxt in cell[1:]:
        merged = np.full(r_max + 1, inf)
        for total in range(r_max + 1):
            lo = max(1, total - r_max)
            if lo > total - 1:
                continue
            parts = best[lo:total] + nxt[total - lo : 0 : -1]
            merged[total] = parts.min() if len(parts) else inf
        best = merged
    return best


def _row_split_argmin(
    mags: np.ndarray, row_units: int, units: int, unit: float
) -> list[int]:
    """Recover one lattice split achieving _row_split_costs(...)[units]."""
    if len(mags) == 1:
        return [units]
    head = _row_split_costs(mags[:-1], row_units, unit)
    last = mags[-1]
    best_x, best_cost = None, np.inf
    for x in range(1, min(row_units, units - (len(mags) - 1)) + 1):
        rest = units - x
        if rest < len(mags) - 1 or rest > row_units:
            continue
        cost = head[rest] + last * last * (1.0 / (x * unit) - 1.0)
        if cost < best_cost - 1e-15:
            best_cost, best_x = cost, x
    assert best_x is not None
    return _row_split_argmin(mags[:-1], row_units, units - best_x, unit) + [best_x]


def grid_search_plan(
    table: MagnitudeTable, m: float, step: float = 0.005
) -> tuple[SamplingPlan, float]:
    """Exhaustive lattice minimizer of the plan objective.

    Enumerates every probability assignment on the ``step`` lattice with
    p >= step per pair, row sums <= 1, and grand total m (snapped to the
    lattice). The equality constraint is eliminated dimension by dimension:
    per-row split costs are tabulated exhaustively, then rows are combined
    with an exact min-plus sweep, which visits the same lattice minimum as a
    flat enumeration would. Guarded to at most 6 (processor, model) pairs.
    """
    refs = table.processors
    n_pairs = len(table.entries)
    if n_pairs > GRID_GUARD_PAIRS:
        raise ValueError(f"grid search limited to {GRID_GUARD_PAIRS} pairs, got {n_pairs}")

    row_units = int(round(1.0 / step))
    total_units = int(round(m / step))
    if total_units < 1:
        raise ValueError(f"budget m={m} below one lattice step")

    rows = []
    for ref in refs:
        row = table.row(ref)
        models = sorted(row)
        rows.append((ref, models, np.array([row[s] for s in models])))

    # cost tables per row, then exact min-plus combination over rows
    tables = [
        _row_split_costs(mags, row_units, step) for _ref, _models, mags in rows
    ]
    combined = tables[0]
    choices: list[np.ndarray] = []
    for t in tables[1:]:
        size = min(len(combined) + row_units, total_units + 1)
        merged = np.full(size, np.inf)
        pick = np.zeros(size, dtype=int)
        for total in range(size):
            lo = max(1, total - len(combined) + 1)
            hi = min(row_units, total - 1)
            if lo > hi:
                continue
            opts = t[lo : hi + 1] + combined[total - lo : total - hi - 1 : -1]
            j = int(np.argmin(opts))
            merged[total] = opts[j]
            pick[total] = lo + j
        choices.append(pick)
        combined = merged

    if total_units >= len(combined) or not np.isfinite(combined[total_units]):
        raise ValueError(
            f"no lattice point satisfies the constraints for m={m}, step={step}"
        )
    best_objective = float(combined[total_units])

    # Backtrack the per-row unit allocation, then the within-row splits.
    row_alloc = [0] * len(rows)
    remaining = total_units
    for idx in range(len(rows) - 1, 0, -1):
        x = int(choices[idx - 1][remaining])
        row_alloc[idx] = x
        remaining -= x
    row_alloc[0] = remaining

    probs: dict[tuple[ProcessorRef, int], float] = {}
    for (ref, models, mags), units in zip(rows, row_alloc):
        split = _row_split_argmin(mags, row_units, units, step)
        for s, x in zip(models, split):
            probs[(ref, s)] = x * step
    plan = SamplingPlan(probs=probs, budget=total_units * step, v0_set=frozenset())
    return plan, best_objective


def grid_search_beta(
    fresh: np.ndarray,
    stale: np.ndarray,
    lo: float = -3.0,
    hi: float = 3.0,
    step: float = 1e-3,
) -> float:
    """Grid argmin of ||fresh - beta * stale||^2 (first grid point on ties)."""
    grid = np.arange(lo, hi + step / 2, step)
    errors = ((fresh[None, :] - grid[:, None] * stale[None, :]) ** 2).sum(axis=1)
    return float(grid[int(np.argmin(errors))])


def monte_carlo_expectation(
    topology: SystemTopology,
    plan: SamplingPlan,
    updates: Mapping[tuple[int, int], np.ndarray],
    draws: int,
    seed: int,
    *,
    stale: Mapping[tuple[int, int], np.ndarray] | None = None,
    betas: Mapping[tuple[int, int], float] | None = None,
) -> tuple[dict[int, np.ndarray], dict[int, np.ndarray], float]:
    """Sample mean and spread of the aggregation step over assignment draws.

    Re-derives the step directly from the update rule on frozen updates:
    without ``stale`` the step is the inverse-probability-weighted sum of
    sampled updates; with ``stale`` and ``betas`` each sampled term swaps in
    the residual G - beta*h and every known stale update contributes the
    deterministic d * beta * h term. Returns (mean per model, per-coordinate
    standard error per model, total variance across all models).
    """
    rng = np.random.default_rng(seed)
    models = sorted({s for (_ref, s) in plan.probs})
    dim = len(next(iter(updates.values())))

    mean: dict[int, np.ndarray] = {}
    stderr: dict[int, np.ndarray] = {}
    total_variance = 0.0

    # group plan rows per processor for categorical draws
    by_ref: dict[ProcessorRef, list[tuple[int, float]]] = {}
    for (ref, s), p in sorted(plan.probs.items()):
        by_ref.setdefault(ref, []).append((s, p))
    refs = sorted(by_ref)
    edges = []
    for ref in refs:
        ps = [p for _s, p in by_ref[ref]]
        edges.append(np.cumsum(ps))
    u = rng.random((draws, len(refs)))

    per_model_samples = {s: np.zeros((draws, dim)) for s in models}
    for j, ref in enumerate(refs):
        cells = by_ref[ref]
        cum = edges[j]
        slot = np.searchsorted(cum, u[:, j], side="right")  # == len(cells) -> idle
        for idx, (s, p) in enumerate(cells):
            hit = slot == idx
            if not hit.any():
                continue
            d = topology.weight(ref.client_id, s)
            b = topology.client(ref.client_id).num_processors
            g = updates[(ref.client_id, s)]
            if stale is not None:
                beta = betas.get((ref.client_id, s), 0.0) if betas else 0.0
                h = stale.get((ref.client_id, s))
                term = g - beta * h if h is not None else g
            else:
                term = g
            per_model_samples[s][hit] += (d / (b * p)) * term

    for s in models:
        if stale is not None:
            fixed = np.zeros(dim)
            for cid in sorted(topology.model_clients[s]):
                h = stale.get((cid, s))
                if h is None:
                    continue
                beta = betas.get((cid, s), 0.0) if betas else 0.0
                fixed += topology.weight(cid, s) * beta * h
            per_model_samples[s] += fixed
        samples = per_model_samples[s]
        mean[s] = samples.mean(axis=0)
        stderr[s] = samples.std(axis=0, ddof=1) / np.sqrt(draws)
        total_variance += float(samples.var(axis=0, ddof=1).sum())

    return mean, stderr, total_variance
