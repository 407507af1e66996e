import numpy as np
import pytest

from mmfl.oracle import (
    analytic_delta_variance,
    analytic_plan_objective,
    grid_search_beta,
    grid_search_plan,
    monte_carlo_expectation,
)
from mmfl.sampling import SamplingPlan, lvr_magnitudes, random_plan, solve_plan
from mmfl.topology import ClientProfile, ProcessorRef, build_topology


def topo_of(counts, processors=None, models=1):
    processors = processors or [1] * len(counts)
    profiles = [
        ClientProfile(
            client_id=i,
            num_processors=b,
            samples_per_model={s: n for s in range(models)},
        )
        for i, (n, b) in enumerate(zip(counts, processors))
    ]
    return build_topology(profiles, models)


def test_objective_zero_at_full_participation():
    topo = topo_of([10, 10])
    table = lvr_magnitudes(topo, {(0, 0): 1.0, (1, 0): 3.0})
    plan = solve_plan(table, 2.0)
    assert analytic_plan_objective(table, plan) == pytest.approx(0.0, abs=1e-15)


def test_objective_single_pair_half_probability():
    topo = topo_of([10])
    table = lvr_magnitudes(topo, {(0, 0): 1.0})  # magnitude 1.0
    plan = SamplingPlan(
        probs={(ProcessorRef(0, 0), 0): 0.5}, budget=0.5, v0_set=frozenset()
    )
    assert analytic_plan_objective(table, plan) == pytest.approx(1.0)


def test_objective_matches_monte_carlo_variance():
    # variance of the surrogate sum over 1e6 draws on a 3-pair instance
    topo = topo_of([20, 30, 50])
    losses = {(0, 0): 1.2, (1, 0): 0.7, (2, 0): 2.0}
    table = lvr_magnitudes(topo, losses)
    plan = solve_plan(table, 1.1)

    rng = np.random.default_rng(5)
    draws = 1_000_000
    samples = np.zeros(draws)
    expected = 0.0
    for (ref, s), p in sorted(plan.probs.items()):
        u = table.entries[(ref, s)]
        active = rng.random(draws) < p
        samples += np.where(active, u / p, 0.0)
        expected += u
    mc_var = samples.var(ddof=1)
    assert mc_var == pytest.approx(analytic_plan_objective(table, plan), rel=0.01)
    assert samples.mean() == pytest.approx(expected, rel=0.01)


def test_grid_symmetric_pair_splits_evenly():
    topo = topo_of([10, 10])
    table = lvr_magnitudes(topo, {(0, 0): 1.0, (1, 0): 1.0})
    plan, best = grid_search_plan(table, 1.0)
    assert plan.probs[(ProcessorRef(0, 0), 0)] == pytest.approx(0.5)
    assert plan.probs[(ProcessorRef(1, 0), 0)] == pytest.approx(0.5)


def test_grid_full_budget_zero_objective():
    topo = topo_of([10, 10])
    table = lvr_magnitudes(topo, {(0, 0): 1.0, (1, 0): 2.0})
    _, best = grid_search_plan(table, 2.0)
    assert best == pytest.approx(0.0, abs=1e-12)


def test_grid_guard_rejects_large_instances():
    topo = topo_of([10, 10, 10, 10], models=2)
    table = lvr_magnitudes(
        topo, {(i, s): 1.0 for i in range(4) for s in range(2)}
    )
    with pytest.raises(ValueError, match="limited"):
        grid_search_plan(table, 2.0)


def test_grid_respects_row_caps():
    topo = topo_of([10, 10], models=2)
    table = lvr_magnitudes(topo, {(i, s): 1.0 for i in range(2) for s in range(2)})
    plan, _ = grid_search_plan(table, 2.0)
    plan.validate()
    for ref in topo.processors:
        assert plan.row_sum(ref) <= 1 + 1e-9


def test_grid_infeasible_budget_raises():
    topo = topo_of([10])
    table = lvr_magnitudes(topo, {(0, 0): 1.0})
    with pytest.raises(ValueError):
        grid_search_plan(table, 0.001)


def test_grid_beta_trivials():
    h = np.array([1.0, 2.0])
    assert grid_search_beta(2 * h, h) == pytest.approx(2.0, abs=1e-3)
    assert grid_search_beta(np.array([2.0, -1.0]), h) == pytest.approx(0.0, abs=1e-3)


def test_monte_carlo_full_plan_zero_variance():
    topo = topo_of([10, 10])
    table = lvr_magnitudes(topo, {(0, 0): 1.0, (1, 0): 1.0})
    plan = solve_plan(table, 2.0)
    rng = np.random.default_rng(0)
    updates = {(0, 0): rng.normal(size=4), (1, 0): rng.normal(size=4)}
    mean, _, var = monte_carlo_expectation(topo, plan, updates, draws=2000, seed=1)
    assert var == pytest.approx(0.0, abs=1e-20)
    target = 0.5 * updates[(0, 0)] + 0.5 * updates[(1, 0)]
    assert np.allclose(mean[0], target)


def test_monte_carlo_unbiased_with_slots():
    # client 1 has two processors sharing one update vector
    topo = topo_of([30, 70], processors=[1, 2])
    plan = random_plan(topo, 1.2)
    rng = np.random.default_rng(2)
    updates = {(0, 0): rng.normal(size=6), (1, 0): rng.normal(size=6)}
    mean, stderr, _ = monte_carlo_expectation(topo, plan, updates, draws=60_000, seed=3)
    target = 0.3 * updates[(0, 0)] + 0.7 * updates[(1, 0)]
    assert np.all(np.abs(mean[0] - target) <= 3 * stderr[0] + 1e-12)


def test_monte_carlo_stale_unbiased_any_beta():
    topo = topo_of([40, 60])
    plan = random_plan(topo, 0.9)
    rng = np.random.default_rng(4)
    updates = {(0, 0): rng.normal(size=5), (1, 0): rng.normal(size=5)}
    stale = {(0, 0): rng.normal(size=5), (1, 0): rng.normal(size=5)}
    target = 0.4 * updates[(0, 0)] + 0.6 * updates[(1, 0)]
    for beta in (0.0, 0.5, 1.0):
        betas = {(0, 0): beta, (1, 0): beta}
        mean, stderr, _ = monte_carlo_expectation(
            topo, plan, updates, draws=80_000, seed=6, stale=stale, betas=betas
        )
        assert np.all(np.abs(mean[0] - target) <= 3.5 * stderr[0] + 1e-12)


def test_analytic_delta_variance_matches_monte_carlo():
    topo = topo_of([25, 75])
    plan = random_plan(topo, 1.0)
    rng = np.random.default_rng(7)
    updates = {(0, 0): rng.normal(size=5), (1, 0): rng.normal(size=5)}
    _, _, mc_var = monte_carlo_expectation(topo, plan, updates, draws=400_000, seed=8)
    analytic = analytic_delta_variance(topo, plan, updates)
    assert mc_var == pytest.approx(analytic, rel=0.02)
