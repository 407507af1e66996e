"""Acceptance suite: one test per criterion, each printing a pass/fail line.

Run with ``pytest tests/test_acceptance.py -v -s`` to see the per-criterion
lines; the desk-scale comparison (criteria 5 and 6) runs once as a module
fixture shared by both tests.
"""

import time

import numpy as np
import pytest

from mmfl.cli import main as cli_main
from mmfl.config import build_state, parse_config_dict
from mmfl.engine import (
    ExperimentState,
    Method,
    final_accuracies,
    mean_step_sizes,
    run_round,
    run_rounds,
)
from mmfl.models import ModelSpec, TrainConfig, gradient, loss
from mmfl.oracle import (
    analytic_delta_variance,
    grid_search_beta,
    grid_search_plan,
    analytic_plan_objective,
    monte_carlo_expectation,
)
from mmfl.sampling import (
    gvr_magnitudes,
    lvr_magnitudes,
    random_plan,
    solve_plan,
    stalevr_magnitudes,
)
from mmfl.staleness import beta_opt
from mmfl.synthdata import ClientDataset
from mmfl.topology import ClientProfile, build_topology

DESK_CONFIG = {
    "num_clients": 40,
    "num_models": 3,
    "dataset": {
        "num_labels": 10,
        "feature_dim": 8,
        "samples_per_label_pool": 114,
        "noise_scale": 2.2,
    },
    "train": {"local_epochs": 5, "batch_size": 128, "learning_rate": 0.06},
    "active_rate": 0.1,
    "rounds": 150,
    "eval_interval": 50,
    "seeds": [0, 1, 2, 3, 4],
}
DESK_METHODS = ("full", "stale_vr", "lvr", "gvr", "random")


def report(criterion: str, ok: bool, detail: str) -> None:
    print(f"\n{'PASS' if ok else 'FAIL'} {criterion}: {detail}")


def test_criterion_1_plan_optimality_vs_grid():
    rng = np.random.default_rng(0)
    t0 = time.time()
    worst = -np.inf
    for _ in range(100):
        v = int(rng.integers(1, 4))
        s = int(rng.integers(1, 3))
        profiles = [
            ClientProfile(
                client_id=i,
                num_processors=1,
                samples_per_model={m: int(rng.integers(5, 50)) for m in range(s)},
            )
            for i in range(v)
        ]
        topo = build_topology(profiles, s)
        values = {
            (i, m): float(rng.uniform(0.05, 10.0)) for i in range(v) for m in range(s)
        }
        table = lvr_magnitudes(topo, values)
        step = 0.005
        units = int(rng.integers(len(table.entries), int(v / step) + 1))
        m_budget = units * step
        plan = solve_plan(table, m_budget)
        achieved = analytic_plan_objective(table, plan)
        _, grid_best = grid_search_plan(table, m_budget, step)
        worst = max(worst, achieved - grid_best)
    elapsed = time.time() - t0
    ok = worst <= 1e-6 and elapsed < 60
    report(
        "criterion 1 (closed-form plan optimality)",
        ok,
        f"100 instances, worst excess over grid {worst:.2e}, {elapsed:.1f}s",
    )
    assert worst <= 1e-6
    assert elapsed < 60


def test_criterion_2_beta_optimality_vs_grid():
    rng = np.random.default_rng(1)
    worst = -np.inf
    for _ in range(100):
        g = rng.normal(size=20)
        h = rng.normal(size=20)
        closed = float(((g - beta_opt(g, h) * h) ** 2).sum())
        grid = float(((g - grid_search_beta(g, h) * h) ** 2).sum())
        worst = max(worst, closed - grid)
    ok = worst <= 1e-6
    report(
        "criterion 2 (staleness coefficient optimality)",
        ok,
        f"100 pairs in R^20, worst excess over grid {worst:.2e}",
    )
    assert ok


def frozen_instance(seed=7, dim=8):
    """Two clients with B = (1, 2): three processors, one model."""
    profiles = [
        ClientProfile(client_id=0, num_processors=1, samples_per_model={0: 30}),
        ClientProfile(client_id=1, num_processors=2, samples_per_model={0: 70}),
    ]
    topo = build_topology(profiles, 1)
    rng = np.random.default_rng(seed)
    updates = {(0, 0): rng.normal(size=dim), (1, 0): rng.normal(size=dim)}
    stale = {
        (0, 0): updates[(0, 0)] + 0.4 * rng.normal(size=dim),
        (1, 0): updates[(1, 0)] + 0.4 * rng.normal(size=dim),
    }
    plan = random_plan(topo, 1.2)
    full_step = 0.3 * updates[(0, 0)] + 0.7 * updates[(1, 0)]
    return topo, updates, stale, plan, full_step


def test_criterion_3_unbiasedness_all_rules():
    topo, updates, stale, plan, full_step = frozen_instance()
    betas_opt = {
        (c, 0): beta_opt(updates[(c, 0)], stale[(c, 0)]) for c in range(2)
    }
    rules = {
        "plain": {},
        "stale_naive(0.5)": {"stale": stale, "betas": {(0, 0): 0.5, (1, 0): 0.5}},
        "stale_naive(1.0)": {"stale": stale, "betas": {(0, 0): 1.0, (1, 0): 1.0}},
        "stale_vr(adaptive)": {"stale": stale, "betas": betas_opt},
    }
    worst = 0.0
    for label, kwargs in rules.items():
        mean, stderr, _ = monte_carlo_expectation(
            topo, plan, updates, draws=100_000, seed=11, **kwargs
        )
        ratio = float((np.abs(mean[0] - full_step) / stderr[0]).max())
        worst = max(worst, ratio)
        assert ratio <= 3.0, f"{label}: {ratio:.2f} standard errors"
    report(
        "criterion 3 (unbiasedness of all aggregation rules)",
        True,
        f"1e5 draws per rule, worst |mean - full step| = {worst:.2f} standard errors",
    )


def test_criterion_4_stale_variance_reduction():
    topo, updates, stale, plan, _ = frozen_instance()
    betas_opt = {
        (c, 0): beta_opt(updates[(c, 0)], stale[(c, 0)]) for c in range(2)
    }
    variances = {}
    for label, kwargs in (
        ("plain", {}),
        ("naive", {"stale": stale, "betas": {(0, 0): 1.0, (1, 0): 1.0}}),
        ("adaptive", {"stale": stale, "betas": betas_opt}),
    ):
        _, _, var = monte_carlo_expectation(
            topo, plan, updates, draws=100_000, seed=13, **kwargs
        )
        variances[label] = var
    residuals = {
        (c, 0): updates[(c, 0)] - betas_opt[(c, 0)] * stale[(c, 0)] for c in range(2)
    }
    analytic = analytic_delta_variance(topo, plan, residuals)
    rel_err = abs(variances["adaptive"] - analytic) / analytic
    ok = (
        variances["adaptive"] <= variances["plain"]
        and variances["adaptive"] <= variances["naive"]
        and rel_err <= 0.02
    )
    report(
        "criterion 4 (stale variance reduction)",
        ok,
        f"adaptive {variances['adaptive']:.4f} <= plain {variances['plain']:.4f}, "
        f"naive {variances['naive']:.4f}; analytic match {rel_err:.2%}",
    )
    assert ok


@pytest.fixture(scope="module")
def desk_run():
    config = parse_config_dict(DESK_CONFIG)
    t0 = time.time()
    results = {
        kind: {"finals": [], "step_var": [], "h_means": [], "pvar_mean": []}
        for kind in DESK_METHODS
    }
    for seed in config.seeds:
        for kind in DESK_METHODS:
            state = build_state(config, seed)
            history = run_rounds(state, Method(kind), config.rounds, config.eval_interval)
            accs = final_accuracies(history)
            results[kind]["finals"].append(float(np.mean(list(accs.values()))))
            totals = [
                sum(m.models[s].step_size for s in m.models)
                for m in history
                if m.models[0].step_size is not None
            ]
            results[kind]["step_var"].append(float(np.var(totals)))
            results[kind]["h_means"].append(mean_step_sizes(history))
            pvars = [
                mm.participation_variance
                for m in history
                for mm in m.models.values()
                if mm.participation_variance is not None
            ]
            results[kind]["pvar_mean"].append(float(np.mean(pvars)))
    results["elapsed"] = time.time() - t0
    results["num_models"] = config.num_models
    results["num_seeds"] = len(config.seeds)
    return results


def test_criterion_5_step_size_stability(desk_run):
    n_seeds = desk_run["num_seeds"]
    wins = sum(
        lvr < gvr
        for lvr, gvr in zip(desk_run["lvr"]["step_var"], desk_run["gvr"]["step_var"])
    )
    pooled = {}
    for kind in ("lvr", "gvr"):
        pooled[kind] = [
            float(np.mean([hm[s] for hm in desk_run[kind]["h_means"]]))
            for s in range(desk_run["num_models"])
        ]
    in_band = all(0.9 <= v <= 1.1 for kind in pooled for v in pooled[kind])
    pvar_lvr = float(np.mean(desk_run["lvr"]["pvar_mean"]))
    pvar_gvr = float(np.mean(desk_run["gvr"]["pvar_mean"]))
    ok = wins >= 4 and in_band and pvar_lvr < pvar_gvr
    report(
        "criterion 5 (loss-based plans give steadier global step size)",
        ok,
        f"variance wins {wins}/{n_seeds}; time-average participation variance "
        f"lvr {pvar_lvr:.3f} < gvr {pvar_gvr:.3f}; mean step size per model "
        f"lvr={[f'{v:.3f}' for v in pooled['lvr']]} gvr={[f'{v:.3f}' for v in pooled['gvr']]}",
    )
    assert wins >= 4
    assert in_band
    assert pvar_lvr < pvar_gvr


def test_criterion_6_method_ordering(desk_run):
    full_mean = float(np.mean(desk_run["full"]["finals"]))
    rel = {
        kind: float(np.mean(desk_run[kind]["finals"])) / full_mean
        for kind in DESK_METHODS
    }
    ordering = rel["full"] >= rel["stale_vr"] >= rel["lvr"] >= rel["random"]
    gap = rel["stale_vr"] - rel["random"]
    elapsed = desk_run["elapsed"]
    ok = ordering and gap >= 0.03 and elapsed < 600
    report(
        "criterion 6 (method ordering on relative accuracy)",
        ok,
        f"full {rel['full']:.3f} >= stale_vr {rel['stale_vr']:.3f} >= "
        f"lvr {rel['lvr']:.3f} >= random {rel['random']:.3f}; "
        f"stale_vr - random = {gap:.3f}; wall clock {elapsed:.0f}s",
    )
    assert ordering
    assert gap >= 0.03
    assert elapsed < 600


def _finite_difference(weights, features, labels, spec, step=1e-5):
    fd = np.zeros_like(weights)
    for j in range(len(weights)):
        up, down = weights.copy(), weights.copy()
        up[j] += step
        down[j] -= step
        fd[j] = (
            loss(up, features, labels, spec) - loss(down, features, labels, spec)
        ) / (2 * step)
    return fd


def test_criterion_7_gradient_correctness():
    specs = {
        "softmax": ModelSpec("softmax", feature_dim=6, num_labels=4),
        "mlp": ModelSpec("mlp", feature_dim=6, num_labels=4, hidden_dims=(5,)),
    }
    rng = np.random.default_rng(21)
    worst = 0.0
    for spec in specs.values():
        for _ in range(50):
            w = rng.normal(scale=0.5, size=spec.parameter_count)
            x = rng.normal(size=(10, spec.feature_dim))
            y = rng.integers(0, spec.num_labels, size=10)
            g = gradient(w, x, y, spec)
            fd = _finite_difference(w, x, y, spec)
            rel = np.abs(g - fd) / np.maximum(np.abs(fd), 1e-5)
            worst = max(worst, float(rel.max()))
    ok = worst < 1e-4
    report(
        "criterion 7 (gradient vs central finite differences)",
        ok,
        f"50 checks per model kind, worst per-coordinate relative error {worst:.2e}",
    )
    assert ok


def test_criterion_8_plan_constraint_fuzz():
    rng = np.random.default_rng(33)
    checked = 0
    for _ in range(1000):
        n_clients = int(rng.integers(1, 7))
        n_models = int(rng.integers(1, 4))
        profiles = []
        for cid in range(n_clients):
            counts = {
                s: int(rng.integers(1, 60)) if rng.random() < 0.8 else 0
                for s in range(n_models)
            }
            if all(v == 0 for v in counts.values()):
                counts[int(rng.integers(0, n_models))] = 1
            profiles.append(
                ClientProfile(
                    client_id=cid,
                    num_processors=int(rng.integers(1, 4)),
                    samples_per_model=counts,
                )
            )
        for s in range(n_models):
            if all(p.sample_count(s) == 0 for p in profiles):
                profiles[0] = ClientProfile(
                    client_id=0,
                    num_processors=profiles[0].num_processors,
                    samples_per_model={**profiles[0].samples_per_model, s: 1},
                )
        topo = build_topology(profiles, n_models)
        m = float(rng.uniform(0.02, 1.0)) * topo.total_processors
        pairs = {
            (cid, s): float(rng.uniform(0, 4))
            for s in range(n_models)
            for cid in topo.model_clients[s]
        }
        plans = [
            random_plan(topo, m),
            solve_plan(lvr_magnitudes(topo, pairs), m),
            solve_plan(gvr_magnitudes(topo, pairs, 0.1), m),
            solve_plan(stalevr_magnitudes(topo, pairs, 0.1), m),
        ]
        for plan in plans:
            plan.validate()  # raises on any violated invariant
            assert abs(sum(plan.probs.values()) - m) <= 1e-9
            checked += len(plans)
    report(
        "criterion 8 (plan constraint fuzz)",
        True,
        f"1000 topologies x 4 plan kinds, all invariants hold",
    )


def test_criterion_9_determinism(tmp_path):
    import yaml

    config = dict(DESK_CONFIG)
    config.update({"rounds": 5, "seeds": [3], "num_clients": 8, "method": "stale_vre"})
    path = tmp_path / "config.yaml"
    path.write_text(yaml.safe_dump(config))
    out_a, out_b = tmp_path / "a", tmp_path / "b"
    assert cli_main(["run", "--config", str(path), "--out", str(out_a)]) == 0
    assert cli_main(["run", "--config", str(path), "--out", str(out_b)]) == 0
    name = "metrics_stale_vre_seed3.csv"
    identical = (out_a / name).read_bytes() == (out_b / name).read_bytes()
    report(
        "criterion 9 (bitwise deterministic outputs)",
        identical,
        f"two runs of the same (config, seed) produced byte-identical {name}",
    )
    assert identical


def ten_processor_state(seed=5):
    """10 clients, one processor and one available model each (5 per model)."""
    profiles = [
        ClientProfile(client_id=i, num_processors=1, samples_per_model={i % 2: 20})
        for i in range(10)
    ]
    topo = build_topology(profiles, 2)
    rng = np.random.default_rng(seed)
    spec = ModelSpec("softmax", feature_dim=5, num_labels=3)
    datasets = {0: {}, 1: {}}
    for cid in range(10):
        labels = rng.integers(0, 3, size=20)
        feats = rng.normal(size=(20, 5))
        datasets[cid % 2][cid] = ClientDataset(
            features=feats, labels=labels, model_id=cid % 2
        )
    pools = {
        s: (rng.normal(size=(12, 5)), rng.integers(0, 3, size=12)) for s in range(2)
    }
    return ExperimentState(
        topology=topo,
        model_specs={s: spec for s in range(2)},
        train_cfg=TrainConfig(local_epochs=1, batch_size=20, learning_rate=0.1),
        weights={s: np.zeros(spec.parameter_count) for s in range(2)},
        datasets=datasets,
        test_pools=pools,
        budget=2.5,
        seed=seed,
    )


def test_criterion_10_cost_accounting():
    v = 10
    observed = {}
    for kind in ("lvr", "gvr", "stale_vr", "stale_vre", "full", "random"):
        state = ten_processor_state()
        metrics = run_round(state, Method(kind), np.random.default_rng(17))
        observed[kind] = metrics

    checks = [
        ("lvr uploads V loss scalars", observed["lvr"].loss_scalars_uploaded == v),
        (
            "lvr uploads |A| updates and trains only those",
            observed["lvr"].updates_uploaded == observed["lvr"].gradient_computations,
        ),
        ("gvr runs V local trainings", observed["gvr"].gradient_computations == v),
        (
            "stale_vr runs V local trainings",
            observed["stale_vr"].gradient_computations == v,
        ),
        (
            "stale_vre trains only the |A| sampled",
            observed["stale_vre"].gradient_computations
            == observed["stale_vre"].updates_uploaded,
        ),
        (
            "non-loss methods upload no loss scalars",
            all(
                observed[k].loss_scalars_uploaded == 0
                for k in ("gvr", "stale_vr", "stale_vre", "full", "random")
            ),
        ),
        ("full uploads one update per (client, model)", observed["full"].updates_uploaded == v),
        (
            "stale memory holds one slot per received update",
            observed["stale_vre"].stale_memory_slots
            == observed["stale_vre"].updates_uploaded,
        ),
    ]
    ok = all(passed for _name, passed in checks)
    report(
        "criterion 10 (cost accounting on a 10-processor instance)",
        ok,
        "; ".join(name for name, passed in checks if not passed) or "all counter shapes match",
    )
    assert ok, [name for name, passed in checks if not passed]
