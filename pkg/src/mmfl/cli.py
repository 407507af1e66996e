"""Command-line driver: run, compare, verify, gen-data."""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import oracle, sampling, staleness
from .config import ConfigError, RunConfig, build_state, parse_config
from .engine import (
    Method,
    final_accuracies,
    format_metric_rows,
    mean_step_sizes,
    run_rounds,
)
from .models import DivergenceError
from .synthdata import export_dataset
from .topology import ClientProfile, build_topology


def _run_one(config: RunConfig, method: Method, seed: int, out_dir: Path) -> dict[int, float]:
    """Run one (method, seed), write its metrics file, return final accuracy."""
    state = build_state(config, seed)
    history = run_rounds(state, method, config.rounds, config.eval_interval)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / f"metrics_{method.label}_seed{seed}.csv"
    path.write_text(format_metric_rows(history))
    return final_accuracies(history)


def cmd_run(config: RunConfig, out_dir: Path) -> int:
    method = config.method_obj()
    per_seed: dict[int, dict[int, float]] = {}
    for seed in config.seeds:
        per_seed[seed] = _run_one(config, method, seed, out_dir)
        mean_acc = float(np.mean(list(per_seed[seed].values())))
        print(f"seed {seed}: final mean accuracy {mean_acc:.4f}")
    finals = [np.mean(list(accs.values())) for accs in per_seed.values()]
    summary = [
        f"method: {method.label}",
        f"seeds: {list(config.seeds)}",
        f"final accuracy mean: {float(np.mean(finals))!r}",
        f"final accuracy std: {float(np.std(finals))!r}",
    ]
    (out_dir / f"summary_{method.label}.txt").write_text("\n".join(summary) + "\n")
    print("\n".join(summary))
    return 0


def cmd_compare(config: RunConfig, methods: list[str], out_dir: Path) -> int:
    """Run several methods on identical seeds and data; tabulate accuracy
    relative to full participation when it is part of the comparison."""
    results: dict[str, list[float]] = {}
    step_means: dict[str, dict[int, float]] = {}
    for kind in methods:
        method = config.method_obj(kind)
        finals = []
        for seed in config.seeds:
            accs = _run_one(config, method, seed, out_dir)
            finals.append(float(np.mean(list(accs.values()))))
        results[kind] = finals
        print(f"{kind}: mean final accuracy {float(np.mean(finals)):.4f}")

    lines = ["method,final_accuracy_mean,final_accuracy_std,relative_accuracy"]
    base = float(np.mean(results["full"])) if "full" in results else None
    for kind in methods:
        mean = float(np.mean(results[kind]))
        std = float(np.std(results[kind]))
        rel = "" if base in (None, 0.0) else repr(mean / base)
        lines.append(f"{kind},{mean!r},{std!r},{rel}")
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "compare.csv").write_text("\n".join(lines) + "\n")
    print("\n".join(lines))
    return 0


def _verify_plan_optimality(seed: int) -> bool:
    """Closed-form plans never lose to exhaustive lattice search."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for trial in range(100):
        v = int(rng.integers(1, 4))
        s = int(rng.integers(1, 3))
        profiles = [
            ClientProfile(client_id=i, num_processors=1, samples_per_model={m: 10 for m in range(s)})
            for i in range(v)
        ]
        topo = build_topology(profiles, s)
        values = {
            (i, m): float(rng.uniform(0.05, 10.0)) for i in range(v) for m in range(s)
        }
        table = sampling.lvr_magnitudes(topo, values)
        n_pairs = len(table.entries)
        step = 0.005
        units = rng.integers(n_pairs, int(v / step) + 1)
        m_budget = float(units * step)
        plan = sampling.solve_plan(table, m_budget)
        achieved = oracle.analytic_plan_objective(table, plan)
        _, grid_best = oracle.grid_search_plan(table, m_budget, step)
        worst = max(worst, achieved - grid_best)
        if achieved > grid_best + 1e-6:
            print(f"  FAIL trial {trial}: closed form {achieved} > grid {grid_best}")
            return False
    print(f"  plan optimality: 100 instances, worst closed-form excess {worst:.2e}")
    return True


def _verify_beta(seed: int) -> bool:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for trial in range(100):
        g = rng.normal(size=20)
        h = rng.normal(size=20)
        best = staleness.beta_opt(g, h)
        grid = oracle.grid_search_beta(g, h)
        closed = float(((g - best * h) ** 2).sum())
        gridded = float(((g - grid * h) ** 2).sum())
        worst = max(worst, closed - gridded)
        if closed > gridded + 1e-6:
            print(f"  FAIL trial {trial}: beta {closed} > grid {gridded}")
            return False
    print(f"  beta optimality: 100 pairs, worst closed-form excess {worst:.2e}")
    return True


def _frozen_instance(seed: int):
    profiles = [
        ClientProfile(client_id=0, num_processors=1, samples_per_model={0: 30}),
        ClientProfile(client_id=1, num_processors=2, samples_per_model={0: 70}),
    ]
    topo = build_topology(profiles, 1)
    rng = np.random.default_rng(seed)
    updates = {(0, 0): rng.normal(size=8), (1, 0): rng.normal(size=8)}
    stale = {(0, 0): rng.normal(size=8), (1, 0): rng.normal(size=8)}
    plan = sampling.random_plan(topo, 1.2)
    return topo, updates, stale, plan


def _verify_unbiasedness(seed: int) -> bool:
    topo, updates, stale, plan = _frozen_instance(seed)
    target = np.concatenate(
        [sum(topo.weight(c, 0) * updates[(c, 0)] for c in range(2))]
    )
    ok = True
    for label, kwargs in (
        ("plain", {}),
        ("stale beta=1", {"stale": stale, "betas": {(0, 0): 1.0, (1, 0): 1.0}}),
        ("stale beta=0.5", {"stale": stale, "betas": {(0, 0): 0.5, (1, 0): 0.5}}),
    ):
        mean, stderr, _ = oracle.monte_carlo_expectation(
            topo, plan, updates, draws=100_000, seed=seed + 1, **kwargs
        )
        gap = np.abs(mean[0] - target)
        if not np.all(gap <= 3 * stderr[0] + 1e-12):
            print(f"  FAIL {label}: |mean - full step| exceeds 3 standard errors")
            ok = False
        else:
            print(f"  unbiasedness {label}: max |gap|/se = {float((gap / stderr[0]).max()):.2f}")
    return ok


def _verify_variance(seed: int) -> bool:
    topo, updates, stale, plan = _frozen_instance(seed)
    betas_opt = {
        (c, 0): staleness.beta_opt(updates[(c, 0)], stale[(c, 0)]) for c in range(2)
    }
    variances = {}
    for label, kwargs in (
        ("plain", {}),
        ("naive beta=1", {"stale": stale, "betas": {(0, 0): 1.0, (1, 0): 1.0}}),
        ("optimal beta", {"stale": stale, "betas": betas_opt}),
    ):
        _, _, var = oracle.monte_carlo_expectation(
            topo, plan, updates, draws=100_000, seed=seed + 2, **kwargs
        )
        variances[label] = var
    residuals = {
        (c, 0): updates[(c, 0)] - betas_opt[(c, 0)] * stale[(c, 0)] for c in range(2)
    }
    analytic = oracle.analytic_delta_variance(topo, plan, residuals)
    print(
        f"  delta variance: plain {variances['plain']:.4f}, naive {variances['naive beta=1']:.4f}, "
        f"optimal {variances['optimal beta']:.4f} (analytic {analytic:.4f})"
    )
    ok = variances["optimal beta"] <= variances["plain"] + 1e-9
    ok &= variances["optimal beta"] <= variances["naive beta=1"] + 1e-9
    ok &= abs(variances["optimal beta"] - analytic) <= 0.02 * analytic
    if not ok:
        print("  FAIL: variance ordering or analytic match violated")
    return ok


VERIFICATIONS = {
    "plan": _verify_plan_optimality,
    "beta": _verify_beta,
    "unbiased": _verify_unbiasedness,
    "variance": _verify_variance,
}


def cmd_verify(which: str, seed: int) -> int:
    names = list(VERIFICATIONS) if which == "all" else [which]
    failed = []
    for name in names:
        print(f"verify {name}:")
        if not VERIFICATIONS[name](seed):
            failed.append(name)
    if failed:
        print(f"FAILED: {failed}")
        return 1
    print("all verifications passed")
    return 0


def cmd_gen_data(config: RunConfig, out_dir: Path, seed: int) -> int:
    state = build_state(config, seed)
    out_dir.mkdir(parents=True, exist_ok=True)
    for s in range(config.num_models):
        for cid, ds in sorted(state.datasets[s].items()):
            export_dataset(ds, out_dir / f"data_model{s}_client{cid}.csv")
    print(f"wrote datasets for {config.num_models} models to {out_dir}")
    return 0


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(
        prog="mmfl",
        description="Multi-model federated learning simulator with optimized processor sampling.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run one method over the configured seeds")
    p_run.add_argument("--config", required=True)
    p_run.add_argument("--method", default=None, help="override the configured method")
    p_run.add_argument("--seeds", default=None, help="comma-separated seed override")
    p_run.add_argument("--rounds", type=int, default=None)
    p_run.add_argument("--out", default=None, help="output directory override")

    p_cmp = sub.add_parser("compare", help="run several methods on identical seeds")
    p_cmp.add_argument("--config", required=True)
    p_cmp.add_argument("--methods", required=True, help="comma-separated method list")
    p_cmp.add_argument("--seeds", default=None)
    p_cmp.add_argument("--rounds", type=int, default=None)
    p_cmp.add_argument("--out", default=None)

    p_ver = sub.add_parser("verify", help="run the brute-force verification suites")
    p_ver.add_argument("--which", default="all", choices=["all", *VERIFICATIONS])
    p_ver.add_argument("--seed", type=int, default=0)

    p_gen = sub.add_parser("gen-data", help="export the synthetic datasets")
    p_gen.add_argument("--config", required=True)
    p_gen.add_argument("--seed", type=int, default=None)
    p_gen.add_argument("--out", default=None)

    args = parser.parse_args(argv)

    if args.command == "verify":
        return cmd_verify(args.which, args.seed)

    try:
        config = parse_config(args.config)
    except ConfigError as exc:
        print(exc, file=sys.stderr)
        return 2
    overrides = {}
    if getattr(args, "seeds", None):
        overrides["seeds"] = tuple(int(s) for s in args.seeds.split(","))
    if getattr(args, "rounds", None) is not None:
        overrides["rounds"] = args.rounds
    if getattr(args, "method", None):
        overrides["method"] = args.method
    if overrides:
        from dataclasses import replace

        config = replace(config, **overrides)
    out_dir = Path(args.out) if args.out else Path(config.output_dir)

    try:
        if args.command == "run":
            return cmd_run(config, out_dir)
        if args.command == "compare":
            methods = [m.strip() for m in args.methods.split(",") if m.strip()]
            return cmd_compare(config, methods, out_dir)
        if args.command == "gen-data":
            seed = args.seed if args.seed is not None else config.seeds[0]
            return cmd_gen_data(config, out_dir, seed)
    except DivergenceError as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return 1
    raise AssertionError(args.command)


if __name__ == "__main__":
    sys.exit(main())
