"""End-to-end acceptance checks; each test prints one PASS/FAIL line."""

import json
import math
import os
import subprocess
import sys
import time
from functools import lru_cache
from pathlib import Path

import numpy as np
from conftest import criterion, model_from_q, prepared, random_q
from fleetsense.evaluation import run_ablation, sweep_fleet_sizes
from fleetsense.selection import SelectionProblem, fleet_utility, select_exact, solve
from fleetsense.utility import (
    CoverageState,
    coverage_probability,
    effective_coverage,
    effective_entropy,
    trajectory_entropy,
)
from fleetsense.visits import load_cache
from fleetsense.weights import WeightField

BOUND = 1.0 - 1.0 / math.e
N_SEEDS = 20


@lru_cache(maxsize=1)
def small_instances():
    """>= 100 instances with at most 12 vehicles and budgets 2..6 under unit cost."""
    rng = np.random.default_rng(2024)
    out = []
    for i in range(120):
        if i % 2 == 0:
            p = prepared("desk-small", (i // 2) % 10)
            n = int(rng.integers(6, p.model.n_vehicles + 1))
            rows = np.sort(rng.choice(p.model.n_vehicles, n, replace=False))
            model = p.model.subset(rows)
            w = p.weights("full").vector if i % 4 == 0 else rng.uniform(0.01, 1.0, model.n_cells)
        else:
            model = model_from_q(random_q(rng, int(rng.integers(4, 13)), 24))
            w = rng.uniform(0.01, 1.0, model.n_cells)
        out.append(SelectionProblem(model, w, float(rng.integers(2, 7)), "optifleet"))
    return out


def test_criterion_01_coverage_kernel():
    rng = np.random.default_rng(1)
    with criterion(1, "coverage kernel: direct vs incremental", 10) as notes:
        worst = 0.0
        for _ in range(1000):
            n_cells = int(rng.integers(1, 12))
            layers = random_q(rng, int(rng.integers(1, 9)), n_cells, density=0.7, ones=0.1)
            state = CoverageState.empty(n_cells)
            for i in rng.permutation(len(layers)):
                state = state.add(int(i), layers[i], np.ones(n_cells))
            worst = max(worst, float(np.max(np.abs(state.P - coverage_probability(list(layers))))))
            assert np.all(coverage_probability([], n_cells=n_cells) == 0.0)
            ones = np.flatnonzero(layers.max(axis=0) == 1.0)
            assert np.all(coverage_probability(list(layers))[ones] == 1.0)
            assert np.all(state.P[ones] == 1.0)
        assert worst <= 1e-9, worst
        notes["max_abs_diff"] = f"{worst:.1e}"


def test_criterion_02_submodular_monotone():
    rng = np.random.default_rng(2)
    with criterion(2, "monotone and submodular on desk-small", 60) as notes:
        violations = 0
        for i in range(200):
            p = prepared("desk-small", i % 20)
            V = p.model.n_vehicles
            w = rng.uniform(0.01, 1.0, p.model.n_cells) if i % 2 else p.weights("full").vector
            perm = rng.permutation(V)
            u, rest = int(perm[0]), perm[1:]
            k_big = int(rng.integers(0, V))
            k_small = int(rng.integers(0, k_big + 1))
            small, big = rest[:k_small], rest[:k_big]
            f_small = fleet_utility(p.model, small, w)
            f_big = fleet_utility(p.model, big, w)
            d_small = fleet_utility(p.model, [*small, u], w) - f_small
            d_big = fleet_utility(p.model, [*big, u], w) - f_big
            violations += d_small < -1e-9 or d_big < -1e-9 or d_small < d_big - 1e-9
        assert violations == 0
        notes["instances"] = 200


def test_criterion_03_greedy_bound():
    with criterion(3, "greedy within (1 - 1/e) of exhaustive optimum", 300) as notes:
        ratios = []
        for problem in small_instances():
            exact = select_exact(problem).final_utility
            greedy = solve(problem).final_utility
            ratios.append(1.0 if exact == 0 else greedy / exact)
        ratios = np.array(ratios)
        assert len(ratios) >= 100
        assert ratios.min() >= BOUND, ratios.min()
        assert ratios.mean() >= 0.95, ratios.mean()
        notes.update(instances=len(ratios), min_ratio=f"{ratios.min():.4f}", mean_ratio=f"{ratios.mean():.4f}")


def test_criterion_04_lazy_equivalence():
    with criterion(4, "lazy greedy identical to naive, fewer evaluations", 300) as notes:
        for problem in small_instances():
            naive, lazy = solve(problem), solve(problem, lazy=True)
            assert lazy.selected == naive.selected
            assert lazy.per_step_gain == naive.per_step_gain
        p = prepared("desk-medium", 0)
        speedups = []
        for budget in (16, 32):
            problem = SelectionProblem(p.model, p.weights("full"), budget, "optifleet")
            naive, lazy = solve(problem), solve(problem, lazy=True)
            assert lazy.selected == naive.selected
            speedups.append(naive.n_evaluations / lazy.n_evaluations)
        assert min(speedups) >= 2.0, speedups
        notes["eval_ratio_desk_medium"] = "/".join(f"{s:.1f}x" for s in speedups)


def test_criterion_05_entropy_identities():
    with criterion(5, "entropy identities", 1):
        for k in (1, 2, 4, 8, 1024):
            assert trajectory_entropy(np.full(k, 1.0 / k)) == math.log2(k)
        assert trajectory_entropy(np.eye(1, 9)[0]) == 0.0
        q = np.array([0.3, 0.9, 0.0, 1.0])
        assert effective_entropy(effective_coverage(q, np.ones(4), np.ones(4))) == 0.0
        assert np.array_equal(effective_coverage(q, CoverageState.empty(4), np.ones(4)), q)


def test_criterion_06_strategy_ordering():
    sizes = (16, 24, 32, 40)
    strategies = ("ra", "optifleet", "improved")
    with criterion(6, "Improved >= OptiFleet >= RA on desk-medium", 600) as notes:
        util = {(s, k): [] for s in strategies for k in sizes}
        for seed in range(N_SEEDS):
            p = prepared("desk-medium", seed)
            w = p.weights("full")
            for s in strategies:
                for k in sizes:
                    util[s, k].append(solve(SelectionProblem(p.model, w, k, s, rng_seed=seed)).final_utility)
        mean = {key: float(np.mean(v)) for key, v in util.items()}
        for k in sizes:
            tol = 0.005 * mean["ra", k]
            assert mean["improved", k] - mean["optifleet", k] >= -tol, k
            assert mean["optifleet", k] - mean["ra", k] >= -tol, k
        lift = mean["improved", 32] / mean["ra", 32] - 1.0
        assert lift >= 0.01, lift
        notes["improved_over_ra_at_32"] = f"{100 * lift:.1f}%"


def test_criterion_07_diminishing_returns():
    sizes = [8, 16, 32, 48, 64]
    with criterion(7, "diminishing returns and falling MAPE", 600) as notes:
        checked = 0
        instances = list(small_instances())
        for seed in range(N_SEEDS):
            p = prepared("desk-medium", seed)
            instances.append(SelectionProblem(p.model, p.weights("full"), 64, "optifleet"))
        for problem in instances:
            gains = solve(problem).per_step_gain
            assert all(b <= a for a, b in zip(gains, gains[1:]))
            checked += 1
        mape = {k: [] for k in sizes}
        for seed in range(N_SEEDS):
            p = prepared("desk-medium", seed)
            res = sweep_fleet_sizes(p.model, p.weights("full"), p.readings, sizes, ["optifleet"])
            for k in sizes:
                mape[k] += res.metric("optifleet", k, "PM2.5")
        medians = [float(np.median(mape[k])) for k in sizes]
        assert all(b <= a for a, b in zip(medians, medians[1:])), medians
        notes.update(instances=checked, median_mape="/".join(f"{m:.3f}" for m in medians))


def test_criterion_08_full_fleet_truth():
    with criterion(8, "full fleet reproduces ground truth", 60) as notes:
        n = 0
        for preset, seed in [("desk-small", 0), ("desk-small", 1), ("desk-medium", 0)]:
            p = prepared(preset, seed)
            for strategy in ("ra", "optifleet", "improved"):
                res = sweep_fleet_sizes(p.model, p.weights("full"), p.readings, [p.model.n_vehicles], [strategy])
                assert {r.pollutant for r in res.reports} == set(p.readings)
                for r in res.reports:
                    assert (r.rmse, r.mape, r.coverage_ratio) == (0.0, 0.0, 1.0)
                    n += 1
        notes["reports"] = n


def test_criterion_09_ablation_trend():
    with criterion(9, "temporal_only beats spatial_only at size 32", 900) as notes:
        for seed in range(3):
            p = prepared("desk-medium", seed)
            ab = run_ablation(p, variants=("uniform",), sizes=(16, 32), strategies=("optifleet", "improved"))
            plain = sweep_fleet_sizes(p.model, WeightField.uniform(p.grid.n_cells, p.grid.n_intervals),
                                      p.readings, (16, 32), ("optifleet", "improved"))
            assert [r.to_dict() for r in ab.sweeps["uniform"].reports] == [r.to_dict() for r in plain.reports]
        per_variant = {"spatial_only": [], "temporal_only": []}
        for seed in range(N_SEEDS):
            p = prepared("desk-medium", seed)
            ab = run_ablation(p, variants=tuple(per_variant), sizes=(32,), strategies=("improved",))
            for v in per_variant:
                per_variant[v] += ab.sweeps[v].metric("improved", 32, "PM2.5")
        spatial = float(np.median(per_variant["spatial_only"]))
        temporal = float(np.median(per_variant["temporal_only"]))
        notes.update(median_mape_temporal=f"{temporal:.4f}", median_mape_spatial=f"{spatial:.4f}")
        assert temporal < spatial, f"median MAPE temporal_only {temporal:.4f} >= spatial_only {spatial:.4f}"


CLI = [sys.executable, "-m", "fleetsense.cli"]


def _run_measured(args, cwd):
    """Run the CLI in a child and report (seconds, peak RSS MB)."""
    t0 = time.perf_counter()
    proc = subprocess.Popen([*CLI, *args], cwd=cwd, stdout=subprocess.DEVNULL, stderr=subprocess.PIPE)
    _, status, usage = os.wait4(proc.pid, 0)
    err = proc.stderr.read().decode()
    proc.stderr.close()
    assert os.waitstatus_to_exitcode(status) == 0, err
    return time.perf_counter() - t0, usage.ru_maxrss / 1024


def test_criterion_10_scale(tmp_path):
    subprocess.run([*CLI, "generate", "--preset", "guangzhou-shape", "-o", "scn"], cwd=tmp_path,
                   check=True, capture_output=True)
    with criterion(10, "guangzhou-shape ingest + OptiFleet budget 200") as notes:
        t_ing, mem_ing = _run_measured(["ingest", "scn/trajectories.csv", "scn/grid.cfg", "-o", "ing"], tmp_path)
        t_sel, mem_sel = _run_measured(["select", "--cache", "ing/cache.npz", "--strategy", "optifleet",
                                        "--budget", "200", "-o", "sel"], tmp_path)
        sel = json.loads((tmp_path / "sel/selection.json").read_text())
        model = load_cache(tmp_path / "ing/cache.npz").visit_model()
        assert model.grid.n_domain_cells == 3811 and model.n_vehicles == 320
        assert (model.grid.n_intervals, model.grid.n_days) == (24, 61)
        assert len(sel["picks"]) == 200
        assert t_ing + t_sel < 600, t_ing + t_sel
        assert max(mem_ing, mem_sel) < 8 * 1024
        notes.update(seconds=f"{t_ing + t_sel:.1f}", peak_mb=f"{max(mem_ing, mem_sel):.0f}")


def _data_bytes(directory: Path) -> dict[str, bytes]:
    out = {}
    for p in sorted(directory.rglob("*")):
        if p.is_file() and p.name != "manifest.json":
            lines = p.read_bytes().splitlines(keepends=True)
            out[str(p.relative_to(directory))] = b"".join(l for l in lines if b'"wall_time"' not in l)
    return out


def test_criterion_11_determinism(tmp_path):
    steps = [
        ["generate", "--preset", "desk-small", "--seed", "9", "-o", "{d}/scn"],
        ["ingest", "{d}/scn/trajectories.csv", "{d}/scn/grid.cfg", "-o", "{d}/ing"],
        ["build-weights", "--cache", "{d}/ing/cache.npz", "--static", "{d}/scn/static_features.csv",
         "--dynamic", "{d}/scn/dynamic_features.csv", "-o", "{d}/w"],
        *[["select", "--cache", "{d}/ing/cache.npz", "--weights", "{d}/w/weights.csv", "--strategy", s,
           "--budget", "5", "--seed", "3", "-o", "{d}/sel_" + s] for s in ("ra", "tsub", "optifleet", "improved", "exact")],
        ["evaluate", "--cache", "{d}/ing/cache.npz", "--selection", "{d}/sel_improved/selection.json",
         "-o", "{d}/ev"],
        ["sweep", "--cache", "{d}/ing/cache.npz", "--weights", "{d}/w/weights.csv", "--sizes", "2..6",
         "--seeds", "4", "-o", "{d}/sw"],
        ["ablation", "--cache", "{d}/ing/cache.npz", "--static", "{d}/scn/static_features.csv",
         "--dynamic", "{d}/scn/dynamic_features.csv", "--sizes", "3,6", "-o", "{d}/ab"],
    ]
    with criterion(11, "identical manifests give byte-identical outputs") as notes:
        for name in ("a", "b"):
            d = tmp_path / name
            for step in steps:
                argv = [arg.format(d=d) for arg in step]
                proc = subprocess.run([*CLI, *argv], capture_output=True, text=True)
                assert proc.returncode == 0, proc.stderr
        # intermediate inputs live in separate trees, so compare each run's outputs
        a, b = _data_bytes(tmp_path / "a"), _data_bytes(tmp_path / "b")
        assert a.keys() == b.keys() and a == b
        # replaying each manifest of run a reproduces its outputs
        replayed = 0
        for manifest in sorted((tmp_path / "a").glob("*/manifest.json")):
            target = tmp_path / "replay" / manifest.parent.name
            proc = subprocess.run([*CLI, "rerun", str(manifest), "-o", str(target)], capture_output=True, text=True)
            assert proc.returncode == 0, proc.stderr
            assert _data_bytes(manifest.parent) == _data_bytes(target), manifest.parent.name
            replayed += 1
        notes.update(files=len(a), manifests_replayed=replayed)
