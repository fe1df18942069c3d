"""Estimation error of a selected fleet against full-fleet ground truth.

Cell estimates are plain means of the selected vehicles' readings. Cells the selection
never observes are excluded from RMSE/MAPE and reported through ``coverage_ratio``.
"""

from __future__ import annotations

import csv
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from .grid import ReadingAggregate
from .selection import STRATEGY_LABELS, FleetSelection, SelectionProblem, solve
from .visits import VisitModel

logger = logging.getLogger(__name__)


def estimate_field(selection, readings: ReadingAggregate) -> np.ndarray:
    """Mean concentration per flat cell for the selected vehicles; NaN where unobserved.

    ``selection`` is a :class:`FleetSelection` or an iterable of vehicle ids.
    """
    ids = selection.selected if isinstance(selection, FleetSelection) else list(selection)
    if not ids:
        return np.full(readings.n_cells, np.nan)
    return readings.cell_mean(readings.vehicle_indices(ids))


def truth_field(readings: ReadingAggregate) -> np.ndarray:
    # same aggregation path as estimate_field over the whole fleet
    return readings.cell_mean(np.arange(len(readings.vehicle_ids)))


@dataclass
class Scores:
    rmse: float | None
    mape: float | None
    coverage_ratio: float
    n_joint: int
    n_truth: int
    n_zero_truth: int
    per_cell_ape: dict[int, float] = field(default_factory=dict)

    @property
    def defined(self) -> bool:
        return self.rmse is not None


def score(selected_field, truth, pooled: bool = False, truth_counts=None) -> Scores:
    """RMSE, MAPE (percent) and coverage ratio over jointly observed cells.

    MAPE averages per-cell absolute percentage errors and skips cells whose truth is 0.
    With ``pooled=True`` cells are weighted by ``truth_counts`` (readings per cell).
    """
    est = np.asarray(selected_field, dtype=float)
    tru = np.asarray(truth, dtype=float)
    if est.shape != tru.shape:
        raise ValueError("fields are on different grids")
    t_obs = ~np.isnan(tru)
    joint = t_obs & ~np.isnan(est)
    n_truth, n_joint = int(t_obs.sum()), int(joint.sum())
    ratio = n_joint / n_truth if n_truth else 0.0
    if n_joint == 0:
        return Scores(None, None, ratio, 0, n_truth, 0)

    cells = np.flatnonzero(joint)
    err = est[cells] - tru[cells]
    weights = np.ones(len(cells))
    if pooled:
        if truth_counts is None:
            raise ValueError("pooled metrics need truth_counts")
        weights = np.asarray(truth_counts, dtype=float)[cells]
    rmse = math.sqrt(float(np.sum(weights * err * err) / np.sum(weights)))

    pos = tru[cells] > 0
    ape = np.abs(err[pos]) / tru[cells][pos] * 100.0
    mape = float(np.sum(weights[pos] * ape) / np.sum(weights[pos])) if pos.any() else None
    per_cell = {int(c): float(a) for c, a in zip(cells[pos], ape)}
    return Scores(rmse, mape, ratio, n_joint, n_truth, int((~pos).sum()), per_cell)


@dataclass
class EvaluationReport:
    pollutant: str
    fleet_size: int
    strategy: str
    seed: int
    rmse: float | None
    mape: float | None
    coverage_ratio: float
    utility: float
    status: str = "ok"
    per_cell_mape: dict[int, float] = field(default_factory=dict, repr=False)

    def to_dict(self, with_cells: bool = False) -> dict:
        d = asdict(self)
        if not with_cells:
            d.pop("per_cell_mape")
        return d


def evaluate_selection(selection: FleetSelection, readings: dict[str, ReadingAggregate],
                       pooled: bool = False) -> list[EvaluationReport]:
    reports = []
    for name, agg in readings.items():
        est = estimate_field(selection, agg)
        tru = truth_field(agg)
        _, tcounts = agg.cell_totals()
        s = score(est, tru, pooled=pooled, truth_counts=tcounts)
        reports.append(EvaluationReport(
            pollutant=name,
            fleet_size=len(selection.selected),
            strategy=selection.strategy,
            seed=selection.seed,
            rmse=s.rmse,
            mape=s.mape,
            coverage_ratio=s.coverage_ratio,
            utility=selection.final_utility,
            status="ok" if s.defined else "undefined metrics: no jointly observed cells",
            per_cell_mape=s.per_cell_ape,
        ))
    return reports


def write_cell_mape(report: EvaluationReport, n_intervals: int, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["g", "t", "mape"])
        for c in sorted(report.per_cell_mape):
            w.writerow([c // n_intervals, c % n_intervals, f"{report.per_cell_mape[c]:.6g}"])


@dataclass
class SweepResult:
    reports: list[EvaluationReport]
    selections: dict[tuple[str, int, int], FleetSelection]
    sizes: list[int]
    strategies: list[str]
    notes: list[str] = field(default_factory=list)

    def utility_table(self) -> dict[str, dict[int, tuple[float, float]]]:
        """Mean and standard deviation of utility per strategy and fleet size."""
        out: dict[str, dict[int, tuple[float, float]]] = {}
        for strat in self.strategies:
            row = {}
            for size in self.sizes:
                vals = [sel.final_utility for (s, n, _), sel in self.selections.items()
                        if s == strat and n == size]
                if vals:
                    row[size] = (float(np.mean(vals)), float(np.std(vals)))
            out[strat] = row
        return out

    def metric(self, strategy: str, size: int, pollutant: str, name: str = "mape") -> list[float]:
        return [getattr(r, name) for r in self.reports
                if r.strategy == strategy and r.fleet_size == size and r.pollutant == pollutant
                and getattr(r, name) is not None]


def _is_uniform_cost(model: VisitModel) -> bool:
    return bool(np.all(model.cost == model.cost[0]))


def sweep_fleet_sizes(model: VisitModel, weights, readings: dict[str, ReadingAggregate],
                      sizes, strategies, seeds=(0,), tsub_beta: float = 1.85,
                      jobs: int = 1, lazy: bool = True) -> SweepResult:
    """Run every (strategy, size, seed) with budget = size under unit costs.

    Deterministic strategies run once per size (seed 0 in the keys); RA runs per seed.
    """
    notes = []
    if not _is_uniform_cost(model):
        raise ValueError("fleet-size sweeps need uniform vehicle costs")
    unit = float(model.cost[0])
    ok_sizes = []
    for n in sizes:
        if n > model.n_vehicles:
            notes.append(f"size {n} skipped: only {model.n_vehicles} vehicles")
        else:
            ok_sizes.append(int(n))

    jobs_list = []
    for strat in strategies:
        for n in ok_sizes:
            for seed in (seeds if strat == "ra" else [0]):
                jobs_list.append((strat, n, int(seed)))

    def run(key):
        strat, n, seed = key
        prob = SelectionProblem(model, weights, budget=n * unit, strategy=strat, rng_seed=seed,
                                tsub_beta=tsub_beta)
        sel = solve(prob, lazy=lazy and strat == "optifleet")
        return key, sel, evaluate_selection(sel, readings)

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as ex:
            results = list(ex.map(run, jobs_list))
    else:
        results = [run(k) for k in jobs_list]

    selections, reports = {}, []
    for key, sel, reps in sorted(results, key=lambda r: r[0]):
        selections[key] = sel
        reports.extend(reps)
    return SweepResult(reports, selections, ok_sizes, list(strategies), notes)


def format_utility_table(result: SweepResult, digits: int = 2) -> str:
    """Aligned text table: one row per strategy, one column per fleet size."""
    table = result.utility_table()
    head = ["Algorithm", *(str(n) for n in result.sizes)]
    rows = [head]
    for strat in result.strategies:
        cells = [STRATEGY_LABELS.get(strat, strat)]
        for n in result.sizes:
            if n not in table[strat]:
                cells.append("-")
                continue
            mean, sd = table[strat][n]
            cells.append(f"{mean:.{digits}f}" + (f"±{sd:.{digits}f}" if strat == "ra" else ""))
        rows.append(cells)
    widths = [max(len(r[i]) for r in rows) for i in range(len(head))]
    lines = ["  ".join(c.rjust(w) if j else c.ljust(w) for j, (c, w) in enumerate(zip(r, widths)))
             for r in rows]
    lines.insert(1, "-" * len(lines[0]))
    return "\n".join(lines)


def summarize_metric(result: SweepResult, pollutant: str, name: str = "mape") -> dict:
    """Median/mean/sd of a metric per strategy and size."""
    out = {}
    for strat in result.strategies:
        row = {}
        for n in result.sizes:
            vals = result.metric(strat, n, pollutant, name)
            if vals:
                row[n] = {"median": float(np.median(vals)), "mean": float(np.mean(vals)),
                          "sd": float(np.std(vals)), "n": len(vals)}
        out[strat] = row
    return out


@dataclass
class AblationResult:
    sweeps: dict[str, SweepResult]

    def table(self, pollutant: str, name: str = "mape") -> dict:
        """Per variant, strategy and size: mean metric and its delta against uniform."""
        base = summarize_metric(self.sweeps["uniform"], pollutant, name) if "uniform" in self.sweeps else {}
        out = {}
        for variant, sw in self.sweeps.items():
            summ = summarize_metric(sw, pollutant, name)
            for strat, row in summ.items():
                for n, stats in row.items():
                    ref = base.get(strat, {}).get(n)
                    out[(variant, strat, n)] = {
                        **stats,
                        "delta_vs_uniform": None if ref is None else stats["mean"] - ref["mean"],
                    }
        return out


def run_ablation(prepared, variants=("uniform", "spatial_only", "temporal_only", "full"),
                 sizes=(8, 16, 32), strategies=("improved",), seeds=(0,),
                 pollutant: str = "PM2.5", jobs: int = 1) -> AblationResult:
    """Repeat the sweep under each weight variant built from the same feature tables."""
    sweeps = {}
    for variant in variants:
        w = prepared.weights(variant, pollutant)
        sweeps[variant] = sweep_fleet_sizes(prepared.model, w, prepared.readings, sizes,
                                            strategies, seeds, jobs=jobs)
    return AblationResult(sweeps)


def format_ablation_table(result: AblationResult, pollutant: str, name: str = "mape") -> str:
    tab = result.table(pollutant, name)
    lines = [f"{'variant':<14} {'strategy':<20} {'size':>5} {name + ' mean':>12} {'median':>9} {'Δ uniform':>10}"]
    for (variant, strat, n), st in tab.items():
        delta = "-" if st["delta_vs_uniform"] is None else f"{st['delta_vs_uniform']:+.3f}"
        lines.append(f"{variant:<14} {STRATEGY_LABELS.get(strat, strat):<20} {n:>5} "
                     f"{st['mean']:>12.3f} {st['median']:>9.3f} {delta:>10}")
    return "\n".join(lines)
