"""Budget-constrained fleet selection strategies.

All greedy strategies pick ``argmax score / cost`` among candidates that still fit in
the remaining budget, break ties by the smaller vehicle id and stop early once the
best score is zero (unless ``spend_full_budget`` is set).
"""

from __future__ import annotations

import heapq
import itertools
import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np

from .errors import SizeCapError, ValidationError
from .utility import SparseRows, weight_vector
from .visits import VisitModel

logger = logging.getLogger(__name__)

STRATEGIES = ("ra", "tsub", "optifleet", "improved", "exact")
STRATEGY_LABELS = {
    "ra": "RA",
    "tsub": "TSUB",
    "optifleet": "OptiFleet",
    "improved": "Improved OptiFleet",
    "exact": "Exact",
}
DEFAULT_TSUB_BETA = 1.85
EXACT_CAP = 20


@dataclass
class SelectionProblem:
    visit_model: VisitModel
    weights: object  # WeightField or flat array
    budget: float
    strategy: str = "optifleet"
    rng_seed: int = 0
    tsub_beta: float = DEFAULT_TSUB_BETA
    spend_full_budget: bool = False

    def __post_init__(self):
        if not self.budget > 0:
            raise ValidationError(f"budget must be positive, got {self.budget}")
        if not self.tsub_beta > 0:
            raise ValidationError(f"tsub_beta must be positive, got {self.tsub_beta}")
        if self.strategy not in STRATEGIES:
            raise ValidationError(f"unknown strategy {self.strategy!r}")
        if weight_vector(self.weights).size != self.visit_model.n_cells:
            raise ValidationError("weight field does not match the visit model grid")

    @property
    def w(self) -> np.ndarray:
        return weight_vector(self.weights)


@dataclass
class FleetSelection:
    selected: list[str]
    per_step_gain: list[float]
    per_step_score: list[float]
    per_step_cost: list[float]
    total_cost: float
    final_utility: float
    strategy: str
    seed: int
    budget: float
    status: str = "ok"
    wall_time: float = 0.0
    n_evaluations: int = field(default=0, compare=False)

    def to_dict(self) -> dict:
        return {
            "strategy": self.strategy,
            "seed": self.seed,
            "budget": self.budget,
            "status": self.status,
            "picks": [
                {"vehicle_id": v, "score": s, "gain": g, "cost": c}
                for v, s, g, c in zip(self.selected, self.per_step_score, self.per_step_gain,
                                      self.per_step_cost)
            ],
            "total_cost": self.total_cost,
            "final_utility": self.final_utility,
            "wall_time": self.wall_time,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FleetSelection":
        picks = d["picks"]
        return cls(
            selected=[p["vehicle_id"] for p in picks],
            per_step_gain=[p["gain"] for p in picks],
            per_step_score=[p["score"] for p in picks],
            per_step_cost=[p["cost"] for p in picks],
            total_cost=d["total_cost"],
            final_utility=d["final_utility"],
            strategy=d["strategy"],
            seed=d["seed"],
            budget=d["budget"],
            status=d.get("status", "ok"),
            wall_time=d.get("wall_time", 0.0),
        )


class _Fleet:
    """Mutable greedy state: coverage, weighted residual ``w (1 - P)`` and spend."""

    def __init__(self, problem: SelectionProblem):
        self.problem = problem
        self.model = problem.visit_model
        self.rows = SparseRows(self.model.q)
        self.w = problem.w
        self.P = np.zeros(self.model.n_cells)
        self.residual = self.w.copy()
        self.picked: list[int] = []
        self.gains: list[float] = []
        self.scores: list[float] = []
        self.costs: list[float] = []
        self.spent = 0.0

    def affordable(self, i: int) -> bool:
        return self.spent + self.model.cost[i] <= self.problem.budget

    def accept(self, i: int, score: float) -> None:
        idx, vals = self.rows.support(i), self.rows.values(i)
        self.gains.append(self.rows.gain(i, self.residual))
        self.P[idx] = np.minimum(self.P[idx] + (1.0 - self.P[idx]) * vals, 1.0)
        self.residual[idx] = self.w[idx] * (1.0 - self.P[idx])
        self.picked.append(i)
        self.scores.append(float(score))
        self.costs.append(float(self.model.cost[i]))
        self.spent += float(self.model.cost[i])

    def result(self, status: str, n_eval: int, t0: float) -> FleetSelection:
        p = self.problem
        return FleetSelection(
            selected=[self.model.vehicle_ids[i] for i in self.picked],
            per_step_gain=self.gains,
            per_step_score=self.scores,
            per_step_cost=self.costs,
            total_cost=self.spent,
            final_utility=fleet_utility(self.model, self.picked, self.w),
            strategy=p.strategy,
            seed=p.rng_seed,
            budget=p.budget,
            status=status,
            wall_time=time.perf_counter() - t0,
            n_evaluations=n_eval,
        )


def fleet_utility(model: VisitModel, members, w) -> float:
    """Weighted expected coverage of a fleet given by row indices."""
    rows = model.q.tocsr()
    comp = np.ones(model.n_cells)
    for i in members:
        s, e = rows.indptr[i], rows.indptr[i + 1]
        comp[rows.indices[s:e]] *= 1.0 - rows.data[s:e]
    return float(np.sum(weight_vector(w) * (1.0 - comp)))


def _no_candidate_status(fleet: _Fleet) -> str:
    return "no affordable vehicle" if not fleet.picked else "budget exhausted"


def _scan_greedy(problem: SelectionProblem, score_fn, on_accept=None) -> FleetSelection:
    """Exhaustive per-step argmax over affordable candidates (smallest index wins ties)."""
    t0 = time.perf_counter()
    fleet = _Fleet(problem)
    cost = fleet.model.cost
    remaining = list(range(fleet.model.n_vehicles))
    n_eval = 0
    status = "ok"
    while True:
        remaining = [i for i in remaining if fleet.affordable(i)]
        if not remaining:
            status = _no_candidate_status(fleet)
            break
        best, best_score = -1, -math.inf
        for i in remaining:
            s = score_fn(fleet, i) / cost[i]
            n_eval += 1
            if s > best_score:
                best, best_score = i, s
        if best_score <= 0 and not problem.spend_full_budget:
            status = "no positive score"
            break
        if on_accept is not None:
            on_accept(fleet, best)
        fleet.accept(best, best_score)
        remaining.remove(best)
    return fleet.result(status, n_eval, t0)


def select_optifleet(problem: SelectionProblem) -> FleetSelection:
    return _scan_greedy(problem, lambda fl, i: fl.rows.gain(i, fl.residual))


def select_improved_optifleet(problem: SelectionProblem) -> FleetSelection:
    # scored against the current residual w (1 - P); recomputed for every candidate each step
    return _scan_greedy(problem, lambda fl, i: fl.rows.effective_entropy(i, fl.residual))


def tsub_utility(n_visitors, beta: float) -> np.ndarray:
    """Distinct-visitor utility ``N ** beta`` per cell."""
    return np.power(np.asarray(n_visitors, dtype=float), beta)


def select_tsub(problem: SelectionProblem) -> FleetSelection:
    n_vehicles = problem.visit_model.n_vehicles
    xi = tsub_utility(np.arange(n_vehicles + 2), problem.tsub_beta)
    step = np.diff(xi)  # step[n] = xi(n + 1) - xi(n)
    visitors = np.zeros(problem.visit_model.n_cells, dtype=np.int64)
    w = problem.w

    def score(fl, i):
        idx = fl.rows.support(i)
        return float(np.sum(w[idx] * step[visitors[idx]]))

    def on_accept(fl, i):
        visitors[fl.rows.support(i)] += 1

    return _scan_greedy(problem, score, on_accept)


def select_random(problem: SelectionProblem) -> FleetSelection:
    t0 = time.perf_counter()
    fleet = _Fleet(problem)
    order = np.random.default_rng(problem.rng_seed).permutation(fleet.model.n_vehicles)
    for i in order:
        if fleet.affordable(int(i)):
            fleet.accept(int(i), 0.0)
    status = "ok" if fleet.picked else "no affordable vehicle"
    return fleet.result(status, 0, t0)


def lazy_greedy_accelerator(problem: SelectionProblem) -> FleetSelection:
    """OptiFleet with stale upper bounds kept in a heap (CELF).

    Gains only shrink as coverage grows, so a candidate whose refreshed score stays on
    top of the heap is the true argmax; heap keys ``(-score, index)`` reproduce the
    smallest-index tie rule of the exhaustive scan.
    """
    if problem.strategy != "optifleet":
        raise ValidationError("the lazy accelerator only applies to the optifleet strategy")
    t0 = time.perf_counter()
    fleet = _Fleet(problem)
    cost = fleet.model.cost
    heap = [(-math.inf, i, -1) for i in range(fleet.model.n_vehicles)]
    heapq.heapify(heap)
    n_eval = 0
    step = 0
    status = "ok"
    while True:
        chosen = None
        while heap:
            neg, i, stamp = heap[0]
            if not fleet.affordable(i):
                heapq.heappop(heap)
                continue
            if stamp == step:
                chosen = (i, -neg)
                break
            heapq.heappop(heap)
            s = fleet.rows.gain(i, fleet.residual) / cost[i]
            n_eval += 1
            heapq.heappush(heap, (-s, i, step))
        if chosen is None:
            status = _no_candidate_status(fleet)
            break
        i, s = chosen
        if s <= 0 and not problem.spend_full_budget:
            status = "no positive score"
            break
        heapq.heappop(heap)
        fleet.accept(i, s)
        step += 1
    return fleet.result(status, n_eval, t0)


def _subset_utilities(q_dense: np.ndarray, w: np.ndarray, masks: np.ndarray) -> np.ndarray:
    ones = (q_dense >= 1.0).astype(np.float64)
    with np.errstate(divide="ignore"):
        logs = np.where(q_dense >= 1.0, 0.0, np.log1p(-np.minimum(q_dense, 1.0)))
    m = masks.astype(np.float64)
    P = -np.expm1(m @ logs)
    P[(m @ ones) > 0] = 1.0
    return P @ w


def select_exact(problem: SelectionProblem, max_vehicles: int = EXACT_CAP) -> FleetSelection:
    """Exhaustive search over every budget-feasible subset.

    Ties (within 1e-12 relative) go to the fewest vehicles, then the lexicographically
    smallest id tuple.
    """
    t0 = time.perf_counter()
    model = problem.visit_model
    n = model.n_vehicles
    if n > min(max_vehicles, EXACT_CAP):
        raise SizeCapError(f"exact solver accepts at most {min(max_vehicles, EXACT_CAP)} vehicles, got {n}")
    w = problem.w
    cost = model.cost
    sorted_cost = np.sort(cost)
    k_max = int(np.searchsorted(np.cumsum(sorted_cost), problem.budget, side="right"))

    q = model.q.toarray()
    support = np.flatnonzero(q.any(axis=0))
    q, w_s = q[:, support], w[support]

    best_f, best_key, best_set = -math.inf, None, ()
    chunk = max(1, 4_000_000 // max(1, len(support)))
    n_eval = 0
    for k in range(0, k_max + 1):
        combos = itertools.combinations(range(n), k)
        while True:
            batch = list(itertools.islice(combos, chunk))
            if not batch:
                break
            masks = np.zeros((len(batch), n), dtype=bool)
            for r, c in enumerate(batch):
                masks[r, list(c)] = True
            feasible = masks.astype(float) @ cost <= problem.budget
            if not feasible.any():
                continue
            fvals = _subset_utilities(q, w_s, masks[feasible]) if k else np.zeros(int(feasible.sum()))
            n_eval += len(fvals)
            for combo, f in zip(itertools.compress(batch, feasible), fvals):
                ids = tuple(sorted(model.vehicle_ids[i] for i in combo))
                key = (k, ids)
                tol = 1e-12 * max(1.0, abs(best_f), abs(f))
                if best_key is None or f > best_f + tol or (abs(f - best_f) <= tol and key < best_key):
                    best_f, best_key, best_set = f, key, combo

    fleet = _Fleet(problem)
    for i in sorted(best_set, key=lambda j: model.vehicle_ids[j]):
        fleet.accept(i, fleet.rows.gain(i, fleet.residual) / cost[i])
    status = "ok" if k_max else "no affordable vehicle"
    return fleet.result(status, n_eval, t0)


def solve(problem: SelectionProblem, lazy: bool = False) -> FleetSelection:
    s = problem.strategy
    if s == "optifleet":
        return lazy_greedy_accelerator(problem) if lazy else select_optifleet(problem)
    if lazy:
        logger.warning("--lazy only applies to optifleet; ignored for %s", s)
    if s == "improved":
        return select_improved_optifleet(problem)
    if s == "tsub":
        return select_tsub(problem)
    if s == "ra":
        return select_random(problem)
    return select_exact(problem)
