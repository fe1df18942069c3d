import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import model_from_q, random_q
from fleetsense.errors import SizeCapError, ValidationError
from fleetsense.selection import (
    FleetSelection,
    SelectionProblem,
    fleet_utility,
    lazy_greedy_accelerator,
    select_exact,
    select_improved_optifleet,
    select_optifleet,
    select_random,
    select_tsub,
    solve,
    tsub_utility,
)
from fleetsense.utility import effective_entropy

# 2 ** 1.85 evaluated with mpmath at 30 digits
XI_2 = 3.60500185044332097382402406237


def problem(q, budget, strategy="optifleet", cost=None, w=None, **kw):
    m = model_from_q(q, cost)
    w = np.ones(m.n_cells) if w is None else np.asarray(w, float)
    return SelectionProblem(m, w, budget, strategy, **kw)


def disjoint_q():
    # weighted sizes 3, 2, 1 on disjoint supports
    q = np.zeros((3, 6))
    q[0, 0:3] = 1.0
    q[1, 3:5] = 1.0
    q[2, 5] = 1.0
    return q


# -- OptiFleet ---------------------------------------------------------------

def test_disjoint_greedy_picks_largest_two():
    sel = select_optifleet(problem(disjoint_q(), 2))
    assert sel.selected == ["veh0000", "veh0001"]
    assert sel.final_utility == 5.0
    assert sel.per_step_gain == [3.0, 2.0]


def test_duplicate_loses_to_distinct_vehicle():
    q = np.zeros((3, 6))
    q[0, :4] = 0.5
    q[1, :4] = 0.5
    q[2, 4:6] = 0.9
    sel = select_optifleet(problem(q, 2))
    # after the first pick the duplicate's residual gain is 4 * 0.5 * 0.5 = 1.0, the
    # distinct vehicle keeps its solo gain 2 * 0.9 = 1.8
    assert sel.selected == ["veh0000", "veh0002"]
    assert sel.per_step_gain[1] == pytest.approx(1.8, abs=1e-15)


def test_budget_below_every_cost_is_empty():
    sel = select_optifleet(problem(disjoint_q(), 0.5))
    assert sel.selected == [] and sel.status == "no affordable vehicle" and sel.final_utility == 0.0


def test_ties_go_to_smaller_id():
    q = np.array([[0.0, 1.0], [1.0, 0.0]])
    assert select_optifleet(problem(q, 1)).selected == ["veh0000"]


def test_cost_ratio_drives_choice():
    q = np.array([[1.0, 1.0, 1.0, 0.0], [0.0, 0.0, 0.0, 1.0]])
    sel = select_optifleet(problem(q, 4, cost=[4.0, 1.0]))
    assert sel.selected == ["veh0001"]  # 1/1 beats 3/4; the other no longer fits
    assert sel.total_cost == 1.0


def test_stops_on_zero_gain_unless_spending_full_budget():
    q = np.array([[1.0, 0.0], [1.0, 0.0], [0.0, 0.0]])
    sel = select_optifleet(problem(q, 3))
    assert sel.selected == ["veh0000"] and sel.status == "no positive score"
    full = select_optifleet(problem(q, 3, spend_full_budget=True))
    assert full.selected == ["veh0000", "veh0001", "veh0002"]
    assert full.final_utility == sel.final_utility


def test_problem_validation():
    with pytest.raises(ValidationError):
        problem(disjoint_q(), 0)
    with pytest.raises(ValidationError):
        problem(disjoint_q(), 1, tsub_beta=0)
    with pytest.raises(ValidationError):
        problem(disjoint_q(), 1, strategy="greedy")
    with pytest.raises(ValidationError):
        problem(disjoint_q(), 1, w=np.ones(5))


# -- Improved OptiFleet ------------------------------------------------------

def test_improved_first_pick_ranks_by_q_entropy(rng):
    q = random_q(rng, 6, 10, ones=0.0)
    sel = select_improved_optifleet(problem(q, 1))
    scores = [effective_entropy(row) for row in q]
    assert sel.selected == [f"veh{int(np.argmax(scores)):04d}"]
    assert sel.per_step_score[0] == max(scores)


def test_spread_beats_concentrated():
    q = np.zeros((2, 5))
    q[0, 0] = 1.0
    q[1, 1:5] = 0.5
    sel = select_improved_optifleet(problem(q, 1))
    assert sel.selected == ["veh0001"]
    assert sel.per_step_score == [2.0]


def test_fully_covered_candidate_never_chosen():
    q = np.zeros((3, 4))
    q[0, :2] = [1.0, 0.5]   # scores 0.5 bits and saturates cell 0
    q[1, 0] = 0.9           # support fully covered once veh0000 is in
    q[2, 2] = 0.05
    sel = select_improved_optifleet(problem(q, 3))
    assert sel.selected == ["veh0000", "veh0002"]
    assert sel.status == "no positive score"


# -- TSUB --------------------------------------------------------------------

def test_tsub_utility_values():
    xi = tsub_utility([0, 1, 2], 1.85)
    assert xi[1] == 1.0
    assert xi[2] == pytest.approx(XI_2, abs=1e-12)
    assert tsub_utility([1], 0.3)[0] == 1.0


def test_tsub_second_visitor_increment():
    q = np.array([[0.5, 0.0], [0.5, 0.0]])
    sel = select_tsub(problem(q, 2, strategy="tsub"))
    assert sel.per_step_score == [1.0, pytest.approx(XI_2 - 1.0, abs=1e-12)]


def test_tsub_prefers_new_cells_only_when_worth_it():
    # veh0002 adds a fresh cell (gain 1); joining the crowd at cell 0 yields 2^b - 1 > 1
    q = np.array([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
    sel = select_tsub(problem(q, 2, strategy="tsub"))
    assert sel.selected == ["veh0000", "veh0001"]


# -- RA ----------------------------------------------------------------------

def test_random_is_seeded(rng):
    q = random_q(rng, 10, 8)
    a = select_random(problem(q, 4, "ra", rng_seed=5))
    b = select_random(problem(q, 4, "ra", rng_seed=5))
    assert a.selected == b.selected and len(a.selected) == 4


def test_random_with_ample_budget_takes_everyone(rng):
    q = random_q(rng, 7, 5)
    sel = select_random(problem(q, 100, "ra", rng_seed=1))
    assert sorted(sel.selected) == [f"veh{i:04d}" for i in range(7)]


def test_random_skips_unaffordable():
    sel = select_random(problem(np.eye(3), 2, "ra", cost=[5.0, 1.0, 1.0]))
    assert sorted(sel.selected) == ["veh0001", "veh0002"]


# -- exact -------------------------------------------------------------------

def test_exact_matches_greedy_on_disjoint():
    p = problem(disjoint_q(), 2, "exact")
    assert select_exact(p).final_utility == select_optifleet(p).final_utility == 5.0


def test_exact_with_ample_budget_takes_positive_vehicles():
    q = disjoint_q()
    q = np.vstack([q, np.zeros(6)])
    sel = select_exact(problem(q, 10, "exact"))
    assert sel.selected == ["veh0000", "veh0001", "veh0002"]


def test_exact_tie_prefers_fewest_then_lexicographic():
    q = np.array([[1.0, 0.0], [1.0, 0.0], [0.0, 0.0]])
    assert select_exact(problem(q, 2, "exact")).selected == ["veh0000"]
    q = np.array([[0.0, 1.0], [1.0, 0.0]])
    assert select_exact(problem(q, 1, "exact")).selected == ["veh0000"]


def test_exact_respects_costs():
    q = np.array([[1.0, 1.0, 1.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])
    sel = select_exact(problem(q, 2, "exact", cost=[3.0, 1.0, 1.0]))
    assert sel.selected == ["veh0001", "veh0002"] and sel.total_cost == 2.0


def test_exact_size_cap():
    with pytest.raises(SizeCapError):
        select_exact(problem(np.ones((21, 2)) * 0.1, 2, "exact"))
    with pytest.raises(SizeCapError):
        select_exact(problem(np.ones((5, 2)) * 0.1, 2, "exact"), max_vehicles=4)


def test_exact_beats_greedy_on_classic_trap():
    # greedy grabs the widest vehicle first, then can add only one fresh cell
    q = np.zeros((3, 7))
    q[0, 1:5] = 1.0
    q[1, [1, 2, 5]] = 1.0
    q[2, [3, 4, 6]] = 1.0
    p = problem(q, 2, "exact")
    assert select_optifleet(p).final_utility == 5.0
    exact = select_exact(p)
    assert exact.selected == ["veh0001", "veh0002"] and exact.final_utility == 6.0


# -- lazy --------------------------------------------------------------------

def test_lazy_one_refresh_per_step_on_disjoint():
    q = np.zeros((5, 10))
    for i in range(5):
        q[i, 2 * i:2 * i + 2] = 1.0 - 0.1 * i
    naive = select_optifleet(problem(q, 4))
    lazy = lazy_greedy_accelerator(problem(q, 4))
    assert lazy.selected == naive.selected
    # first step scores every vehicle, each later step re-scores only the top one
    assert lazy.n_evaluations == 5 + 3


def test_lazy_single_vehicle():
    p = problem([[0.3, 0.0, 0.9]], 1)
    assert lazy_greedy_accelerator(p).selected == select_optifleet(p).selected == ["veh0000"]


def test_lazy_requires_optifleet():
    with pytest.raises(ValidationError):
        lazy_greedy_accelerator(problem(disjoint_q(), 1, "tsub"))


# -- properties --------------------------------------------------------------

instances = st.tuples(st.integers(0, 2**32 - 1), st.integers(1, 9), st.integers(1, 12), st.integers(1, 6))


@settings(max_examples=120, deadline=None)
@given(instances, st.sampled_from(["ra", "tsub", "optifleet", "improved", "exact"]), st.booleans())
def test_budget_never_exceeded(inst, strategy, varied_cost):
    seed, V, C, B = inst
    rng = np.random.default_rng(seed)
    cost = rng.uniform(0.3, 3.0, V) if varied_cost else None
    sel = solve(problem(random_q(rng, V, C), B, strategy, cost=cost, rng_seed=seed))
    assert sel.total_cost <= B + 1e-12
    assert len(set(sel.selected)) == len(sel.selected)
    assert len(sel.per_step_gain) == len(sel.selected) == len(sel.per_step_cost)


@settings(max_examples=60, deadline=None)
@given(instances, st.sampled_from(["ra", "tsub", "optifleet", "improved", "exact"]))
def test_strategies_deterministic(inst, strategy):
    seed, V, C, B = inst
    q = random_q(np.random.default_rng(seed), V, C)
    a, b = solve(problem(q, B, strategy, rng_seed=seed)), solve(problem(q, B, strategy, rng_seed=seed))
    assert a.to_dict() | {"wall_time": 0} == b.to_dict() | {"wall_time": 0}


@settings(max_examples=150, deadline=None)
@given(instances, st.booleans())
def test_lazy_equals_naive(inst, varied_cost):
    seed, V, C, B = inst
    rng = np.random.default_rng(seed)
    cost = rng.choice([0.5, 1.0, 2.0], V) if varied_cost else None
    w = rng.uniform(0.01, 1.0, C)
    p = problem(random_q(rng, V, C), B, cost=cost, w=w)
    naive, lazy = select_optifleet(p), lazy_greedy_accelerator(p)
    assert lazy.selected == naive.selected
    assert lazy.per_step_gain == naive.per_step_gain
    assert lazy.final_utility == naive.final_utility


@settings(max_examples=150, deadline=None)
@given(instances)
def test_uniform_cost_gains_non_increasing(inst):
    seed, V, C, B = inst
    rng = np.random.default_rng(seed)
    sel = select_optifleet(problem(random_q(rng, V, C), B, w=rng.uniform(0.01, 1, C)))
    g = sel.per_step_gain
    assert all(a >= b - 1e-12 for a, b in zip(g, g[1:]))


@settings(max_examples=100, deadline=None)
@given(instances, st.integers(1, 5))
def test_utility_monotone_in_budget(inst, extra):
    seed, V, C, B = inst
    q = random_q(np.random.default_rng(seed), V, C)
    f1 = select_optifleet(problem(q, B)).final_utility
    f2 = select_optifleet(problem(q, B + extra)).final_utility
    assert f2 >= f1 - 1e-12


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(2, 10), st.integers(1, 5))
def test_greedy_within_bound_of_exact(seed, V, B):
    rng = np.random.default_rng(seed)
    p = problem(random_q(rng, V, 8), B, "exact", w=rng.uniform(0.01, 1, 8))
    opt = select_exact(p).final_utility
    greedy = select_optifleet(p).final_utility
    assert greedy >= (1 - 1 / math.e) * opt - 1e-12
    assert opt >= greedy - 1e-9


def test_degenerate_vehicle_picked_last():
    q = np.array([[0.0, 0.0], [0.2, 0.0], [0.0, 0.1]])
    sel = select_optifleet(problem(q, 3, spend_full_budget=True))
    assert sel.selected[-1] == "veh0000"


def test_fleet_utility_matches_kernel(rng):
    q = random_q(rng, 5, 12)
    m = model_from_q(q)
    w = rng.random(12)
    expected = float(np.sum(w * (1 - np.prod(1 - q[[0, 3]], axis=0))))
    assert fleet_utility(m, [0, 3], w) == pytest.approx(expected, rel=1e-12)


def test_selection_json_round_trip(rng):
    sel = select_optifleet(problem(random_q(rng, 5, 6), 3))
    back = FleetSelection.from_dict(sel.to_dict())
    assert back.to_dict() == sel.to_dict()
