"""Coverage, utility and entropy kernels.

Layers are float arrays over the flattened ``G*T`` space (any shape is accepted and
flattened). ``w`` may be a plain array or anything with a ``vector`` attribute such as
:class:`fleetsense.weights.WeightField`.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import DimensionError, SelectionError

# above this many members the product is evaluated in log space
_LOG_SPACE_MEMBERS = 32


def weight_vector(w) -> np.ndarray:
    w = getattr(w, "vector", w)
    return np.asarray(w, dtype=np.float64).ravel()


def _flat(layer) -> np.ndarray:
    return np.asarray(layer, dtype=np.float64).ravel()


def coverage_probability(q_of_members: Sequence, n_cells: int | None = None) -> np.ndarray:
    """Probability that at least one member covers each cell: ``1 - prod(1 - q)``."""
    layers = [_flat(q) for q in q_of_members]
    if not layers:
        if n_cells is None:
            raise DimensionError("empty fleet needs n_cells to size the layer")
        return np.zeros(n_cells)
    sizes = {len(q) for q in layers}
    if len(sizes) != 1 or (n_cells is not None and sizes != {n_cells}):
        raise DimensionError(f"member layers disagree in size: {sorted(sizes)}")
    stack = np.stack(layers)
    if len(layers) <= _LOG_SPACE_MEMBERS:
        return 1.0 - np.prod(1.0 - stack, axis=0)
    # log1p(-1) = -inf makes q = 1 absorbing: expm1(-inf) = -1
    with np.errstate(divide="ignore"):
        return -np.expm1(np.log1p(-stack).sum(axis=0))


def sensing_utility(P, w) -> float:
    P = _flat(P)
    wv = weight_vector(w)
    if P.shape != wv.shape:
        raise DimensionError(f"coverage has {P.size} cells, weights have {wv.size}")
    return float(np.sum(wv * P))


@dataclass
class CoverageState:
    """Coverage of the current fleet. Also used as the coverage term in effective coverage."""

    P: np.ndarray
    selected: list = field(default_factory=list)
    utility_value: float = 0.0

    @classmethod
    def empty(cls, n_cells: int) -> "CoverageState":
        return cls(np.zeros(n_cells), [], 0.0)

    def add(self, vehicle, q_u, w) -> "CoverageState":
        P_new = incremental_coverage(self, q_u, vehicle)
        return CoverageState(P_new, [*self.selected, vehicle], sensing_utility(P_new, w))


def incremental_coverage(state: CoverageState, q_u, vehicle=None) -> np.ndarray:
    if vehicle is not None and vehicle in state.selected:
        raise SelectionError(f"vehicle {vehicle!r} is already in the fleet")
    q_u = _flat(q_u)
    if q_u.shape != state.P.shape:
        raise DimensionError("candidate layer does not match coverage layer")
    # same value as 1 - (1 - P)(1 - q), but exact when q = 0 or P = 0
    return np.minimum(state.P + (1.0 - state.P) * q_u, 1.0)


def marginal_gain(state: CoverageState, q_u, w, vehicle=None) -> float:
    # P' - P = (1 - P) q_u exactly; the factored form keeps the gain >= 0 under rounding
    if vehicle is not None and vehicle in state.selected:
        raise SelectionError(f"vehicle {vehicle!r} is already in the fleet")
    q_u = _flat(q_u)
    if q_u.shape != state.P.shape:
        raise DimensionError("candidate layer does not match coverage layer")
    return sensing_utility((1.0 - state.P) * q_u, w)


def _plogp_sum(p: np.ndarray) -> float:
    p = p[p > 0]
    if p.size == 0:
        return 0.0
    return float(-np.sum(p * np.log2(p)))


def trajectory_entropy(pi_v) -> float:
    """Shannon entropy in bits with ``0 log 0 = 0``; an all-zero layer gives 0."""
    return _plogp_sum(_flat(pi_v))


def effective_coverage(q_u, state, w) -> np.ndarray:
    """Candidate coverage discounted by existing coverage and scaled by weight.

    ``state`` may be a :class:`CoverageState` or a raw coverage layer.
    """
    P = state.P if isinstance(state, CoverageState) else _flat(state)
    q_u = _flat(q_u)
    wv = weight_vector(w)
    if not (q_u.shape == P.shape == wv.shape):
        raise DimensionError("effective coverage inputs disagree in size")
    return q_u * (1.0 - P) * wv


def effective_entropy(p_tilde) -> float:
    # applied to the discounted layer directly, without renormalising it
    return _plogp_sum(_flat(p_tilde))


def dump_coverage(P, n_intervals: int, path) -> None:
    """Write a coverage layer as ``g,t,P`` for inspection."""
    P = _flat(P)
    with open(Path(path), "w") as fh:
        fh.write("g,t,P\n")
        for c in np.flatnonzero(P):
            fh.write(f"{c // n_intervals},{c % n_intervals},{P[c]:.12g}\n")


class SparseRows:
    """Row access to a CSR matrix for per-candidate scoring.

    Each score is computed by the same per-row code path regardless of how many
    candidates are scored together, so lazy and exhaustive greedy agree bit for bit.
    """

    def __init__(self, matrix):
        m = matrix.tocsr()
        m.sort_indices()
        self.n_rows, self.n_cols = m.shape
        self._data = [m.data[m.indptr[i]:m.indptr[i + 1]].astype(np.float64)
                      for i in range(self.n_rows)]
        self._idx = [m.indices[m.indptr[i]:m.indptr[i + 1]] for i in range(self.n_rows)]

    def support(self, i: int) -> np.ndarray:
        return self._idx[i]

    def values(self, i: int) -> np.ndarray:
        return self._data[i]

    def dense(self, i: int) -> np.ndarray:
        out = np.zeros(self.n_cols)
        out[self._idx[i]] = self._data[i]
        return out

    def gain(self, i: int, residual: np.ndarray) -> float:
        """``sum w (1-P) q_i`` given ``residual = w * (1 - P)``."""
        return float(np.sum(self._data[i] * residual[self._idx[i]]))

    def effective_entropy(self, i: int, residual: np.ndarray) -> float:
        return _plogp_sum(self._data[i] * residual[self._idx[i]])
