"""Probabilistic views of vehicle visits.

A single "visit probability" plays two roles that cannot be the same object:

* ``q`` -- per-cell Bernoulli coverage probability, the fraction of observed days on
  which the vehicle visited ``(g, t)``. Entries are independent and each lies in [0, 1].
  This feeds the fleet coverage product.
* ``pi`` -- the vehicle's trajectory distribution, its share of in-bounds records
  falling in ``(g, t)``. Sums to one per vehicle and feeds trajectory entropy.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import zipfile
from dataclasses import dataclass
from datetime import date
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .errors import ValidationError
from .grid import GridSpec, ReadingAggregate, VisitCounts

logger = logging.getLogger(__name__)

CACHE_VERSION = 1


def derive_coverage_prob(counts: VisitCounts, grid: GridSpec | None = None) -> sp.csr_matrix:
    grid = grid or counts.grid
    q = counts.day_presence.astype(np.float64) / float(grid.n_days)
    q.data = np.minimum(q.data, 1.0)
    return q.tocsr()


def derive_trajectory_dist(counts: VisitCounts) -> tuple[sp.csr_matrix, np.ndarray]:
    """Row-normalise counts. Returns ``(pi, degenerate)``; degenerate rows stay all-zero."""
    c = counts.counts.astype(np.float64).tocsr()
    totals = np.asarray(c.sum(axis=1)).ravel()
    degenerate = totals == 0
    scale = np.zeros_like(totals)
    scale[~degenerate] = 1.0 / totals[~degenerate]
    pi = sp.diags(scale) @ c
    return pi.tocsr(), degenerate


def load_costs(path, vehicle_ids, default: float = 1.0) -> np.ndarray:
    """Read a ``vehicle_id,cost`` CSV; absent vehicles get ``default``.

    ``path`` may be None (no file). Unknown ids are logged and ignored.
    """
    if not default > 0:
        raise ValidationError(f"default cost must be positive, got {default}")
    lookup = {v: i for i, v in enumerate(vehicle_ids)}
    cost = np.full(len(vehicle_ids), float(default))
    if path is None:
        return cost
    with open(path, newline="") as fh:
        text = fh.read()
    if not text.strip():
        return cost
    reader = csv.DictReader(io.StringIO(text))
    if reader.fieldnames is None or not {"vehicle_id", "cost"} <= set(reader.fieldnames):
        raise ValidationError(f"{path}: expected header 'vehicle_id,cost'")
    for row in reader:
        vid = row["vehicle_id"].strip()
        try:
            c = float(row["cost"])
        except ValueError:
            raise ValidationError(f"{path}: non-numeric cost for {vid!r}") from None
        if not (np.isfinite(c) and c > 0):
            raise ValidationError(f"{path}: cost for {vid!r} must be positive, got {c}")
        if vid not in lookup:
            logger.warning("%s: unknown vehicle id %r ignored", path, vid)
            continue
        cost[lookup[vid]] = c
    return cost


@dataclass
class VisitModel:
    vehicle_ids: tuple[str, ...]
    q: sp.csr_matrix
    pi: sp.csr_matrix
    cost: np.ndarray
    grid: GridSpec
    degenerate: np.ndarray

    def __post_init__(self):
        if self.q.shape != self.pi.shape or self.q.shape[0] != len(self.vehicle_ids):
            raise ValidationError("q, pi and vehicle list disagree in shape")
        if np.any(self.cost <= 0):
            raise ValidationError("all vehicle costs must be positive")

    @property
    def n_vehicles(self) -> int:
        return len(self.vehicle_ids)

    @property
    def n_cells(self) -> int:
        return self.q.shape[1]

    def index_of(self, vehicle_id: str) -> int:
        return self.vehicle_ids.index(vehicle_id)

    def q_layer(self, i: int) -> np.ndarray:
        return self.q[i].toarray().ravel()

    def with_costs(self, cost) -> "VisitModel":
        return VisitModel(self.vehicle_ids, self.q, self.pi, np.asarray(cost, float), self.grid,
                          self.degenerate)

    def subset(self, rows) -> "VisitModel":
        rows = np.asarray(rows, dtype=np.int64)
        return VisitModel(
            tuple(self.vehicle_ids[i] for i in rows),
            self.q[rows],
            self.pi[rows],
            self.cost[rows],
            self.grid,
            self.degenerate[rows],
        )


def build_visit_model(counts: VisitCounts, cost=None) -> VisitModel:
    q = derive_coverage_prob(counts)
    pi, degenerate = derive_trajectory_dist(counts)
    if cost is None:
        cost = np.ones(counts.n_vehicles)
    return VisitModel(counts.vehicle_ids, q, pi, np.asarray(cost, dtype=float), counts.grid,
                      degenerate)


# -- cache ------------------------------------------------------------------------------

def _grid_to_dict(grid: GridSpec) -> dict:
    return {
        "origin_lat": grid.origin_lat,
        "origin_lon": grid.origin_lon,
        "cell_size_m": grid.cell_size_m,
        "n_rows": grid.n_rows,
        "n_cols": grid.n_cols,
        "time_interval_minutes": grid.time_interval_minutes,
        "n_days": grid.n_days,
        "utc_offset_minutes": grid.utc_offset_minutes,
        "start_date": None if grid.start_date is None else grid.start_date.isoformat(),
    }


def _grid_from_dict(d: dict, mask) -> GridSpec:
    d = dict(d)
    if d.get("start_date"):
        d["start_date"] = date.fromisoformat(d["start_date"])
    return GridSpec(**d, domain_mask=mask)


def save_cache(path, counts: VisitCounts, readings: dict[str, ReadingAggregate] | None = None,
               cost=None) -> None:
    """Write counts (and optional reading aggregates) to a versioned ``.npz`` cache."""
    readings = readings or {}
    header = {
        "version": CACHE_VERSION,
        "grid_hash": counts.grid.fingerprint(),
        "grid": _grid_to_dict(counts.grid),
        "vehicle_ids": list(counts.vehicle_ids),
        "pollutants": list(readings),
    }
    arrays = {
        "header": np.frombuffer(json.dumps(header, sort_keys=True).encode(), dtype=np.uint8),
        "counts_indptr": counts.counts.indptr,
        "counts_indices": counts.counts.indices,
        "counts_data": counts.counts.data,
        "days_data": counts.day_presence.data,
        "total_records": counts.total_records,
        "dropped": counts.dropped,
        "cost": np.ones(counts.n_vehicles) if cost is None else np.asarray(cost, float),
    }
    if counts.grid.domain_mask is not None:
        arrays["domain_mask"] = counts.grid.domain_mask
    for i, (name, agg) in enumerate(readings.items()):
        arrays[f"r{i}_keys"] = agg.keys
        arrays[f"r{i}_sums"] = agg.sums
        arrays[f"r{i}_counts"] = agg.counts
    _write_npz(path, arrays)


def _write_npz(path, arrays: dict) -> None:
    # np.savez stamps entries with the wall clock; a fixed date keeps caches byte-identical
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_DEFLATED) as zf:
        for name, arr in arrays.items():
            info = zipfile.ZipInfo(name + ".npy", date_time=(1980, 1, 1, 0, 0, 0))
            info.compress_type = zipfile.ZIP_DEFLATED
            buf = io.BytesIO()
            np.lib.format.write_array(buf, np.asarray(arr), allow_pickle=False)
            zf.writestr(info, buf.getvalue())


@dataclass
class CacheContents:
    counts: VisitCounts
    readings: dict[str, ReadingAggregate]
    cost: np.ndarray

    def visit_model(self, cost=None) -> VisitModel:
        return build_visit_model(self.counts, self.cost if cost is None else cost)


def load_cache(path) -> CacheContents:
    with np.load(path) as z:
        header = json.loads(z["header"].tobytes().decode())
        if header.get("version") != CACHE_VERSION:
            raise ValidationError(f"{path}: unsupported cache version {header.get('version')}")
        mask = z["domain_mask"] if "domain_mask" in z.files else None
        grid = _grid_from_dict(header["grid"], mask)
        if grid.fingerprint() != header["grid_hash"]:
            raise ValidationError(f"{path}: grid hash mismatch")
        ids = tuple(header["vehicle_ids"])
        shape = (len(ids), grid.n_spacetime)
        indptr, indices = z["counts_indptr"], z["counts_indices"]
        counts = sp.csr_matrix((z["counts_data"], indices, indptr), shape=shape)
        days = sp.csr_matrix((z["days_data"], indices.copy(), indptr.copy()), shape=shape)
        vc = VisitCounts(ids, counts, days, z["total_records"], z["dropped"], grid)
        readings = {}
        for i, name in enumerate(header["pollutants"]):
            readings[name] = ReadingAggregate(
                name, ids, grid.n_spacetime, z[f"r{i}_keys"], z[f"r{i}_sums"], z[f"r{i}_counts"]
            )
        cost = z["cost"]
    return CacheContents(vc, readings, cost)
