"""Spatiotemporal grid, trajectory parsing and visit binning.

Cells are enumerated row-major from the south-west origin (``g = row * n_cols + col``)
and intervals from local midnight. The flat cell index used everywhere downstream is
``c = g * T + t``.
"""

from __future__ import annotations

import csv
import hashlib
import logging
import math
from dataclasses import dataclass, field
from datetime import date, datetime, timezone
from pathlib import Path
from typing import Iterable, Iterator, Mapping

import numpy as np
import scipy.sparse as sp

from .errors import ConfigurationError, EmptyAggregateError, SchemaError

logger = logging.getLogger(__name__)

EARTH_RADIUS_M = 6_371_008.8
MINUTES_PER_DAY = 1440
SECONDS_PER_DAY = 86_400

MANDATORY_COLUMNS = ("vehicle_id", "timestamp", "lat", "lon")
_EDGE_SNAP = 1e-9


@dataclass(frozen=True)
class GridSpec:
    origin_lat: float
    origin_lon: float
    cell_size_m: float
    n_rows: int
    n_cols: int
    time_interval_minutes: int = 60
    n_days: int = 1
    utc_offset_minutes: int = 0
    start_date: date | None = None
    # boolean per spatial cell; None means every cell is in the domain
    domain_mask: np.ndarray | None = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        if not self.cell_size_m > 0:
            raise ConfigurationError(f"cell_size_m must be positive, got {self.cell_size_m}")
        if self.n_rows < 1 or self.n_cols < 1:
            raise ConfigurationError(
                f"grid needs at least one row and column, got {self.n_rows}x{self.n_cols}"
            )
        if self.time_interval_minutes < 1 or MINUTES_PER_DAY % self.time_interval_minutes:
            raise ConfigurationError(
                f"time_interval_minutes must divide 1440, got {self.time_interval_minutes}"
            )
        if self.n_days < 1:
            raise ConfigurationError(f"n_days must be >= 1, got {self.n_days}")
        if not (-90 <= self.origin_lat <= 90 and -180 <= self.origin_lon <= 180):
            raise ConfigurationError("grid origin is not a valid coordinate")
        if self.domain_mask is not None:
            mask = np.asarray(self.domain_mask, dtype=bool).ravel()
            if mask.size != self.n_rows * self.n_cols:
                raise ConfigurationError(
                    f"domain mask has {mask.size} cells, grid has {self.n_rows * self.n_cols}"
                )
            mask.flags.writeable = False
            object.__setattr__(self, "domain_mask", mask)

    @property
    def n_cells(self) -> int:
        """Number of spatial cells G."""
        return self.n_rows * self.n_cols

    @property
    def n_intervals(self) -> int:
        """Number of time intervals T per day."""
        return MINUTES_PER_DAY // self.time_interval_minutes

    @property
    def n_spacetime(self) -> int:
        return self.n_cells * self.n_intervals

    @property
    def n_domain_cells(self) -> int:
        if self.domain_mask is None:
            return self.n_cells
        return int(self.domain_mask.sum())

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        h.update(
            repr(
                (
                    float(self.origin_lat),
                    float(self.origin_lon),
                    float(self.cell_size_m),
                    self.n_rows,
                    self.n_cols,
                    self.time_interval_minutes,
                    self.n_days,
                    self.utc_offset_minutes,
                    None if self.start_date is None else self.start_date.isoformat(),
                )
            ).encode()
        )
        if self.domain_mask is not None:
            h.update(np.packbits(self.domain_mask).tobytes())
        return h.hexdigest()[:16]


def read_grid_config(path: str | Path) -> GridSpec:
    """Parse a ``key = value`` grid config file.

    ``mask_file`` is resolved relative to the config file and holds one line of
    ``0``/``1`` characters per grid row, southmost row first.
    """
    path = Path(path)
    values: dict[str, str] = {}
    with open(path) as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigurationError(f"{path}:{lineno}: expected 'key = value'")
            key, value = (s.strip() for s in line.split("=", 1))
            values[key] = value

    required = ("origin_lat", "origin_lon", "cell_size_m", "n_rows", "n_cols")
    missing = [k for k in required if k not in values]
    if missing:
        raise ConfigurationError(f"{path}: missing keys {', '.join(missing)}")
    known = set(required) | {
        "time_interval_minutes", "n_days", "utc_offset_minutes", "start_date", "mask_file"
    }
    unknown = sorted(set(values) - known)
    if unknown:
        raise ConfigurationError(f"{path}: unknown keys {', '.join(unknown)}")

    try:
        kwargs = dict(
            origin_lat=float(values["origin_lat"]),
            origin_lon=float(values["origin_lon"]),
            cell_size_m=float(values["cell_size_m"]),
            n_rows=int(values["n_rows"]),
            n_cols=int(values["n_cols"]),
            time_interval_minutes=int(values.get("time_interval_minutes", 60)),
            n_days=int(values.get("n_days", 1)),
            utc_offset_minutes=int(values.get("utc_offset_minutes", 0)),
        )
        if "start_date" in values:
            kwargs["start_date"] = date.fromisoformat(values["start_date"])
    except ValueError as exc:
        raise ConfigurationError(f"{path}: {exc}") from None

    if "mask_file" in values:
        mask_path = path.parent / values["mask_file"]
        rows = [ln.strip() for ln in mask_path.read_text().splitlines() if ln.strip()]
        try:
            kwargs["domain_mask"] = np.array([[ch == "1" for ch in r] for r in rows], dtype=bool)
        except ValueError:
            raise ConfigurationError(f"{mask_path}: ragged mask rows") from None
    return GridSpec(**kwargs)


def write_grid_config(spec: GridSpec, path: str | Path, mask_name: str = "domain_mask.txt") -> None:
    path = Path(path)
    lines = [
        f"origin_lat = {spec.origin_lat!r}",
        f"origin_lon = {spec.origin_lon!r}",
        f"cell_size_m = {spec.cell_size_m!r}",
        f"n_rows = {spec.n_rows}",
        f"n_cols = {spec.n_cols}",
        f"time_interval_minutes = {spec.time_interval_minutes}",
        f"n_days = {spec.n_days}",
        f"utc_offset_minutes = {spec.utc_offset_minutes}",
    ]
    if spec.start_date is not None:
        lines.append(f"start_date = {spec.start_date.isoformat()}")
    if spec.domain_mask is not None:
        lines.append(f"mask_file = {mask_name}")
        mask = spec.domain_mask.reshape(spec.n_rows, spec.n_cols)
        (path.parent / mask_name).write_text(
            "\n".join("".join("1" if x else "0" for x in row) for row in mask) + "\n"
        )
    path.write_text("\n".join(lines) + "\n")


class SpatiotemporalIndex:
    """Maps ``(lat, lon, timestamp)`` to ``(g, t)`` via a local equirectangular projection.

    Both axes use half-open ``[lo, hi)`` intervals, so a point on a shared edge
    belongs to the cell with the larger index.
    """

    def __init__(self, spec: GridSpec):
        self.spec = spec
        self.m_per_deg_lat = EARTH_RADIUS_M * math.pi / 180.0
        self.m_per_deg_lon = self.m_per_deg_lat * math.cos(math.radians(spec.origin_lat))
        self._offset_s = spec.utc_offset_minutes * 60
        self.start_day = None
        if spec.start_date is not None:
            self.start_day = (spec.start_date - date(1970, 1, 1)).days

    def to_xy(self, lat, lon):
        x = (np.asarray(lon, dtype=float) - self.spec.origin_lon) * self.m_per_deg_lon
        y = (np.asarray(lat, dtype=float) - self.spec.origin_lat) * self.m_per_deg_lat
        return x, y

    def to_latlon(self, x, y):
        lat = self.spec.origin_lat + np.asarray(y, dtype=float) / self.m_per_deg_lat
        lon = self.spec.origin_lon + np.asarray(x, dtype=float) / self.m_per_deg_lon
        return lat, lon

    def locate_many(self, lat, lon, timestamp):
        """Vectorised lookup.

        Returns ``(g, t, local_day, in_bounds)``; ``g`` and ``t`` are only meaningful
        where ``in_bounds`` is true. ``local_day`` counts days since 1970-01-01 in the
        configured local offset.
        """
        spec = self.spec
        x, y = self.to_xy(lat, lon)
        # snap points within a nanocell of an edge onto it (projection round-off)
        col = np.floor(x / spec.cell_size_m + _EDGE_SNAP)
        row = np.floor(y / spec.cell_size_m + _EDGE_SNAP)
        ok = (col >= 0) & (col < spec.n_cols) & (row >= 0) & (row < spec.n_rows)
        g = np.where(ok, row * spec.n_cols + col, 0).astype(np.int64)
        if spec.domain_mask is not None:
            ok &= spec.domain_mask[g]

        local = np.floor(np.asarray(timestamp, dtype=float)).astype(np.int64) + self._offset_s
        local_day = np.floor_divide(local, SECONDS_PER_DAY)
        minute = np.mod(local, SECONDS_PER_DAY) // 60
        t = minute // spec.time_interval_minutes
        if self.start_day is not None:
            rel = local_day - self.start_day
            ok &= (rel >= 0) & (rel < spec.n_days)
        return g, t, local_day, ok

    def locate(self, lat: float, lon: float, timestamp: float) -> tuple[int, int] | None:
        g, t, _, ok = self.locate_many([lat], [lon], [timestamp])
        if not ok[0]:
            return None
        return int(g[0]), int(t[0])


def build_grid(config: GridSpec) -> SpatiotemporalIndex:
    return SpatiotemporalIndex(config)


@dataclass
class TrajectoryRecord:
    vehicle_id: str
    timestamp: float
    lat: float
    lon: float
    readings: dict[str, float] = field(default_factory=dict)


@dataclass
class TrajectoryTable:
    """Columnar trajectory records; iterating yields :class:`TrajectoryRecord` in file order.

    Missing readings are stored as NaN.
    """

    vehicle_id: np.ndarray
    timestamp: np.ndarray
    lat: np.ndarray
    lon: np.ndarray
    readings: dict[str, np.ndarray] = field(default_factory=dict)
    skipped: int = 0

    def __len__(self) -> int:
        return len(self.timestamp)

    def __iter__(self) -> Iterator[TrajectoryRecord]:
        names = list(self.readings)
        for i in range(len(self)):
            rd = {}
            for n in names:
                val = self.readings[n][i]
                if not np.isnan(val):
                    rd[n] = float(val)
            yield TrajectoryRecord(
                str(self.vehicle_id[i]),
                float(self.timestamp[i]),
                float(self.lat[i]),
                float(self.lon[i]),
                rd,
            )

    @property
    def pollutants(self) -> list[str]:
        return list(self.readings)

    @classmethod
    def from_records(cls, records: Iterable[TrajectoryRecord]) -> "TrajectoryTable":
        records = list(records)
        names: list[str] = []
        for r in records:
            for k in r.readings:
                if k not in names:
                    names.append(k)
        readings = {
            n: np.array([r.readings.get(n, np.nan) for r in records], dtype=float) for n in names
        }
        return cls(
            vehicle_id=np.array([r.vehicle_id for r in records], dtype=str),
            timestamp=np.array([r.timestamp for r in records], dtype=float),
            lat=np.array([r.lat for r in records], dtype=float),
            lon=np.array([r.lon for r in records], dtype=float),
            readings=readings,
        )


def _as_table(records) -> TrajectoryTable:
    if isinstance(records, TrajectoryTable):
        return records
    return TrajectoryTable.from_records(records)


def _parse_iso(text: str) -> float:
    if text.endswith("Z"):
        text = text[:-1] + "+00:00"
    dt = datetime.fromisoformat(text)
    if dt.tzinfo is None:
        dt = dt.replace(tzinfo=timezone.utc)
    return dt.timestamp()


def _detect_timestamp_parser(sample: str):
    try:
        float(sample)
        return float
    except ValueError:
        _parse_iso(sample)  # raises if neither format
        return _parse_iso


def parse_trajectories(
    path: str | Path,
    schema: Mapping[str, str] | None = None,
    delimiter: str = ",",
    pollutants: Iterable[str] | None = None,
) -> TrajectoryTable:
    """Read a delimited trajectory file.

    ``schema`` maps the logical names ``vehicle_id``, ``timestamp``, ``lat`` and ``lon``
    to header names. Every other column is treated as a pollutant reading unless
    ``pollutants`` narrows the set. Timestamps are epoch seconds or ISO-8601; the format
    is detected once from the first data row. Malformed rows are skipped and counted
    in ``TrajectoryTable.skipped``.
    """
    mapping = {k: k for k in MANDATORY_COLUMNS}
    if schema:
        mapping.update(schema)

    with open(path, newline="") as fh:
        reader = csv.reader(fh, delimiter=delimiter)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise SchemaError(f"{path}: file has no header row") from None
        missing = [mapping[k] for k in MANDATORY_COLUMNS if mapping[k] not in header]
        if missing:
            raise SchemaError(f"{path}: missing mandatory column(s) {', '.join(missing)}")
        i_vid, i_ts, i_lat, i_lon = (header.index(mapping[k]) for k in MANDATORY_COLUMNS)
        used = {i_vid, i_ts, i_lat, i_lon}
        if pollutants is None:
            pcols = [(h, i) for i, h in enumerate(header) if i not in used and h]
        else:
            pcols = []
            for name in pollutants:
                if name not in header:
                    raise SchemaError(f"{path}: pollutant column {name!r} not in header")
                pcols.append((name, header.index(name)))
        ncols = len(header)

        vids: list[str] = []
        ts: list[float] = []
        lats: list[float] = []
        lons: list[float] = []
        reads: list[list[float]] = [[] for _ in pcols]
        skipped = 0
        parse_ts = None
        nan = math.nan
        isfinite = math.isfinite

        for row in reader:
            if not row or (len(row) == 1 and not row[0].strip()):
                continue
            if len(row) != ncols:
                skipped += 1
                continue
            try:
                if parse_ts is None:
                    parse_ts = _detect_timestamp_parser(row[i_ts].strip())
                stamp = parse_ts(row[i_ts].strip())
                la = float(row[i_lat])
                lo = float(row[i_lon])
                vid = row[i_vid].strip()
                if not vid or not isfinite(stamp):
                    raise ValueError
                if not (-90.0 <= la <= 90.0 and -180.0 <= lo <= 180.0):
                    raise ValueError
                vals = []
                for _, j in pcols:
                    cell = row[j].strip()
                    if cell:
                        v = float(cell)
                        if not (isfinite(v) and v >= 0.0):
                            raise ValueError
                        vals.append(v)
                    else:
                        vals.append(nan)
            except ValueError:
                skipped += 1
                continue
            vids.append(vid)
            ts.append(stamp)
            lats.append(la)
            lons.append(lo)
            for k, v in enumerate(vals):
                reads[k].append(v)

    if skipped:
        logger.info("%s: skipped %d malformed row(s)", path, skipped)
    return TrajectoryTable(
        vehicle_id=np.array(vids, dtype=str),
        timestamp=np.array(ts, dtype=float),
        lat=np.array(lats, dtype=float),
        lon=np.array(lons, dtype=float),
        readings={name: np.array(col, dtype=float) for (name, _), col in zip(pcols, reads)},
        skipped=skipped,
    )


def write_trajectories(table: TrajectoryTable, path: str | Path) -> None:
    """Write a table in the CSV layout read by :func:`parse_trajectories` (epoch timestamps)."""
    names = table.pollutants
    with open(path, "w", newline="") as fh:
        fh.write(",".join(["vehicle_id", "timestamp", "lat", "lon", *names]) + "\n")
        cols = [
            table.vehicle_id,
            [f"{int(x)}" for x in table.timestamp],
            [f"{x:.7f}" for x in table.lat],
            [f"{x:.7f}" for x in table.lon],
        ]
        for n in names:
            cols.append(["" if np.isnan(x) else f"{x:.3f}" for x in table.readings[n]])
        fh.writelines(",".join(parts) + "\n" for parts in zip(*cols))


@dataclass
class _Located:
    vehicle_ids: tuple[str, ...]
    vehicle: np.ndarray  # per record
    cell: np.ndarray  # flat g*T+t, per record
    day: np.ndarray  # relative day, per record
    ok: np.ndarray


def _locate_table(table: TrajectoryTable, index: SpatiotemporalIndex) -> _Located:
    spec = index.spec
    ids, inverse = np.unique(table.vehicle_id, return_inverse=True)
    g, t, local_day, ok = index.locate_many(table.lat, table.lon, table.timestamp)
    if index.start_day is not None:
        day = local_day - index.start_day
    elif ok.any():
        day = local_day - local_day[ok].min()
        ok = ok & (day < spec.n_days)
    else:
        day = np.zeros_like(local_day)
    cell = g * spec.n_intervals + t
    return _Located(tuple(str(v) for v in ids), inverse.astype(np.int64), cell, day, ok)


@dataclass
class VisitCounts:
    """Per-vehicle raw visit counts over the flattened ``G*T`` space.

    ``counts`` and ``day_presence`` are CSR matrices of shape ``(V, G*T)``.
    """

    vehicle_ids: tuple[str, ...]
    counts: sp.csr_matrix
    day_presence: sp.csr_matrix
    total_records: np.ndarray
    dropped: np.ndarray
    grid: GridSpec

    @property
    def n_vehicles(self) -> int:
        return len(self.vehicle_ids)

    @property
    def n_days(self) -> int:
        return self.grid.n_days

    def summary(self) -> dict:
        return {
            "vehicles": self.n_vehicles,
            "records": int(self.total_records.sum()),
            "binned": int(self.counts.sum()),
            "dropped_out_of_bounds": int(self.dropped.sum()),
            "degenerate_vehicles": int((self.counts.getnnz(axis=1) == 0).sum()),
        }


def bin_visits(records, index: SpatiotemporalIndex) -> VisitCounts:
    """Count in-bounds records per ``(vehicle, g, t)`` and distinct local days per cell."""
    table = _as_table(records)
    spec = index.spec
    loc = _locate_table(table, index)
    n_v, n_c, n_d = len(loc.vehicle_ids), spec.n_spacetime, spec.n_days

    total = np.bincount(loc.vehicle, minlength=n_v).astype(np.int64)
    dropped = np.bincount(loc.vehicle[~loc.ok], minlength=n_v).astype(np.int64)

    keys = loc.vehicle[loc.ok] * n_c + loc.cell[loc.ok]
    ukeys, cnt = np.unique(keys, return_counts=True)
    day_keys = np.unique(keys * n_d + loc.day[loc.ok])
    _, presence = np.unique(day_keys // n_d, return_counts=True)

    rows, cols = ukeys // n_c, ukeys % n_c
    counts = sp.csr_matrix((cnt.astype(np.int64), (rows, cols)), shape=(n_v, n_c))
    days = sp.csr_matrix((presence.astype(np.int32), (rows, cols)), shape=(n_v, n_c))
    return VisitCounts(loc.vehicle_ids, counts, days, total, dropped, spec)


@dataclass
class ReadingAggregate:
    """Sums and counts of one pollutant's readings per ``(vehicle, cell)``.

    Stored sparsely as sorted keys ``vehicle * n_cells + cell``, which lets any
    vehicle subset be aggregated to cell means without touching raw records.
    """

    pollutant: str
    vehicle_ids: tuple[str, ...]
    n_cells: int
    keys: np.ndarray
    sums: np.ndarray
    counts: np.ndarray

    def _vehicle_mask(self, vehicles) -> np.ndarray:
        if vehicles is None:
            return np.ones(len(self.keys), dtype=bool)
        sel = np.zeros(len(self.vehicle_ids), dtype=bool)
        sel[np.asarray(list(vehicles), dtype=np.int64)] = True
        return sel[self.keys // self.n_cells]

    def cell_totals(self, vehicles=None) -> tuple[np.ndarray, np.ndarray]:
        """Per-cell reading sum and count, restricted to vehicle indices ``vehicles``."""
        m = self._vehicle_mask(vehicles)
        cells = self.keys[m] % self.n_cells
        sums = np.bincount(cells, weights=self.sums[m], minlength=self.n_cells)
        counts = np.bincount(cells, weights=self.counts[m], minlength=self.n_cells)
        return sums, counts.astype(np.int64)

    def cell_mean(self, vehicles=None) -> np.ndarray:
        """Mean concentration per cell; NaN marks unobserved cells."""
        sums, counts = self.cell_totals(vehicles)
        out = np.full(self.n_cells, np.nan)
        obs = counts > 0
        out[obs] = sums[obs] / counts[obs]
        return out

    def vehicle_indices(self, ids: Iterable[str]) -> np.ndarray:
        lookup = {v: i for i, v in enumerate(self.vehicle_ids)}
        return np.array([lookup[v] for v in ids], dtype=np.int64)


def bin_readings(records, index: SpatiotemporalIndex, pollutant: str) -> ReadingAggregate:
    table = _as_table(records)
    if pollutant not in table.readings:
        raise EmptyAggregateError(f"pollutant {pollutant!r} not present in any record")
    loc = _locate_table(table, index)
    values = table.readings[pollutant]
    m = loc.ok & ~np.isnan(values)
    if not m.any():
        raise EmptyAggregateError(f"pollutant {pollutant!r} has no in-bounds readings")
    n_c = index.spec.n_spacetime
    keys = loc.vehicle[m] * n_c + loc.cell[m]
    ukeys, inv = np.unique(keys, return_inverse=True)
    sums = np.bincount(inv, weights=values[m], minlength=len(ukeys))
    counts = np.bincount(inv, minlength=len(ukeys)).astype(np.int64)
    return ReadingAggregate(pollutant, loc.vehicle_ids, n_c, ukeys, sums, counts)


def ingest_summary(table: TrajectoryTable, counts: VisitCounts) -> dict:
    """Skip/drop statistics emitted as JSON next to every ingest run."""
    out = {"rows_parsed": len(table), "rows_skipped": int(table.skipped)}
    out.update(counts.summary())
    out["grid"] = counts.grid.fingerprint()
    return out
