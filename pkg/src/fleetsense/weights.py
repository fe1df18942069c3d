"""Spatiotemporal weight fields built from tabular context features.

Static features (one row per spatial cell) and dynamic features (one row per
``(g, t)``) are correlated against observed pollutant means. Each feature is min-max
scaled and blended with weight ``|r|``; the spatial and temporal scores are then
combined per variant and rescaled into ``[epsilon_floor, 1]``.
"""

from __future__ import annotations

import csv
import logging
import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DimensionError, InsufficientDataError, SchemaError, ValidationError
from .grid import ReadingAggregate

logger = logging.getLogger(__name__)

VARIANTS = ("uniform", "spatial_only", "temporal_only", "full")
DEFAULT_FLOOR = 0.01


@dataclass
class FeatureTable:
    kind: str  # "static" or "dynamic"
    feature_names: list[str]
    values: np.ndarray  # static: (G, K); dynamic: (G, T, K)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.kind not in ("static", "dynamic"):
            raise ValidationError(f"unknown feature table kind {self.kind!r}")
        expect = 2 if self.kind == "static" else 3
        if self.values.ndim != expect or self.values.shape[-1] != len(self.feature_names):
            raise DimensionError(
                f"{self.kind} table has shape {self.values.shape} for {len(self.feature_names)} features"
            )
        if not np.all(np.isfinite(self.values)):
            raise ValidationError("feature values must be finite")

    def column(self, name: str) -> np.ndarray:
        return self.values[..., self.feature_names.index(name)]


def read_static_features(path, n_cells: int) -> FeatureTable:
    rows = _read_numeric_csv(path, ("g",))
    names = rows["names"]
    vals = np.full((n_cells, len(names)), np.nan)
    for key, v in zip(rows["keys"], rows["values"]):
        g = key[0]
        if not 0 <= g < n_cells:
            raise ValidationError(f"{path}: cell {g} outside grid")
        vals[g] = v
    gaps = np.flatnonzero(np.isnan(vals).any(axis=1))
    if gaps.size:
        raise ValidationError(f"{path}: no row for cell(s) {gaps[:10].tolist()}")
    return FeatureTable("static", names, vals)


def read_dynamic_features(path, n_cells: int, n_intervals: int) -> FeatureTable:
    rows = _read_numeric_csv(path, ("g", "t"))
    names = rows["names"]
    vals = np.full((n_cells, n_intervals, len(names)), np.nan)
    for (g, t), v in zip(rows["keys"], rows["values"]):
        if not (0 <= g < n_cells and 0 <= t < n_intervals):
            raise ValidationError(f"{path}: cell ({g}, {t}) outside grid")
        vals[g, t] = v
    gaps = np.argwhere(np.isnan(vals).any(axis=2))
    if len(gaps):
        raise ValidationError(f"{path}: no row for (g, t) {[tuple(x) for x in gaps[:10].tolist()]}")
    return FeatureTable("dynamic", names, vals)


def _read_numeric_csv(path, key_cols):
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(header[: len(key_cols)]) != key_cols:
            raise SchemaError(f"{path}: header must start with {','.join(key_cols)}")
        names = header[len(key_cols):]
        keys, values = [], []
        for row in reader:
            if not row:
                continue
            keys.append(tuple(int(x) for x in row[: len(key_cols)]))
            values.append([float(x) for x in row[len(key_cols):]])
    return {"names": names, "keys": keys, "values": values}


def write_features(table: FeatureTable, path) -> None:
    with open(path, "w") as fh:
        if table.kind == "static":
            fh.write(",".join(["g", *table.feature_names]) + "\n")
            for g, row in enumerate(table.values):
                fh.write(",".join([str(g), *(f"{x:.6g}" for x in row)]) + "\n")
        else:
            fh.write(",".join(["g", "t", *table.feature_names]) + "\n")
            G, T, _ = table.values.shape
            for g in range(G):
                for t in range(T):
                    fh.write(",".join([str(g), str(t), *(f"{x:.6g}" for x in table.values[g, t])]) + "\n")


def _pearson(x: np.ndarray, y: np.ndarray) -> float:
    xc = x - x.mean()
    yc = y - y.mean()
    sx = np.sqrt(np.sum(xc * xc))
    sy = np.sqrt(np.sum(yc * yc))
    if sx == 0 or sy == 0:
        return 0.0
    return float(np.clip(np.sum(xc * yc) / (sx * sy), -1.0, 1.0))


def correlate_features(features: FeatureTable, target: ReadingAggregate) -> dict[str, float]:
    """Pearson r of each feature against the observed mean concentration.

    Static features pair with per-cell means pooled over all intervals; dynamic
    features pair with per-``(g, t)`` means. Unobserved cells are left out.
    """
    sums, counts = target.cell_totals()
    if features.kind == "static":
        G = features.values.shape[0]
        if target.n_cells % G:
            raise DimensionError("static table does not match the reading grid")
        T = target.n_cells // G
        sums, counts = sums.reshape(G, T).sum(axis=1), counts.reshape(G, T).sum(axis=1)
        feats = features.values
    else:
        feats = features.values.reshape(-1, features.values.shape[-1])
        if feats.shape[0] != target.n_cells:
            raise DimensionError("dynamic table does not match the reading grid")
    obs = counts > 0
    if obs.sum() < 3:
        raise InsufficientDataError(f"only {int(obs.sum())} observed points; need at least 3")
    y = sums[obs] / counts[obs]
    return {name: _pearson(feats[obs, k], y) for k, name in enumerate(features.feature_names)}


def _minmax(x: np.ndarray) -> np.ndarray:
    lo, hi = x.min(), x.max()
    if hi == lo:
        return np.zeros_like(x)
    return (x - lo) / (hi - lo)


def _blend(table: FeatureTable, correlations: dict[str, float]) -> np.ndarray:
    out = np.zeros(table.values.shape[:-1])
    for k, name in enumerate(table.feature_names):
        if name not in correlations:
            raise ValidationError(f"no correlation supplied for feature {name!r}")
        out += abs(correlations[name]) * _minmax(table.values[..., k])
    return out


@dataclass
class WeightField:
    w: np.ndarray  # (G, T)
    variant: str
    epsilon_floor: float = DEFAULT_FLOOR

    def __post_init__(self):
        self.w = np.asarray(self.w, dtype=np.float64)
        if self.w.ndim != 2:
            raise DimensionError("weight field must be indexed [g][t]")
        if self.variant not in VARIANTS:
            raise ValidationError(f"unknown weight variant {self.variant!r}")
        if np.any(self.w > 1) or np.any(self.w < self.epsilon_floor) or not np.all(np.isfinite(self.w)):
            raise ValidationError(f"weights must lie in [{self.epsilon_floor}, 1]")

    @property
    def vector(self) -> np.ndarray:
        return self.w.ravel()

    @classmethod
    def uniform(cls, n_cells: int, n_intervals: int, epsilon_floor: float = DEFAULT_FLOOR):
        return cls(np.ones((n_cells, n_intervals)), "uniform", epsilon_floor)


def build_weight_field(
    static_features: FeatureTable | None,
    dynamic_features: FeatureTable | None,
    correlations: dict[str, float],
    variant: str = "full",
    epsilon_floor: float = DEFAULT_FLOOR,
    shape: tuple[int, int] | None = None,
) -> WeightField:
    if variant not in VARIANTS:
        raise ValidationError(f"unknown variant {variant!r}; choose from {', '.join(VARIANTS)}")
    if not 0 < epsilon_floor < 1:
        raise ValidationError("epsilon_floor must lie in (0, 1)")
    if shape is None:
        if dynamic_features is None:
            raise DimensionError("shape is required without a dynamic feature table")
        shape = dynamic_features.values.shape[:2]
    G, T = shape
    if variant == "uniform":
        return WeightField(np.ones((G, T)), variant, epsilon_floor)

    s = d = None
    if variant in ("spatial_only", "full"):
        if static_features is None:
            raise ValidationError(f"variant {variant} needs static features")
        s = _blend(static_features, correlations)
        if s.shape != (G,):
            raise DimensionError("static features do not match the grid")
    if variant in ("temporal_only", "full"):
        if dynamic_features is None:
            raise ValidationError(f"variant {variant} needs dynamic features")
        d = _blend(dynamic_features, correlations)
        if d.shape != (G, T):
            raise DimensionError("dynamic features do not match the grid")

    if variant == "spatial_only":
        raw = np.repeat(s[:, None], T, axis=1)
    elif variant == "temporal_only":
        raw = d
    else:
        raw = s[:, None] * d

    lo, hi = raw.min(), raw.max()
    if hi == lo:
        if hi == 0:
            logger.warning("raw %s weight field is all zero; falling back to uniform", variant)
            return WeightField(np.ones((G, T)), "uniform", epsilon_floor)
        return WeightField(np.ones((G, T)), variant, epsilon_floor)
    w = np.clip(epsilon_floor + (1.0 - epsilon_floor) * (raw - lo) / (hi - lo), epsilon_floor, 1.0)
    # pin the extremes so rounding cannot move them off floor / 1
    w[raw == lo] = epsilon_floor
    w[raw == hi] = 1.0
    return WeightField(w, variant, epsilon_floor)


_HEADER = re.compile(r"#\s*variant=(\S+)\s+epsilon_floor=(\S+)\s+n_cells=(\d+)\s+n_intervals=(\d+)")


def save_weight_field(field: WeightField, path) -> None:
    G, T = field.w.shape
    with open(path, "w") as fh:
        fh.write(f"# variant={field.variant} epsilon_floor={float(field.epsilon_floor)!r} "
                 f"n_cells={G} n_intervals={T}\n")
        fh.write("g,t,w\n")
        for g in range(G):
            for t in range(T):
                fh.write(f"{g},{t},{float(field.w[g, t])!r}\n")


def load_weight_field(path) -> WeightField:
    path = Path(path)
    with open(path) as fh:
        m = _HEADER.match(fh.readline())
        if not m:
            raise SchemaError(f"{path}: missing '# variant=... epsilon_floor=...' header line")
        variant, floor = m.group(1), float(m.group(2))
        G, T = int(m.group(3)), int(m.group(4))
        if fh.readline().strip() != "g,t,w":
            raise SchemaError(f"{path}: expected column header 'g,t,w'")
        w = np.full((G, T), np.nan)
        for lineno, line in enumerate(fh, 3):
            if not line.strip():
                continue
            g, t, val = line.split(",")
            g, t, val = int(g), int(t), float(val)
            if not (0 <= g < G and 0 <= t < T):
                raise ValidationError(f"{path}:{lineno}: cell ({g}, {t}) outside {G}x{T}")
            if not 0 <= val <= 1:
                raise ValidationError(f"{path}:{lineno}: weight {val} outside [0, 1]")
            w[g, t] = val
    gaps = np.argwhere(np.isnan(w))
    if len(gaps):
        shown = ", ".join(f"(g={g}, t={t})" for g, t in gaps[:10])
        raise ValidationError(f"{path}: missing weights for {len(gaps)} cell(s): {shown}")
    return WeightField(w, variant, floor)
