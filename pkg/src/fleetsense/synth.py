"""Synthetic desk-scale scenarios: trajectories, a latent pollutant field and context features.

Mobility is a reflected random walk whose step direction is pulled toward a
time-varying hotspot. With zero attraction the step kernel is symmetric, so the
uniform distribution over the domain is stationary and vehicle positions stay
uniform at every ping. Congestion is the ping density itself, which is what couples
the pollutant field to traffic.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field, replace
from datetime import date, datetime, timezone
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from .errors import ConfigurationError
from .grid import GridSpec, SpatiotemporalIndex, TrajectoryTable, write_grid_config, write_trajectories
from .weights import FeatureTable, write_features

logger = logging.getLogger(__name__)

POLLUTANTS = {
    # name: (baseline concentration, traffic sensitivity)
    "NO": (20.0, 1.4),
    "NO2": (40.0, 1.0),
    "PM2.5": (35.0, 0.8),
    "PM10": (60.0, 0.6),
}

STATIC_FEATURES = {
    # name: target Pearson r against the smooth spatial pollution component
    "building": 0.9,
    "road": 0.6,
    "vegetation": -0.7,
    "sky": 0.1,
}


@dataclass(frozen=True)
class ScenarioConfig:
    grid: GridSpec
    n_vehicles: int
    n_days: int
    seed: int = 0
    # mobility
    n_hotspots: int = 4
    hotspot_attraction: float = 1.5
    hotspot_radius_m: float = 700.0
    speed_m_per_min: float = 250.0
    ping_interval_minutes: int = 5
    shift_hours: float = 8.0
    activity_sigma: float = 0.8
    # field
    length_scale_cells: float = 2.5
    spatial_amplitude: float = 0.12
    traffic_coupling: float = 1.0
    noise_cv: float = 0.03
    # extra noise sd per unit congestion: traffic makes short-term readings fluctuate
    traffic_noise_cv: float = 0.3
    static_correlations: dict = field(default_factory=lambda: dict(STATIC_FEATURES))

    def __post_init__(self):
        if self.n_vehicles < 1 or self.n_days < 1 or self.n_hotspots < 1:
            raise ConfigurationError("vehicle, day and hotspot counts must be >= 1")
        if self.n_days != self.grid.n_days:
            raise ConfigurationError("scenario n_days must match grid n_days")
        if min(self.hotspot_attraction, self.noise_cv, self.traffic_noise_cv, self.traffic_coupling) < 0:
            raise ConfigurationError("attraction, coupling and noise must be non-negative")
        if self.ping_interval_minutes < 1 or 1440 % self.ping_interval_minutes:
            raise ConfigurationError("ping_interval_minutes must divide 1440")
        for r in self.static_correlations.values():
            if not -1 <= r <= 1:
                raise ConfigurationError("static feature correlations must lie in [-1, 1]")

    def to_dict(self) -> dict:
        d = asdict(self)
        g = self.grid
        d["grid"] = {
            "origin_lat": g.origin_lat, "origin_lon": g.origin_lon, "cell_size_m": g.cell_size_m,
            "n_rows": g.n_rows, "n_cols": g.n_cols,
            "time_interval_minutes": g.time_interval_minutes, "n_days": g.n_days,
            "utc_offset_minutes": g.utc_offset_minutes,
            "start_date": None if g.start_date is None else g.start_date.isoformat(),
            "n_domain_cells": g.n_domain_cells,
        }
        return d


def irregular_mask(n_rows: int, n_cols: int, n_cells: int) -> np.ndarray:
    """Boolean mask with exactly ``n_cells`` cells inside a lobed, roughly round outline."""
    if not 0 < n_cells <= n_rows * n_cols:
        raise ConfigurationError("mask cell count out of range")
    r, c = np.mgrid[0:n_rows, 0:n_cols]
    y = (r + 0.5 - n_rows / 2) / (n_rows / 2)
    x = (c + 0.5 - n_cols / 2) / (n_cols / 2)
    theta = np.arctan2(y, x)
    radius = 1.0 + 0.12 * np.sin(3 * theta) + 0.08 * np.cos(5 * theta + 1.0)
    score = (np.hypot(x, y) / radius).ravel()
    keep = np.argsort(score, kind="stable")[:n_cells]
    mask = np.zeros(n_rows * n_cols, dtype=bool)
    mask[keep] = True
    return mask.reshape(n_rows, n_cols)


_GZ_ORIGIN = (23.08, 113.22)


def scenario_presets(seed: int = 0) -> dict[str, ScenarioConfig]:
    start = date(2023, 3, 1)

    def grid(rows, cols, days, mask=None):
        return GridSpec(*_GZ_ORIGIN, 500.0, rows, cols, 60, days, 480, start, mask)

    return {
        "desk-small": ScenarioConfig(grid(8, 8, 3), n_vehicles=12, n_days=3, seed=seed,
                                     n_hotspots=2, speed_m_per_min=150.0),
        "desk-medium": ScenarioConfig(grid(20, 20, 7), n_vehicles=64, n_days=7, seed=seed),
        "guangzhou-shape": ScenarioConfig(
            grid(62, 62, 61, irregular_mask(62, 62, 3811)),
            n_vehicles=320, n_days=61, seed=seed, n_hotspots=8,
            hotspot_radius_m=1500.0, speed_m_per_min=200.0, ping_interval_minutes=10,
            length_scale_cells=5.0,
        ),
    }


def get_preset(name: str, seed: int = 0, **overrides) -> ScenarioConfig:
    presets = scenario_presets(seed)
    if name not in presets:
        raise ConfigurationError(f"unknown preset {name!r}; available: {', '.join(presets)}")
    cfg = presets[name]
    return replace(cfg, **overrides) if overrides else cfg


@dataclass
class Scenario:
    config: ScenarioConfig
    trajectories: TrajectoryTable
    latent: dict[str, np.ndarray]  # pollutant -> (G, T)
    static_features: FeatureTable
    dynamic_features: FeatureTable
    stats: dict


def _streams(seed: int):
    root = np.random.SeedSequence(seed)
    fleet, days, fld, noise, feats = root.spawn(5)
    return fleet, days, fld, noise, feats


def _hotspot_profile(n_hotspots: int, hours: np.ndarray) -> np.ndarray:
    """Relative pull of each hotspot by hour of day, shape (len(hours), K)."""
    peaks = 7.0 + 14.0 * np.arange(n_hotspots) / max(1, n_hotspots - 1) if n_hotspots > 1 else np.array([12.0])
    diff = np.abs(hours[:, None] - peaks[None, :])
    diff = np.minimum(diff, 24.0 - diff)
    return 0.15 + np.exp(-0.5 * (diff / 2.5) ** 2)


def _sample_in_domain(rng, n, width, height, inside, centers=None, radius=0.0):
    out = np.empty((n, 2))
    todo = np.arange(n)
    while todo.size:
        if centers is None:
            pts = rng.uniform([0, 0], [width, height], size=(todo.size, 2))
        else:
            pts = centers[todo] + rng.normal(0.0, radius, size=(todo.size, 2))
        ok = inside(pts)
        out[todo[ok]] = pts[ok]
        todo = todo[~ok]
    return out


def generate_trajectories(config: ScenarioConfig) -> tuple[TrajectoryTable, np.ndarray, np.ndarray]:
    """Simulate GPS pings. Returns the table plus each ping's flat cell and day index."""
    grid = config.grid
    index = SpatiotemporalIndex(grid)
    width, height = grid.n_cols * grid.cell_size_m, grid.n_rows * grid.cell_size_m
    margin = 1e-3
    mask2d = None if grid.domain_mask is None else grid.domain_mask.reshape(grid.n_rows, grid.n_cols)

    def inside(pts):
        x, y = pts[:, 0], pts[:, 1]
        ok = (x > margin) & (x < width - margin) & (y > margin) & (y < height - margin)
        if mask2d is not None:
            col = np.clip((x // grid.cell_size_m).astype(int), 0, grid.n_cols - 1)
            row = np.clip((y // grid.cell_size_m).astype(int), 0, grid.n_rows - 1)
            ok &= mask2d[row, col]
        return ok

    fleet_ss, days_ss, *_ = _streams(config.seed)
    rng = np.random.default_rng(fleet_ss)
    V, K = config.n_vehicles, config.n_hotspots
    hotspots = _sample_in_domain(rng, K, width, height, inside)
    activity = rng.lognormal(0.0, config.activity_sigma, size=V)
    participation = np.clip(0.25 + 0.5 * activity, 0.05, 1.0)
    affinity = rng.dirichlet(np.full(K, 0.6), size=V)
    jitter_s = rng.integers(0, 60, size=V)
    # every vehicle in the fleet drives on at least one day
    sure_day = rng.integers(0, config.n_days, size=V)
    a = config.hotspot_attraction
    p_hot = a / (1.0 + a)

    cadence = config.ping_interval_minutes
    steps = 1440 // cadence
    profile = _hotspot_profile(K, (np.arange(steps) * cadence) / 60.0)
    step_len = config.speed_m_per_min * cadence

    base_day = (grid.start_date or date(2023, 3, 1)) - date(1970, 1, 1)
    day0_utc = base_day.days * 86400 - grid.utc_offset_minutes * 60

    out_v, out_t, out_x, out_y, out_day = [], [], [], [], []
    for d, day_ss in enumerate(days_ss.spawn(config.n_days)):
        drng = np.random.default_rng(day_ss)
        active = (drng.random(V) < participation) | (sure_day == d)
        morning = drng.random(V) < 0.6
        start_h = np.where(morning, drng.normal(6.5, 1.2, V), drng.normal(15.0, 1.5, V))
        dur_h = np.clip(config.shift_hours * activity * drng.uniform(0.7, 1.3, V), 1.0, 16.0)
        start_step = np.clip((start_h * 60 / cadence).astype(int), 0, steps - 1)
        end_step = np.minimum(start_step + (dur_h * 60 / cadence).astype(int), steps)

        use_hot = drng.random(V) < p_hot
        home_hot = np.array([drng.choice(K, p=affinity[v]) for v in range(V)])
        pos = _sample_in_domain(drng, V, width, height, inside)
        if use_hot.any():
            near = _sample_in_domain(drng, int(use_hot.sum()), width, height, inside,
                                     centers=hotspots[home_hot[use_hot]],
                                     radius=config.hotspot_radius_m)
            pos[use_hot] = near
        target = home_hot.copy()

        for s in range(steps):
            live = active & (s >= start_step) & (s < end_step)
            if not live.any():
                continue
            ids = np.flatnonzero(live)
            n = ids.size
            # occasionally retarget toward a hotspot weighted by time of day and affinity
            switch = drng.random(n) < cadence / 45.0
            if switch.any():
                probs = affinity[ids[switch]] * profile[s]
                probs /= probs.sum(axis=1, keepdims=True)
                u = drng.random(int(switch.sum()))[:, None]
                target[ids[switch]] = (probs.cumsum(axis=1) < u).sum(axis=1).clip(0, K - 1)
            ang = drng.uniform(0, 2 * np.pi, n)
            direction = np.stack([np.cos(ang), np.sin(ang)], axis=1)
            if a > 0:
                to_t = hotspots[target[ids]] - pos[ids]
                dist = np.hypot(to_t[:, 0], to_t[:, 1])
                far = dist > config.hotspot_radius_m
                pull = np.zeros_like(to_t)
                pull[far] = to_t[far] / dist[far, None]
                direction = direction + a * pull
                norm = np.hypot(direction[:, 0], direction[:, 1])
                norm[norm == 0] = 1.0
                direction /= norm[:, None]
            length = step_len * drng.uniform(0.3, 1.0, n)
            new = pos[ids] + direction * length[:, None]
            # reflect at the bounding box, then reject moves leaving the domain mask
            new[:, 0] = _reflect(new[:, 0], margin, width - margin)
            new[:, 1] = _reflect(new[:, 1], margin, height - margin)
            ok = inside(new)
            pos[ids[ok]] = new[ok]

            out_v.append(ids)
            out_t.append(np.full(n, s * cadence))
            out_x.append(pos[ids, 0].copy())
            out_y.append(pos[ids, 1].copy())
            out_day.append(np.full(n, d))

    if out_v:
        v = np.concatenate(out_v)
        minute = np.concatenate(out_t)
        x = np.concatenate(out_x)
        y = np.concatenate(out_y)
        day = np.concatenate(out_day)
    else:
        v = minute = day = np.zeros(0, dtype=np.int64)
        x = y = np.zeros(0)
    # stable record order: vehicle, then time
    order = np.lexsort((minute, day, v))
    v, minute, x, y, day = v[order], minute[order], x[order], y[order], day[order]

    lat, lon = index.to_latlon(x, y)
    lat, lon = np.round(lat, 7), np.round(lon, 7)
    ts = (day0_utc + day * 86400 + minute * 60 + jitter_s[v]).astype(np.float64)
    width_id = max(4, len(str(V)))
    names = np.array([f"veh{i:0{width_id}d}" for i in range(V)])
    table = TrajectoryTable(names[v], ts, lat, lon, {})

    g, t, _, ok = index.locate_many(lat, lon, ts)
    cell = np.where(ok, g * grid.n_intervals + t, -1)
    return table, cell, day


def _reflect(x: np.ndarray, lo: float, hi: float) -> np.ndarray:
    span = hi - lo
    y = np.mod(x - lo, 2 * span)
    return lo + np.where(y > span, 2 * span - y, y)


def smooth_field(rng, n_rows: int, n_cols: int, length_scale: float) -> np.ndarray:
    """Zero-mean, unit-variance Gaussian-smoothed noise over the spatial grid."""
    raw = rng.standard_normal((n_rows, n_cols))
    sm = gaussian_filter(raw, sigma=length_scale, mode="reflect")
    sm = sm - sm.mean()
    sd = sm.std()
    return (sm / sd if sd > 0 else sm).ravel()


def congestion_index(cell: np.ndarray, n_spacetime: int, n_days: int) -> np.ndarray:
    """Ping density per (g, t) and day, scaled so the 99th percentile of busy cells is 1."""
    valid = cell >= 0
    dens = np.bincount(cell[valid], minlength=n_spacetime).astype(float) / n_days
    busy = dens[dens > 0]
    if busy.size == 0:
        return dens
    return np.minimum(dens / np.quantile(busy, 0.99), 1.0)


def generate_truth_field(config: ScenarioConfig, table: TrajectoryTable, cell: np.ndarray):
    """Attach noisy readings to ``table`` in place and return latent fields and features."""
    grid = config.grid
    G, T = grid.n_cells, grid.n_intervals
    _, _, field_ss, noise_ss, feat_ss = _streams(config.seed)
    frng = np.random.default_rng(field_ss)
    spatial = smooth_field(frng, grid.n_rows, grid.n_cols, config.length_scale_cells)
    congestion = congestion_index(cell, G * T, config.n_days)

    latent = {}
    for name, (base, sens) in POLLUTANTS.items():
        lvl = 1.0 + config.spatial_amplitude * spatial[:, None] \
            + config.traffic_coupling * sens * congestion.reshape(G, T)
        latent[name] = base * np.maximum(lvl, 0.0)

    nrng = np.random.default_rng(noise_ss)
    clamped = {}
    valid = cell >= 0
    for name, (base, sens) in POLLUTANTS.items():
        vals = np.full(len(table), np.nan)
        mean = latent[name].ravel()[cell[valid]]
        sd = base * (config.noise_cv + config.traffic_noise_cv * sens * congestion[cell[valid]])
        noisy = mean + sd * nrng.standard_normal(mean.size)
        clamped[name] = int((noisy < 0).sum())
        vals[valid] = np.maximum(noisy, 0.0)
        table.readings[name] = vals

    xrng = np.random.default_rng(feat_ss)
    cols = []
    for rho in config.static_correlations.values():
        f = rho * spatial + np.sqrt(1.0 - rho ** 2) * xrng.standard_normal(G)
        cols.append((f - f.min()) / (f.max() - f.min()))
    static = FeatureTable("static", list(config.static_correlations), np.stack(cols, axis=1))
    dynamic = FeatureTable("dynamic", ["congestion"], congestion.reshape(G, T, 1))
    return latent, static, dynamic, {"clamped_readings": clamped}


def generate_scenario(config: ScenarioConfig) -> Scenario:
    table, cell, _ = generate_trajectories(config)
    latent, static, dynamic, stats = generate_truth_field(config, table, cell)
    stats = {
        "pings": len(table),
        "vehicles_with_pings": int(len(np.unique(table.vehicle_id))),
        **stats,
    }
    return Scenario(config, table, latent, static, dynamic, stats)


def write_scenario(scn: Scenario, out_dir) -> dict[str, Path]:
    """Write every file a pipeline run needs; returns the written paths by role."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    grid = scn.config.grid
    paths = {
        "grid": out / "grid.cfg",
        "trajectories": out / "trajectories.csv",
        "static_features": out / "static_features.csv",
        "dynamic_features": out / "dynamic_features.csv",
        "latent": out / "latent.csv",
        "scenario": out / "scenario.json",
    }
    write_grid_config(grid, paths["grid"])
    if grid.domain_mask is not None:
        paths["mask"] = out / "domain_mask.txt"
    write_trajectories(scn.trajectories, paths["trajectories"])
    write_features(scn.static_features, paths["static_features"])
    write_features(scn.dynamic_features, paths["dynamic_features"])
    names = list(scn.latent)
    with open(paths["latent"], "w") as fh:
        fh.write(",".join(["g", "t", *names]) + "\n")
        for g in range(grid.n_cells):
            for t in range(grid.n_intervals):
                fh.write(",".join([str(g), str(t), *(f"{scn.latent[n][g, t]:.6f}" for n in names)]) + "\n")
    with open(paths["scenario"], "w") as fh:
        json.dump({"config": scn.config.to_dict(), "stats": scn.stats}, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return paths
