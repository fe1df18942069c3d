"""Glue between a scenario (in memory or on disk) and the selection/evaluation stages."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .grid import GridSpec, ReadingAggregate, VisitCounts, bin_readings, bin_visits, build_grid
from .visits import VisitModel, build_visit_model
from .weights import DEFAULT_FLOOR, FeatureTable, WeightField, build_weight_field, correlate_features

DEFAULT_TARGET = "PM2.5"


@dataclass
class Prepared:
    grid: GridSpec
    counts: VisitCounts
    model: VisitModel
    readings: dict[str, ReadingAggregate]
    static: FeatureTable | None = None
    dynamic: FeatureTable | None = None
    _weights: dict = field(default_factory=dict, repr=False)

    def correlations(self, pollutant: str = DEFAULT_TARGET) -> dict[str, float]:
        target = self.readings[pollutant]
        out = {}
        for table in (self.static, self.dynamic):
            if table is not None:
                out.update(correlate_features(table, target))
        return out

    def weights(self, variant: str = "full", pollutant: str = DEFAULT_TARGET,
                epsilon_floor: float = DEFAULT_FLOOR) -> WeightField:
        key = (variant, pollutant, epsilon_floor)
        if key not in self._weights:
            corr = {} if variant == "uniform" else self.correlations(pollutant)
            self._weights[key] = build_weight_field(
                self.static, self.dynamic, corr, variant, epsilon_floor,
                shape=(self.grid.n_cells, self.grid.n_intervals),
            )
        return self._weights[key]


def prepare_table(grid: GridSpec, table, static=None, dynamic=None, cost=None) -> Prepared:
    index = build_grid(grid)
    counts = bin_visits(table, index)
    readings = {p: bin_readings(table, index, p) for p in table.pollutants
                if not np.isnan(table.readings[p]).all()}
    return Prepared(grid, counts, build_visit_model(counts, cost), readings, static, dynamic)


def prepare_scenario(scn) -> Prepared:
    return prepare_table(scn.config.grid, scn.trajectories, scn.static_features, scn.dynamic_features)
