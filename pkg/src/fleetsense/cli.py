"""``fleetsense`` command line: generate, ingest, build-weights, select, evaluate, sweep, ablation.

Every run writes ``manifest.json`` into its output directory before anything else and
fills in output paths and wall time once the run has finished. ``fleetsense rerun``
replays a manifest into a fresh directory.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .errors import FleetSenseError
from .evaluation import (
    evaluate_selection,
    format_ablation_table,
    format_utility_table,
    run_ablation,
    summarize_metric,
    sweep_fleet_sizes,
    write_cell_mape,
)
from .grid import bin_readings, bin_visits, build_grid, ingest_summary, parse_trajectories, read_grid_config
from .pipeline import DEFAULT_TARGET, Prepared
from .selection import DEFAULT_TSUB_BETA, STRATEGIES, STRATEGY_LABELS, FleetSelection, SelectionProblem, solve
from .synth import generate_scenario, get_preset, scenario_presets, write_scenario
from .visits import load_cache, load_costs, save_cache
from .weights import (
    DEFAULT_FLOOR,
    VARIANTS,
    WeightField,
    build_weight_field,
    correlate_features,
    load_weight_field,
    read_dynamic_features,
    read_static_features,
    save_weight_field,
)

logger = logging.getLogger("fleetsense")

OUTPUT_ROOT_ENV = "FLEETSENSE_OUTPUT_ROOT"
MANIFEST = "manifest.json"

# argument names holding input files; hashed into the manifest
_INPUT_KEYS = ("trajectories", "grid_config", "costs", "cache", "weights", "static", "dynamic", "selection")
# arguments that do not affect data outputs
_RUNTIME_KEYS = ("out", "force", "jobs", "verbose", "command", "argv")


class UsageError(FleetSenseError):
    pass


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_json(path: Path, obj) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


class Run:
    """Output directory plus its manifest."""

    def __init__(self, args: argparse.Namespace):
        self.args = args
        self.t0 = time.perf_counter()
        root = Path(os.environ.get(OUTPUT_ROOT_ENV, "runs"))
        self.out = Path(args.out) if args.out else root / args.command
        if self.out.exists() and any(self.out.iterdir()) and not args.force:
            raise UsageError(f"output directory {self.out} is not empty; pass --force to overwrite")
        self.out.mkdir(parents=True, exist_ok=True)
        self.outputs: dict[str, str] = {}
        config = {k: v for k, v in vars(args).items() if k not in _RUNTIME_KEYS}
        for key in _INPUT_KEYS:
            if config.get(key):
                config[key] = str(Path(config[key]).resolve())
        self.manifest = {
            "subcommand": args.command,
            "argv": list(getattr(args, "argv", sys.argv[1:])),
            "config": config,
            "inputs": {k: _sha256(Path(config[k])) for k in _INPUT_KEYS if config.get(k)},
            "seed": config.get("seed"),
            "version": __version__,
            "jobs": args.jobs,
            "outputs": {},
            "status": "running",
            "wall_time": None,
        }
        self._flush()

    def path(self, role: str, name: str) -> Path:
        p = self.out / name
        self.outputs[role] = name
        return p

    def _flush(self) -> None:
        _write_json(self.out / MANIFEST, self.manifest)

    def finish(self) -> None:
        for role, name in self.outputs.items():
            p = self.out / name
            if not p.is_file():
                raise FleetSenseError(f"expected output {p} was not written")
            if p.suffix == ".json":
                with open(p) as fh:
                    json.load(fh)
        self.manifest["outputs"] = dict(sorted(self.outputs.items()))
        self.manifest["status"] = "ok"
        self.manifest["wall_time"] = round(time.perf_counter() - self.t0, 3)
        self._flush()


def _parse_sizes(text: str) -> list[int]:
    sizes: list[int] = []
    for part in text.split(","):
        part = part.strip()
        if ".." in part:
            lo, hi = part.split("..")
            sizes.extend(range(int(lo), int(hi) + 1))
        elif part:
            sizes.append(int(part))
    if not sizes or min(sizes) < 1:
        raise UsageError(f"bad size list {text!r}; use e.g. 4..12 or 8,16,32")
    return sizes


def _parse_list(text: str, allowed, what: str) -> list[str]:
    items = [x.strip() for x in text.split(",") if x.strip()]
    bad = [x for x in items if x not in allowed]
    if bad or not items:
        raise UsageError(f"unknown {what} {bad}; choose from {', '.join(allowed)}")
    return items


def _load_weights(args, cache) -> WeightField:
    grid = cache.counts.grid
    if not args.weights:
        return WeightField.uniform(grid.n_cells, grid.n_intervals)
    w = load_weight_field(args.weights)
    if w.w.shape != (grid.n_cells, grid.n_intervals):
        raise FleetSenseError(f"weight field {w.w.shape} does not match the cached grid "
                              f"({grid.n_cells}, {grid.n_intervals})")
    return w


# -- subcommands ------------------------------------------------------------

def cmd_generate(args) -> None:
    run = Run(args)
    scn = generate_scenario(get_preset(args.preset, seed=args.seed))
    paths = write_scenario(scn, run.out)
    for role, p in paths.items():
        run.path(role, p.name)
    s = scn.stats
    print(f"{args.preset} (seed {args.seed}): {s['pings']} pings from "
          f"{s['vehicles_with_pings']} vehicles -> {run.out}")
    run.finish()


def cmd_ingest(args) -> None:
    grid = read_grid_config(args.grid_config)
    run = Run(args)
    table = parse_trajectories(args.trajectories)
    index = build_grid(grid)
    counts = bin_visits(table, index)
    readings = {}
    for p in table.pollutants:
        if not np.isnan(table.readings[p]).all():
            readings[p] = bin_readings(table, index, p)
    cost = load_costs(args.costs, counts.vehicle_ids) if args.costs else None
    save_cache(run.path("cache", "cache.npz"), counts, readings, cost)
    stats = ingest_summary(table, counts)
    stats["pollutants"] = list(readings)
    _write_json(run.path("stats", "ingest_stats.json"), stats)
    print(f"rows parsed   {stats['rows_parsed']}")
    print(f"rows skipped  {stats['rows_skipped']}")
    for k, v in stats.items():
        if k not in ("rows_parsed", "rows_skipped", "pollutants", "grid"):
            print(f"{k:<13} {v}")
    run.finish()


def cmd_build_weights(args) -> None:
    cache = load_cache(args.cache)
    grid = cache.counts.grid
    static = read_static_features(args.static, grid.n_cells) if args.static else None
    dynamic = read_dynamic_features(args.dynamic, grid.n_cells, grid.n_intervals) if args.dynamic else None
    run = Run(args)
    corr: dict[str, float] = {}
    if args.variant != "uniform":
        if args.pollutant not in cache.readings:
            raise FleetSenseError(f"pollutant {args.pollutant!r} not in cache ({', '.join(cache.readings)})")
        for table in (static, dynamic):
            if table is not None:
                corr.update(correlate_features(table, cache.readings[args.pollutant]))
    field = build_weight_field(static, dynamic, corr, args.variant, args.epsilon_floor,
                               shape=(grid.n_cells, grid.n_intervals))
    save_weight_field(field, run.path("weights", "weights.csv"))
    _write_json(run.path("correlations", "correlations.json"),
                {"pollutant": args.pollutant, "variant": field.variant, "correlations": corr})
    for name, r in corr.items():
        print(f"{name:<16} r = {r:+.3f}")
    print(f"variant {field.variant}: w in [{field.w.min():.3f}, {field.w.max():.3f}], mean {field.w.mean():.3f}")
    run.finish()


def cmd_select(args) -> None:
    cache = load_cache(args.cache)
    model = cache.visit_model()
    weights = _load_weights(args, cache)
    problem = SelectionProblem(model, weights, args.budget, args.strategy, args.seed,
                               args.tsub_beta, args.spend_full_budget)
    run = Run(args)
    sel = solve(problem, lazy=args.lazy)
    _write_json(run.path("selection", "selection.json"), sel.to_dict())
    print(f"{STRATEGY_LABELS[sel.strategy]}: {len(sel.selected)} vehicles, cost {sel.total_cost:g} "
          f"of {sel.budget:g}, utility {sel.final_utility:.4f} ({sel.status})")
    for k, (v, g) in enumerate(zip(sel.selected, sel.per_step_gain), 1):
        print(f"{k:>4}  {v}  gain {g:.4f}")
    run.finish()


def _report_table(reports) -> str:
    head = ("pollutant", "size", "rmse", "mape %", "coverage", "status")
    rows = [head]
    for r in reports:
        rows.append((r.pollutant, str(r.fleet_size),
                     "-" if r.rmse is None else f"{r.rmse:.4f}",
                     "-" if r.mape is None else f"{r.mape:.3f}",
                     f"{r.coverage_ratio:.4f}", r.status))
    widths = [max(len(row[i]) for row in rows) for i in range(len(head))]
    return "\n".join("  ".join(c.ljust(w) for c, w in zip(row, widths)).rstrip() for row in rows)


def cmd_evaluate(args) -> None:
    cache = load_cache(args.cache)
    with open(args.selection) as fh:
        sel = FleetSelection.from_dict(json.load(fh))
    unknown = set(sel.selected) - set(cache.counts.vehicle_ids)
    if unknown:
        raise FleetSenseError(f"selection names vehicles missing from the cache: {sorted(unknown)[:5]}")
    if not cache.readings:
        raise FleetSenseError("cache holds no pollutant readings to evaluate against")
    run = Run(args)
    reports = evaluate_selection(sel, cache.readings, pooled=args.pooled)
    _write_json(run.path("report", "report.json"),
                {"pooled": args.pooled, "reports": [r.to_dict() for r in reports]})
    T = cache.counts.grid.n_intervals
    for r in reports:
        safe = r.pollutant.replace(".", "_")
        write_cell_mape(r, T, run.path(f"cell_mape_{r.pollutant}", f"cell_mape_{safe}.csv"))
    print(_report_table(reports))
    run.finish()


def cmd_sweep(args) -> None:
    cache = load_cache(args.cache)
    model = cache.visit_model()
    weights = _load_weights(args, cache)
    sizes = _parse_sizes(args.sizes)
    strategies = _parse_list(args.strategies, STRATEGIES, "strategies")
    run = Run(args)
    result = sweep_fleet_sizes(model, weights, cache.readings, sizes, strategies,
                               seeds=range(args.seeds), tsub_beta=args.tsub_beta, jobs=args.jobs)
    _write_sweep_csv(run.path("reports", "sweep.csv"), result.reports)
    utility = {s: {str(n): {"mean": m, "sd": sd} for n, (m, sd) in row.items()}
               for s, row in result.utility_table().items()}
    metrics = {p: {s: {str(n): v for n, v in row.items()} for s, row in summarize_metric(result, p).items()}
               for p in cache.readings}
    _write_json(run.path("summary", "sweep.json"),
                {"sizes": result.sizes, "utility": utility, "mape": metrics, "notes": result.notes})
    for note in result.notes:
        print(f"note: {note}")
    print(format_utility_table(result))
    run.finish()


def _write_sweep_csv(path: Path, reports) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["strategy", "fleet_size", "seed", "pollutant", "rmse", "mape", "coverage_ratio", "utility"])
        for r in reports:
            w.writerow([r.strategy, r.fleet_size, r.seed, r.pollutant,
                        "" if r.rmse is None else repr(r.rmse),
                        "" if r.mape is None else repr(r.mape),
                        repr(r.coverage_ratio), repr(r.utility)])


def cmd_ablation(args) -> None:
    cache = load_cache(args.cache)
    grid = cache.counts.grid
    static = read_static_features(args.static, grid.n_cells)
    dynamic = read_dynamic_features(args.dynamic, grid.n_cells, grid.n_intervals)
    variants = _parse_list(args.variants, VARIANTS, "variants")
    strategies = _parse_list(args.strategies, STRATEGIES, "strategies")
    sizes = _parse_sizes(args.sizes)
    run = Run(args)
    prepared = Prepared(grid, cache.counts, cache.visit_model(), cache.readings, static, dynamic)
    result = run_ablation(prepared, variants, sizes, strategies, range(args.seeds), args.pollutant, args.jobs)
    table = result.table(args.pollutant)
    rows = [{"variant": v, "strategy": s, "fleet_size": n, **stats} for (v, s, n), stats in table.items()]
    _write_json(run.path("summary", "ablation.json"),
                {"pollutant": args.pollutant, "metric": "mape", "rows": rows})
    with open(run.path("reports", "ablation.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["variant", "strategy", "fleet_size", "seed", "pollutant", "rmse", "mape",
                    "coverage_ratio", "utility"])
        for variant, sw in result.sweeps.items():
            for r in sw.reports:
                w.writerow([variant, r.strategy, r.fleet_size, r.seed, r.pollutant,
                            "" if r.rmse is None else repr(r.rmse),
                            "" if r.mape is None else repr(r.mape),
                            repr(r.coverage_ratio), repr(r.utility)])
    print(format_ablation_table(result, args.pollutant))
    run.finish()


def cmd_rerun(args) -> None:
    with open(args.manifest) as fh:
        manifest = json.load(fh)
    if manifest.get("subcommand") not in _HANDLERS or manifest["subcommand"] == "rerun":
        raise FleetSenseError(f"{args.manifest}: not a replayable manifest")
    for key, digest in manifest.get("inputs", {}).items():
        path = Path(manifest["config"][key])
        if not path.is_file() or _sha256(path) != digest:
            raise FleetSenseError(f"input {key} ({path}) is missing or changed since the original run")
    ns = argparse.Namespace(**manifest["config"])
    ns.command = manifest["subcommand"]
    ns.out, ns.force, ns.jobs, ns.verbose = args.out, args.force, args.jobs, args.verbose
    ns.argv = manifest.get("argv", [])
    _HANDLERS[ns.command](ns)


_HANDLERS = {
    "generate": cmd_generate,
    "ingest": cmd_ingest,
    "build-weights": cmd_build_weights,
    "select": cmd_select,
    "evaluate": cmd_evaluate,
    "sweep": cmd_sweep,
    "ablation": cmd_ablation,
    "rerun": cmd_rerun,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-o", "--out", help=f"output directory (default ${OUTPUT_ROOT_ENV}/<command>)")
    common.add_argument("--force", action="store_true", help="write into a non-empty output directory")
    common.add_argument("--jobs", type=int, default=os.cpu_count() or 1, help="worker cap")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="fleetsense", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    presets = sorted(scenario_presets())
    p = sub.add_parser("generate", parents=[common], help="write a synthetic scenario directory")
    p.add_argument("--preset", required=True, choices=presets)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("ingest", parents=[common], help="bin trajectories into a visit cache")
    p.add_argument("trajectories")
    p.add_argument("grid_config")
    p.add_argument("--costs", help="CSV vehicle_id,cost (default: unit costs)")

    p = sub.add_parser("build-weights", parents=[common], help="correlate features and write a weight field")
    p.add_argument("--cache", required=True)
    p.add_argument("--static")
    p.add_argument("--dynamic")
    p.add_argument("--variant", choices=VARIANTS, default="full")
    p.add_argument("--pollutant", default=DEFAULT_TARGET)
    p.add_argument("--epsilon-floor", type=float, default=DEFAULT_FLOOR)

    p = sub.add_parser("select", parents=[common], help="pick a fleet under a budget")
    p.add_argument("--cache", required=True)
    p.add_argument("--weights", help="weight field CSV (default: uniform)")
    p.add_argument("--strategy", choices=STRATEGIES, default="optifleet")
    p.add_argument("--budget", type=float, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--lazy", action="store_true", help="lazy-greedy evaluation (optifleet only)")
    p.add_argument("--spend-full-budget", action="store_true")
    p.add_argument("--tsub-beta", type=float, default=DEFAULT_TSUB_BETA)

    p = sub.add_parser("evaluate", parents=[common], help="score a selection against full-fleet truth")
    p.add_argument("--cache", required=True)
    p.add_argument("--selection", required=True)
    p.add_argument("--pooled", action="store_true", help="weight MAPE/RMSE by readings per cell")

    p = sub.add_parser("sweep", parents=[common], help="utility and error across fleet sizes")
    p.add_argument("--cache", required=True)
    p.add_argument("--weights")
    p.add_argument("--sizes", required=True, help="e.g. 4..12 or 8,16,32")
    p.add_argument("--strategies", default="ra,tsub,optifleet,improved")
    p.add_argument("--seeds", type=int, default=20, help="number of RA seeds")
    p.add_argument("--tsub-beta", type=float, default=DEFAULT_TSUB_BETA)

    p = sub.add_parser("ablation", parents=[common], help="repeat a sweep under each weight variant")
    p.add_argument("--cache", required=True)
    p.add_argument("--static", required=True)
    p.add_argument("--dynamic", required=True)
    p.add_argument("--variants", default=",".join(VARIANTS))
    p.add_argument("--sizes", default="8,16,32")
    p.add_argument("--strategies", default="improved")
    p.add_argument("--seeds", type=int, default=1)
    p.add_argument("--pollutant", default=DEFAULT_TARGET)

    p = sub.add_parser("rerun", parents=[common], help="replay a manifest into a new directory")
    p.add_argument("manifest")
    return parser


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    args.argv = argv
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.jobs < 1:
        parser.error("--jobs must be >= 1")
    try:
        _HANDLERS[args.command](args)
    except FleetSenseError as exc:
        print(f"fleetsense {args.command}: error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"fleetsense {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
