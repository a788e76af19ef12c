"""Command line front end: config ingestion, artifact export, reproduction runs.

Subcommands
-----------
``validate``   parse a config and check the intensity-shape hypotheses.
``factors``    eigen-analysis of the covariance; writes eigenvalue/loading CSVs.
``solve``      run the backward sweep; caches the surface for later stages.
``quotes``     quote table off a cached surface for a list of inventories.
``simulate``   event-level runs; writes a summary CSV and per-path NDJSON.
``adjust``     residual-risk correction and adjusted quotes for listed RFQs.
``reproduce``  the bundled reference scenarios, stage by stage.

Artifact discipline: every output file name embeds the first 12 hex digits
of the configuration hash, and each run writes a manifest JSON listing the
artifacts it produced.  CSV and NDJSON outputs are byte-identical across
reruns with the same config and seed; the manifest is not (it records wall
clock).  ``quotes``, ``simulate`` and ``adjust`` never re-solve: they load
the surface cached by ``solve`` (or exit with code 2 telling you to run it).
``reproduce`` solves on first use and caches.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import sys
import time
import warnings
from importlib import resources
from pathlib import Path

import numpy as np

from . import __version__
from .config_io import load_config
from .errors import OutOfDomainError, SolverError, StabilityError, ValidationError
from .factors import build_factor_model
from .model import MarketSpec, validate_hypotheses
from .quotes import REASON_OK, MyopicPolicy, SurfacePolicy, quote_table, write_quote_table
from .residual import adjusted_quote, residual_correction
from .simulator import DegenerateRunWarning, SimulationResult, simulate
from .solver import FactorGrid, SolverConfig, ValueSurface, solve

REPRODUCTION_SEED = 23
BUNDLED = {"paper-2asset": "paper_2asset.yaml", "paper-30asset": "paper_30asset.yaml"}
STAGES = ("validate", "factors", "solve", "quotes", "simulate", "adjust", "all")
EVENT_LOG_PATH_CAP = 100

SUMMARY_COLUMNS = (
    "policy",
    "engine",
    "seed",
    "n_paths",
    "mean_pnl",
    "stdev_pnl",
    "stdev_from_rfq",
    "objective",
    "mean_risk_integral",
    "se_mean_pnl",
    "se_stdev_pnl",
    "se_stdev_from_rfq",
    "se_objective",
)
ADJUST_COLUMNS = (
    "asset",
    "side",
    "size",
    "base_delta",
    "adjusted_delta",
    "shift",
    "shift_stderr",
    "correction",
    "correction_stderr",
    "correction_after_trade",
    "correction_after_trade_stderr",
    "reason",
)


class CliError(Exception):
    """Fatal CLI problem; carries the exit code."""

    def __init__(self, message: str, code: int = 1):
        super().__init__(message)
        self.code = code


@dataclasses.dataclass
class RunManifest:
    """What a run produced, for reproducibility audits."""

    version: str
    subcommand: str
    config_hash: str
    seed: int | None
    artifacts: list[str]
    wall_clock_seconds: float

    def write(self, path: Path) -> None:
        payload = dataclasses.asdict(self)
        path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")


class Runner:
    """Holds the output directory and collects artifact paths for the manifest."""

    def __init__(self, out_dir: Path, config_hash: str, subcommand: str, seed: int | None):
        self.out_dir = out_dir
        self.hash = config_hash
        self.tag = config_hash[:12]
        self.subcommand = subcommand
        self.seed = seed
        self.artifacts: list[str] = []
        self.started = time.perf_counter()
        out_dir.mkdir(parents=True, exist_ok=True)

    def path(self, name: str) -> Path:
        p = self.out_dir / name
        self.artifacts.append(name)
        return p

    def finish(self) -> None:
        manifest = RunManifest(
            version=__version__,
            subcommand=self.subcommand,
            config_hash=self.hash,
            seed=self.seed,
            artifacts=self.artifacts,
            wall_clock_seconds=round(time.perf_counter() - self.started, 3),
        )
        manifest.write(self.out_dir / f"manifest_{self.subcommand}_{self.tag}.json")


def _load(args) -> tuple[MarketSpec, str]:
    try:
        return load_config(args.config)
    except FileNotFoundError:
        raise CliError(f"config file not found: {args.config}", code=1)


def _surface_cache_name(tag: str, k: int, grid: int, dt) -> str:
    dt_tag = "auto" if dt is None else repr(float(dt))
    return f"surface_{tag}_k{k}_g{grid}_dt{dt_tag}.npz"


def _default_factors(market: MarketSpec, k) -> int:
    if k is not None:
        return int(k)
    return min(2, market.n_assets)


def _solve_surface(market, config_hash, k, grid_nodes, dt) -> ValueSurface:
    fm = build_factor_model(market.covariance, k)
    grid = FactorGrid.from_factor_model(fm, market.risk_limit, grid_nodes)
    cfg = SolverConfig(dt=dt) if dt is not None else SolverConfig()
    surface = solve(market, fm, grid, cfg)
    surface.config_hash = config_hash
    return surface


def _cached_surface(runner: Runner, market, k, grid_nodes, dt, solve_on_miss: bool) -> ValueSurface:
    cache = runner.out_dir / "cache"
    cache.mkdir(parents=True, exist_ok=True)
    path = cache / _surface_cache_name(runner.tag, k, grid_nodes, dt)
    if path.exists():
        surface = ValueSurface.load(path)
        if surface.config_hash != runner.hash:
            raise CliError(
                f"cached surface {path} was built from configuration "
                f"{surface.config_hash[:12]}, not {runner.tag}; delete it or "
                "change --out-dir",
                code=2,
            )
        return surface
    if not solve_on_miss:
        raise CliError(
            f"no cached surface at {path}; run `rfqmm solve --config ... "
            f"--factors {k} --grid {grid_nodes}` with the same --out-dir first",
            code=2,
        )
    surface = _solve_surface(market, runner.hash, k, grid_nodes, dt)
    surface.save(path)
    return surface


def _parse_inventory(text: str, d: int) -> np.ndarray:
    try:
        values = np.array([float(x) for x in text.split(",")], dtype=float)
    except ValueError:
        raise CliError(f"could not parse inventory {text!r}; expected comma-separated numbers")
    if values.shape != (d,):
        raise CliError(f"inventory {text!r} has {values.size} entries, the market has {d} assets")
    return values


def _parse_rfq(text: str, market: MarketSpec) -> tuple[int, str, float]:
    parts = text.split(":")
    if len(parts) != 3:
        raise CliError(f"could not parse RFQ {text!r}; expected ASSET:SIDE:SIZE, e.g. 0:bid:12500")
    try:
        asset = int(parts[0])
        size = float(parts[2])
    except ValueError:
        raise CliError(f"could not parse RFQ {text!r}; expected ASSET:SIDE:SIZE, e.g. 0:bid:12500")
    side = parts[1]
    if not 0 <= asset < market.n_assets:
        raise CliError(f"RFQ {text!r}: asset index out of range for {market.n_assets} assets")
    if side not in ("bid", "ask"):
        raise CliError(f"RFQ {text!r}: side must be bid or ask")
    return asset, side, size


def _write_csv(path: Path, header, rows) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)


def _fmt(value) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _run_and_warn(market, policy, n_paths, seed, engine, keep_event_logs=False) -> SimulationResult:
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", DegenerateRunWarning)
        result = simulate(
            market, policy, n_paths, seed, engine=engine, keep_event_logs=keep_event_logs
        )
    for w in caught:
        if issubclass(w.category, DegenerateRunWarning):
            print(f"warn[sim]: {w.message}", file=sys.stderr)
    return result


def _write_simulation(runner: Runner, result: SimulationResult, label: str) -> None:
    s = result.summary()
    row = [
        result.policy_kind,
        result.engine,
        result.seed,
        len(result.paths),
        s.mean_pnl,
        s.stdev_pnl,
        s.stdev_from_rfq,
        s.objective,
        s.mean_risk_integral,
        s.se_mean_pnl,
        s.se_stdev_pnl,
        s.se_stdev_from_rfq,
        s.se_objective,
    ]
    _write_csv(
        runner.path(f"summary_{label}_{runner.tag}.csv"),
        SUMMARY_COLUMNS,
        [[_fmt(v) for v in row]],
    )
    with open(runner.path(f"paths_{label}_{runner.tag}.ndjson"), "w", encoding="utf-8") as fh:
        result.to_ndjson(fh)
    print(
        f"{label}: mean {s.mean_pnl:.0f}  stdev {s.stdev_pnl:.0f}  "
        f"rfq-stdev {s.stdev_from_rfq:.0f}  objective {s.objective:.0f}"
    )


def _write_event_logs(runner: Runner, result: SimulationResult, label: str) -> None:
    with open(runner.path(f"events_{label}_{runner.tag}.ndjson"), "w", encoding="utf-8") as fh:
        for i, log in enumerate(result.event_logs[:EVENT_LOG_PATH_CAP]):
            record = {"path": i, **{k: list(v) for k, v in log.items()}}
            fh.write(json.dumps(record, sort_keys=True) + "\n")


def cmd_validate(args) -> int:
    market, config_hash = _load(args)
    report = validate_hypotheses(market)
    print(f"config {config_hash[:12]}: {market.n_assets} assets, horizon {market.horizon} days")
    if report.passed:
        print(f"all {len(report.checks)} intensity checks passed")
        return 0
    for line in report.failures():
        print(f"fail: {line}", file=sys.stderr)
    return 1


def cmd_factors(args) -> int:
    market, config_hash = _load(args)
    k = _default_factors(market, args.factors)
    fm = build_factor_model(market.covariance, k)
    runner = Runner(Path(args.out_dir), config_hash, "factors", seed=None)
    _write_csv(
        runner.path(f"eigenvalues_{runner.tag}.csv"),
        ("index", "eigenvalue"),
        [[i, _fmt(float(v))] for i, v in enumerate(fm.eigenvalues)],
    )
    _write_csv(
        runner.path(f"loadings_{runner.tag}.csv"),
        ("asset_id",) + tuple(f"f{j + 1}" for j in range(k)),
        [
            [market.assets[i].asset_id] + [_fmt(float(x)) for x in fm.loadings[i]]
            for i in range(market.n_assets)
        ],
    )
    runner.finish()
    top = ", ".join(f"{v:.6f}" for v in fm.eigenvalues[:k])
    print(f"kept {k} factors; leading eigenvalues {top}; explained {fm.explained_ratio:.4f}")
    return 0


def cmd_solve(args) -> int:
    market, config_hash = _load(args)
    k = _default_factors(market, args.factors)
    runner = Runner(Path(args.out_dir), config_hash, "solve", seed=None)
    cache = runner.out_dir / "cache"
    cache.mkdir(parents=True, exist_ok=True)
    path = cache / _surface_cache_name(runner.tag, k, args.grid, args.dt)
    surface = _solve_surface(market, config_hash, k, args.grid, args.dt)
    surface.save(path)
    runner.artifacts.append(str(path.relative_to(runner.out_dir)))
    with open(runner.path(f"surface_{runner.tag}_k{k}_g{args.grid}.csv"), "w", encoding="utf-8") as fh:
        surface.to_csv(fh)
    runner.finish()
    origin = surface.value_at_origin()
    peak = float(np.max(surface.slice_values(0.0)))
    print(f"solved k={k} grid={args.grid}: value at origin {origin:.1f}, grid maximum {peak:.1f}")
    return 0


def cmd_quotes(args) -> int:
    market, config_hash = _load(args)
    k = _default_factors(market, args.factors)
    runner = Runner(Path(args.out_dir), config_hash, "quotes", seed=None)
    surface = _cached_surface(runner, market, k, args.grid, args.dt, solve_on_miss=False)
    inventories = [
        _parse_inventory(text, market.n_assets)
        for text in (args.inventory or ["0" + ",0" * (market.n_assets - 1)])
    ]
    sizes = [float(s) for s in args.sizes.split(",")] if args.sizes else None
    rows = quote_table(surface, market, inventories, sizes=sizes)
    with open(runner.path(f"quotes_{runner.tag}_k{k}_g{args.grid}.csv"), "w", encoding="utf-8") as fh:
        write_quote_table(fh, rows, market.n_assets)
    runner.finish()
    refused = sum(1 for r in rows if r[5] != REASON_OK)
    print(f"quoted {len(rows)} rows ({refused} refusals) for {len(inventories)} inventories")
    return 0


def cmd_simulate(args) -> int:
    market, config_hash = _load(args)
    runner = Runner(Path(args.out_dir), config_hash, "simulate", seed=args.seed)
    if args.policy == "myopic":
        policy = MyopicPolicy(market)
    else:
        k = _default_factors(market, args.factors)
        surface = _cached_surface(runner, market, k, args.grid, args.dt, solve_on_miss=False)
        policy = SurfacePolicy(surface, market)
    result = _run_and_warn(
        market, policy, args.paths, args.seed, args.engine, keep_event_logs=args.event_logs
    )
    _write_simulation(runner, result, args.policy)
    if args.event_logs:
        _write_event_logs(runner, result, args.policy)
    runner.finish()
    return 0


def _adjust_rows(surface, market, inventory, rfqs, t, n_paths, seed):
    here = residual_correction(surface, market, inventory, t=t, n_paths=n_paths, seed=seed)
    rows = []
    for asset, side, size in rfqs:
        a = adjusted_quote(
            surface, market, inventory, asset, side, size, t=t, n_paths=n_paths, seed=seed
        )
        after = a.correction_after_trade
        rows.append(
            [
                asset,
                side,
                _fmt(float(size)),
                _fmt(a.base_delta),
                _fmt(a.delta),
                _fmt(a.shift),
                _fmt(a.shift_stderr),
                _fmt(here.value),
                _fmt(here.stderr),
                _fmt(after.value) if after is not None else "",
                _fmt(after.stderr) if after is not None else "",
                a.reason,
            ]
        )
    return here, rows


def cmd_adjust(args) -> int:
    market, config_hash = _load(args)
    k = _default_factors(market, args.factors)
    runner = Runner(Path(args.out_dir), config_hash, "adjust", seed=args.seed)
    surface = _cached_surface(runner, market, k, args.grid, args.dt, solve_on_miss=False)
    inventory = _parse_inventory(args.inventory, market.n_assets) if args.inventory else None
    rfqs = [_parse_rfq(text, market) for text in (args.rfq or [])]
    here, rows = _adjust_rows(surface, market, inventory, rfqs, args.t, args.paths, args.seed)
    _write_csv(runner.path(f"adjust_{runner.tag}_k{k}.csv"), ADJUST_COLUMNS, rows)
    runner.finish()
    origin = surface.value_at_origin()
    print(
        f"correction at the given state: {here.value:.1f} (stderr {here.stderr:.1f}, "
        f"{here.n_paths} paths); surface value at origin {origin:.1f}"
    )
    return 0


def _bundled_config(target: str) -> Path:
    return Path(str(resources.files("rfqmm.configs").joinpath(BUNDLED[target])))


def cmd_reproduce(args) -> int:
    config_path = _bundled_config(args.target)
    market, config_hash = load_config(config_path)
    two_asset = args.target == "paper-2asset"
    grid_nodes = args.grid if args.grid is not None else (141 if two_asset else 71)
    stages = [args.stage] if args.stage != "all" else list(STAGES[:-1])
    runner = Runner(Path(args.out_dir), config_hash, f"reproduce_{args.target}", seed=args.seed)

    def surface_k(k, nodes=None):
        return _cached_surface(
            runner, market, k, nodes if nodes is not None else grid_nodes, args.dt, solve_on_miss=True
        )

    status = 0
    for stage in stages:
        print(f"--- {args.target} / {stage} ---")
        if stage == "validate":
            report = validate_hypotheses(market)
            print(
                f"config {runner.tag}: {market.n_assets} assets; "
                + ("hypotheses hold" if report.passed else "hypothesis failures")
            )
            if not report.passed:
                for line in report.failures():
                    print(f"fail: {line}", file=sys.stderr)
                status = 1
        elif stage == "factors":
            fm = build_factor_model(market.covariance, 2)
            vals = ", ".join(f"{v:.6f}" for v in fm.eigenvalues[: min(4, len(fm.eigenvalues))])
            print(f"leading eigenvalues: {vals}; explained by 2 factors {fm.explained_ratio:.4f}")
        elif stage == "solve":
            surface = surface_k(2)
            with open(
                runner.path(f"surface_{runner.tag}_k2_g{grid_nodes}.csv"), "w", encoding="utf-8"
            ) as fh:
                surface.to_csv(fh)
            peak = float(np.max(surface.slice_values(0.0)))
            print(f"k=2 value at origin {surface.value_at_origin():.1f}, grid maximum {peak:.1f}")
            if two_asset:
                one = surface_k(1)
                print(f"k=1 value at origin {one.value_at_origin():.1f}")
        elif stage == "quotes":
            surface = surface_k(2)
            zero = [np.zeros(market.n_assets)]
            rows = quote_table(surface, market, zero)
            with open(
                runner.path(f"quotes_{runner.tag}_k2_g{grid_nodes}.csv"), "w", encoding="utf-8"
            ) as fh:
                write_quote_table(fh, rows, market.n_assets)
            print(f"quoted {len(rows)} rows at flat inventory")
        elif stage == "simulate":
            n = args.paths if args.paths is not None else 2000
            surface = surface_k(2)
            if two_asset:
                runs = [
                    ("optimal", SurfacePolicy(surface, market)),
                    ("myopic", MyopicPolicy(market)),
                    ("one_factor", SurfacePolicy(surface_k(1), market)),
                ]
            else:
                runs = [("optimal", SurfacePolicy(surface, market))]
            for label, policy in runs:
                result = _run_and_warn(market, policy, n, args.seed, "thinning")
                _write_simulation(runner, result, label)
        elif stage == "adjust":
            n = args.paths if args.paths is not None else 500
            surface = surface_k(1 if two_asset else 2)
            here, rows = _adjust_rows(
                surface, market, None, [(0, "bid", 12500.0), (0, "ask", 12500.0)],
                0.0, n, args.seed,
            )
            _write_csv(runner.path(f"adjust_{runner.tag}.csv"), ADJUST_COLUMNS, rows)
            origin = surface.value_at_origin()
            print(
                f"value at origin {origin:.1f}; correction {here.value:.1f} "
                f"(stderr {here.stderr:.1f}); corrected value {origin + here.value:.1f}"
            )
    runner.finish()
    return status


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="rfqmm",
        description="Factor-reduced RFQ market making: solve, quote, simulate, adjust.",
    )
    parser.add_argument("--version", action="version", version=f"rfqmm {__version__}")
    sub = parser.add_subparsers(dest="subcommand", required=True)

    def common(p, seed=False, paths=None, surface_opts=False):
        p.add_argument("--out-dir", default="rfqmm_out", help="artifact directory")
        if seed:
            p.add_argument("--seed", type=int, default=0, help="top-level RNG seed")
        if paths is not None:
            p.add_argument("--paths", type=int, default=paths, help="Monte-Carlo path count")
        if surface_opts:
            p.add_argument("--factors", type=int, default=None, metavar="K",
                           help="factor count (default: min(2, assets))")
            p.add_argument("--grid", type=int, default=41, help="nodes per factor axis")
            p.add_argument("--dt", type=float, default=None, help="solver step in days")

    p = sub.add_parser("validate", help="check a config against the model hypotheses")
    p.add_argument("--config", required=True)
    p.set_defaults(fn=cmd_validate)

    p = sub.add_parser("factors", help="eigen-analysis and factor loadings")
    p.add_argument("--config", required=True)
    p.add_argument("--factors", type=int, default=None, metavar="K")
    common(p)
    p.set_defaults(fn=cmd_factors)

    p = sub.add_parser("solve", help="solve the value surface and cache it")
    p.add_argument("--config", required=True)
    common(p, surface_opts=True)
    p.set_defaults(fn=cmd_solve)

    p = sub.add_parser("quotes", help="quote table from a cached surface")
    p.add_argument("--config", required=True)
    p.add_argument("--inventory", action="append", metavar="Q1,Q2,...",
                   help="inventory row; repeatable (default: flat)")
    p.add_argument("--sizes", default=None, metavar="Z1,Z2,...",
                   help="trade sizes (default: the market's size atoms)")
    common(p, surface_opts=True)
    p.set_defaults(fn=cmd_quotes)

    p = sub.add_parser("simulate", help="event-level simulation")
    p.add_argument("--config", required=True)
    p.add_argument("--policy", choices=("surface", "myopic"), default="surface")
    p.add_argument("--engine", choices=("thinning", "collapsed", "price_paths"),
                   default="thinning")
    p.add_argument("--event-logs", action="store_true",
                   help=f"dump event logs for the first {EVENT_LOG_PATH_CAP} paths")
    common(p, seed=True, paths=2000, surface_opts=True)
    p.set_defaults(fn=cmd_simulate)

    p = sub.add_parser("adjust", help="residual-risk corrected quotes")
    p.add_argument("--config", required=True)
    p.add_argument("--inventory", default=None, metavar="Q1,Q2,...")
    p.add_argument("--rfq", action="append", metavar="ASSET:SIDE:SIZE",
                   help="RFQ to price; repeatable")
    p.add_argument("--t", type=float, default=0.0, help="evaluation time in days")
    common(p, seed=True, paths=500, surface_opts=True)
    p.set_defaults(fn=cmd_adjust)

    p = sub.add_parser("reproduce", help="bundled reference scenarios")
    p.add_argument("target", choices=tuple(BUNDLED))
    p.add_argument("--stage", choices=STAGES, default="all")
    p.add_argument("--paths", type=int, default=None,
                   help="path count (default: 2000 simulate, 500 adjust)")
    p.add_argument("--seed", type=int, default=REPRODUCTION_SEED)
    p.add_argument("--grid", type=int, default=None,
                   help="nodes per factor axis (default: 141 two-asset, 71 thirty-asset)")
    p.add_argument("--dt", type=float, default=None)
    p.add_argument("--out-dir", default="rfqmm_out")
    p.set_defaults(fn=cmd_reproduce)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except (ValidationError, StabilityError, OutOfDomainError, SolverError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
