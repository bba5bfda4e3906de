"""``v2n`` command line: data preparation, forecasting, sizing, scaling and reports.

Exit codes: 0 success, 1 domain error, 2 usage error. Diagnostics go to
stderr; data goes to files or stdout.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import math
import sys
from collections import defaultdict
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from .config import ConfigError, RunConfig, load_config, parse_config, resolve_seed
from .evaluation import (
    NEURAL,
    EvalSettings,
    ExperimentResult,
    ExperimentSpec,
    best_by_lookahead,
    expand_grid,
    grid_csv,
    make_forecaster,
    resolve_members,
    run_grid,
    series_forecasts,
    synthetic_dataset,
    window_batch,
)
from .features import FeatureCube, neighborhood, neighborhood_quantiles
from .ingest import (
    CleanDataset,
    IngestError,
    atomic_write,
    day_range,
    fetch_snapshot,
    filter_spurious,
    format_timestamp,
    get_split,
    load_clean,
    parse_records,
    sanitize,
    split_scenarios,
    write_csv,
)
from .neural import bundle
from .neural.network import NetConfig, train_arrays
from .queueing import PROFILES, get_profile, min_servers, size
from .scaling import (
    BEST_TECHNIQUE,
    Comparison,
    ScalingPolicy,
    best_forecaster,
    compare_policies,
    reports_csv,
    trace_csv,
)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _err(msg: str) -> None:
    print(msg, file=sys.stderr)


# ------------------------------------------------------------------ helpers


def _write_text(path: str | None, text: str) -> None:
    if path in (None, "-"):
        sys.stdout.write(text)
    else:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        atomic_write(path, text.encode("utf-8"))


def _load_cfg(args) -> RunConfig:
    return load_config(args.config) if getattr(args, "config", None) else parse_config({})


def _load_data(path: str | None, seed: int) -> CleanDataset:
    if path is None:
        raise ConfigError("no dataset given (use --data or the config's dataset field)")
    if path == "synthetic":
        return synthetic_dataset(seed=seed)
    return load_clean(path)


def _seed(args, cfg: RunConfig | None = None) -> int:
    explicit = getattr(args, "seed", None)
    if explicit is not None:
        return int(explicit)
    return resolve_seed(cfg.seed if cfg is not None else None)


def _split_slices(clean: CleanDataset, settings: EvalSettings, scenario: str):
    splits = split_scenarios(clean, settings.splits)
    sp = get_split(splits, scenario)
    return sp, day_range(clean, sp.train), day_range(clean, sp.test)


# --------------------------------------------------------------- subcommands


def cmd_fetch(args) -> int:
    snap = fetch_snapshot(args.endpoint, args.timeout)
    if not snap.data:
        raise IngestError("endpoint returned an empty body")
    atomic_write(args.out, snap.data)
    _err(f"fetched {len(snap.data)} bytes at {snap.retrieved_at.isoformat()}")
    return 0


def cmd_sanitize(args) -> int:
    raw = parse_records(args.input, args.format, args.interval)
    raw, removed = filter_spurious(raw, args.min_coverage)
    clean = sanitize(raw)
    buf = io.StringIO()
    write_csv(clean, buf)
    _write_text(args.output, buf.getvalue())
    report = dict(clean.report)
    report["removed_probes"] = removed
    report["parse"] = raw.report.to_dict() if raw.report is not None else {}
    text = json.dumps(report, sort_keys=True, indent=2) + "\n"
    if args.report:
        atomic_write(args.report, text.encode())
    _err(f"{len(clean.probes)} probes kept, {len(removed)} removed, {clean.n_steps} grid steps")
    return 0


def cmd_features(args) -> int:
    clean = _load_data(args.data, _seed(args))
    target = args.target or clean.default_target()
    nb = neighborhood(clean, target, args.radius)
    out = {"target_probe": target, "radius_km": None if math.isinf(nb.radius_km) else nb.radius_km,
           "members": list(nb.members), "distances_km": [round(d, 6) for d in nb.distances]}
    if len(clean.probes) > 1:
        q = neighborhood_quantiles(clean, target)
        out["quantiles_km"] = {"q1": q.q1, "median": q.median, "q3": q.q3, "w2": q.w2}
    print(json.dumps(out, sort_keys=True))
    return 0


def cmd_forecast(args) -> int:
    cfg = _load_cfg(args)
    overrides = {k: v for k, v in (
        ("alpha", args.alpha), ("beta", args.beta), ("gamma", args.gamma), ("season_steps", args.season_steps),
    ) if v is not None}
    sm = parse_config({"smoothing": {**cfg.smoothing.model_dump(), **overrides}}).smoothing
    clean = _load_data(args.data, _seed(args, cfg))
    settings = cfg.eval_settings()
    _, train, test = _split_slices(clean, settings, args.scenario)
    target = args.target or cfg.target or clean.default_target()
    values = clean.flow[clean.row(target), train.start:test.stop].astype(np.float64)
    mode = "online" if args.online else "offline"
    f = series_forecasts(args.model, values, test.start - train.start, args.lookahead, mode, sm.build())
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["timestamp", "actual", "forecast"])
    for j, epoch in enumerate(clean.epochs[test]):
        w.writerow([format_timestamp(int(epoch)), repr(float(values[test.start - train.start + j])),
                    format(float(f[j]), ".10g")])
    _write_text(args.out, buf.getvalue())
    return 0


def cmd_train(args) -> int:
    cfg = _load_cfg(args)
    seed = _seed(args, cfg)
    clean = _load_data(args.data, _seed(args, cfg))
    settings = cfg.eval_settings()
    _, train, test = _split_slices(clean, settings, args.scenario)
    target = args.target or cfg.target or clean.default_target()
    members = resolve_members(clean, target, args.radius)
    if target not in members:
        members = (target,) + tuple(members)
    opts = cfg.neural.net_options()
    for name in ("epochs", "neurons", "learning_rate", "batch_size"):
        if getattr(args, name) is not None:
            opts[name] = getattr(args, name)
    ks = tuple(int(k) for k in args.lookahead.split(","))
    net = NetConfig(model=args.model, seed=seed, lookaheads=ks, **opts)
    cube = FeatureCube(clean, members, target).cube
    y = clean.flow[clean.row(target)].astype(np.float64)
    origins = np.arange(train.start + net.history - 1, test.start - max(ks))
    if origins.size == 0:
        raise ValueError("training segment too short for the history and look-ahead")
    Y = np.stack([y[origins + k] for k in ks], axis=1)
    params = train_arrays(net, window_batch(cube, origins + 1, net.history), Y, members.index(target))
    atomic_write(args.out, bundle.dumps(params))
    last = params.loss_history[-1] if params.loss_history else float("nan")
    _err(f"trained {args.model} on {len(origins)} windows; final loss {last:.6g}")
    return 0


def cmd_evaluate(args) -> int:
    cfg = _load_cfg(args)
    seed = _seed(args, cfg)
    try:
        grid = json.loads(Path(args.grid).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{args.grid}: invalid JSON: {exc}") from None
    if not isinstance(grid, list) or not grid:
        raise ConfigError("grid must be a non-empty JSON list of experiment objects")
    specs = []
    for i, item in enumerate(grid):
        try:
            item = dict(item)
            item.setdefault("seed", seed)
            specs.append(ExperimentSpec.from_dict(item))
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"grid[{i}]: {exc}") from None
    clean = _load_data(args.data, seed)
    settings = cfg.eval_settings()
    if args.warmup is not None:
        settings = EvalSettings(**{**settings.__dict__, "warmup": args.warmup})
    results = run_grid(specs, clean, settings, args.jobs)
    _write_text(args.out, grid_csv(results))
    failed = [r for r in results if r.error]
    for r in failed:
        _err(f"experiment {r.spec.technique}/{r.spec.mode}/{r.spec.scenario}/k={r.spec.lookahead} failed: {r.error}")
    return 0


def cmd_size(args) -> int:
    c = min_servers(args.lam, args.mu, args.t0)
    print(json.dumps(size(args.lam, args.mu, c).to_dict(), sort_keys=True))
    return 0


def _scaling_inputs(cfg: RunConfig, clean: CleanDataset, scenario: str):
    settings = cfg.eval_settings()
    _, train, test = _split_slices(clean, settings, scenario)
    target = cfg.target or clean.default_target()
    series = clean.series(target)
    return settings, target, train, test, series.segment(train.start, train.stop), series.segment(test.start, test.stop)


def run_scaling(cfg: RunConfig, clean: CleanDataset, policies: Sequence[ScalingPolicy], services: Sequence[str],
                seed: int, scenario: str | None = None) -> Comparison:
    scenario = scenario or cfg.scaling.scenario
    settings, target, train, test, train_s, test_s = _scaling_inputs(cfg, clean, scenario)

    def factory(pol: ScalingPolicy):
        return make_forecaster(pol.forecaster or "tes-online", clean, target, train, test.start, pol.leads,
                               settings, seed, cfg.scaling.radius)

    return compare_policies(policies, train_s, test_s, services, factory, cfg.scaling.rate_divisor)


def cmd_scale(args) -> int:
    cfg = _load_cfg(args)
    seed = _seed(args, cfg)
    updates = {}
    if args.rate_divisor is not None:
        updates["rate_divisor"] = args.rate_divisor
    if args.cover_interval:
        updates["cover_interval"] = True
    if updates:
        cfg = cfg.model_copy(update={"scaling": cfg.scaling.model_copy(update=updates)})
    if args.target:
        cfg = cfg.model_copy(update={"target": args.target})
    clean = _load_data(args.data or cfg.dataset, seed)
    scenario = args.scenario or cfg.scaling.scenario
    policy = ScalingPolicy(args.policy, args.n if args.policy == "n_min" else None,
                           args.forecaster if args.policy == "n_min" else None, cfg.scaling.cover_interval)
    if policy.kind == "n_min" and policy.forecaster is None:
        name = get_split(split_scenarios(clean, cfg.eval_settings().splits), scenario).name
        fc = best_forecaster(args.n, name) if (args.n, name) in BEST_TECHNIQUE else "tes-online"
        policy = ScalingPolicy("n_min", args.n, fc, cfg.scaling.cover_interval)
    services = [get_profile(args.service).name]
    pols = [policy] if policy.kind == "max" else [ScalingPolicy("max"), policy]
    cmp_ = run_scaling(cfg, clean, pols, services, seed, scenario)
    rep = cmp_.reports[-1]
    if rep.error:
        raise RuntimeError(rep.error)
    trace = cmp_.traces[(policy.label, services[0])]
    _write_text(args.out, trace_csv([trace]))
    if args.report:
        atomic_write(args.report, reports_csv([rep]).encode())
    _err(f"{policy.label} {services[0]}: cost_ratio {rep.cost_ratio:.4f}, violation_ratio {rep.violation_ratio:.4f}, "
         f"incidents {rep.incidents}")
    return 0


def report_from_traces(trace_dir) -> str:
    """Aggregate ``trace_*.csv`` files into a report CSV (ratios against the max policy per service)."""
    files = sorted(Path(trace_dir).glob("trace_*.csv"))
    if not files:
        raise FileNotFoundError(f"no trace_*.csv files in {trace_dir}")
    agg: dict[tuple[str, str], list[int]] = defaultdict(lambda: [0, 0, 0])
    order: list[tuple[str, str]] = []
    for f in files:
        with open(f, newline="", encoding="utf-8") as fh:
            for row in csv.DictReader(fh):
                key = (row["policy"], row["service"])
                if key not in agg:
                    order.append(key)
                a = agg[key]
                a[0] += int(row["c"])
                a[1] += int(row["violation"])
                a[2] += 1
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["policy", "service", "steps", "cost", "cost_ratio", "violations", "violation_ratio"])
    for key in sorted(order, key=lambda k: (k[1], k[0])):
        cost, viol, steps = agg[key]
        ref = agg.get((("max", key[1])))
        ratio = format(cost / ref[0], ".10g") if ref and ref[0] and ref[2] == steps else ""
        w.writerow([key[0], key[1], steps, cost, ratio, viol, format(viol / steps, ".10g")])
    return buf.getvalue()


def cmd_report(args) -> int:
    _write_text(args.out, report_from_traces(args.traces))
    return 0


# ------------------------------------------------------------------ reports


def emit_report(out_dir, grid: Sequence[ExperimentResult] | None = None, comparison: Comparison | None = None,
                summary: dict | None = None) -> list[Path]:
    """Write rmse_grid.csv, scaling_report.csv, trace_<policy>.csv and summary.json.

    Everything is rendered in memory first, so nothing is written when the
    results are empty or rendering fails.
    """
    grid = list(grid or [])
    if not grid and (comparison is None or not comparison.reports):
        raise ValueError("nothing to report: no experiment or scaling results")
    files: dict[str, str] = {}
    info = dict(summary or {})
    if grid:
        files["rmse_grid.csv"] = grid_csv(grid)
        info["experiments"] = len(grid)
        info["failed_experiments"] = sum(1 for r in grid if r.error)
        info["best_technique"] = [
            {"scenario": sc, "mode": m, "lookahead": k, "technique": t}
            for (sc, m, k), t in best_by_lookahead(grid).items()
        ]
    if comparison is not None and comparison.reports:
        files["scaling_report.csv"] = comparison.csv()
        by_policy: dict[str, list] = {}
        for (label, _), tr in comparison.traces.items():
            by_policy.setdefault(label, []).append(tr)
        for label, traces in by_policy.items():
            files[f"trace_{label}.csv"] = trace_csv(traces)
        info["scaling"] = [r.row() for r in comparison.reports]
    files["summary.json"] = json.dumps(info, sort_keys=True, indent=2) + "\n"
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for name in sorted(files):
        atomic_write(out / name, files[name].encode("utf-8"))
        written.append(out / name)
    return written


def run_pipeline(cfg: RunConfig, out_dir, seed: int, jobs: int = 1) -> list[Path]:
    """Experiment grid plus policy comparison on one dataset, then the report files."""
    clean = _load_data(cfg.dataset, seed)
    settings = cfg.eval_settings()
    split_scenarios(clean, settings.splits)
    ex = cfg.experiments
    specs = expand_grid(ex.techniques, ex.modes, ex.scenarios, ex.lookaheads, ex.radii, (seed,))
    results = run_grid(specs, clean, settings, jobs)
    comparison = run_scaling(cfg, clean, cfg.scaling.build_policies(), cfg.scaling.services, seed)
    summary = {
        "version": __version__,
        "seed": seed,
        "target": cfg.target or clean.default_target(),
        "probes": len(clean.probes),
        "grid_steps": clean.n_steps,
        "config": json.loads(cfg.model_dump_json()),
    }
    return emit_report(out_dir, results, comparison, summary)


def cmd_pipeline(args) -> int:
    cfg = _load_cfg(args)
    if args.data:
        cfg = cfg.model_copy(update={"dataset": args.data})
    seed = _seed(args, cfg)
    out = args.out or cfg.output_dir
    written = run_pipeline(cfg, out, seed, args.jobs)
    for p in written:
        _err(f"wrote {p}")
    return 0


# ------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="v2n", description="Traffic-flow forecasting and forecast-based V2N service scaling.")
    p.add_argument("--version", action="version", version=f"v2n {__version__}")
    p.add_argument("--jobs", type=int, default=1, help="worker processes for experiment grids")
    sub = p.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)

    s = sub.add_parser("fetch", help="download one open-data snapshot")
    s.add_argument("--endpoint", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--timeout", type=float, default=30.0)
    s.set_defaults(func=cmd_fetch)

    s = sub.add_parser("sanitize", help="parse, drop sparse probes and gap-fill onto the 5-minute grid")
    s.add_argument("--input", required=True)
    s.add_argument("--format", choices=("csv", "xml"), default="csv")
    s.add_argument("--output", required=True)
    s.add_argument("--min-coverage", type=float, default=0.8)
    s.add_argument("--interval", type=int, default=300)
    s.add_argument("--report")
    s.set_defaults(func=cmd_sanitize)

    s = sub.add_parser("features", help="neighborhood membership of a target probe as JSON")
    s.add_argument("--data", required=True)
    s.add_argument("--target")
    s.add_argument("--radius", type=float)
    s.set_defaults(func=cmd_features)

    s = sub.add_parser("forecast", help="smoothing or sample-and-hold forecasts over a scenario's test set")
    s.add_argument("--data", required=True)
    s.add_argument("--model", choices=("des", "tes", "hold"), required=True)
    s.add_argument("--alpha", type=float)
    s.add_argument("--beta", type=float)
    s.add_argument("--gamma", type=float)
    s.add_argument("--season-steps", type=int)
    s.add_argument("--lookahead", type=int, default=1)
    s.add_argument("--online", action="store_true")
    s.add_argument("--scenario", default="non-covid")
    s.add_argument("--target")
    s.add_argument("--config")
    s.add_argument("--out")
    s.set_defaults(func=cmd_forecast)

    s = sub.add_parser("train", help="train a neural forecaster and save its parameter bundle")
    s.add_argument("--data", required=True)
    s.add_argument("--model", choices=NEURAL, required=True)
    s.add_argument("--scenario", default="non-covid")
    s.add_argument("--lookahead", default="1", help="one k or a comma list (one head each)")
    s.add_argument("--seed", type=int)
    s.add_argument("--target")
    s.add_argument("--radius", type=float)
    s.add_argument("--epochs", type=int)
    s.add_argument("--neurons", type=int)
    s.add_argument("--batch-size", type=int)
    s.add_argument("--learning-rate", type=float)
    s.add_argument("--config")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("evaluate", help="run an experiment grid and write long-format RMSE CSV")
    s.add_argument("--grid", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--out")
    s.add_argument("--seed", type=int)
    s.add_argument("--warmup", type=int)
    s.add_argument("--config")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("size", help="minimal M/M/c server count for a mean-delay target")
    s.add_argument("--lambda", dest="lam", type=float, required=True, help="arrival rate (vehicles/s)")
    s.add_argument("--mu", type=float, required=True, help="per-server service rate (vehicles/s)")
    s.add_argument("--t0", type=float, required=True, help="mean system time target (s)")
    s.set_defaults(func=cmd_size)

    s = sub.add_parser("scale", help="replay one scaling policy over a scenario's test set")
    s.add_argument("--data")
    s.add_argument("--scenario")
    s.add_argument("--policy", choices=("n_min", "avg", "max"), required=True)
    s.add_argument("--n", type=int, default=30)
    s.add_argument("--service", choices=sorted(PROFILES), default="remote_driving")
    s.add_argument("--forecaster", help="e.g. tes-online, des-offline, hold, lstm-online (default: best for n)")
    s.add_argument("--rate-divisor", type=float)
    s.add_argument("--cover-interval", action="store_true")
    s.add_argument("--target")
    s.add_argument("--seed", type=int)
    s.add_argument("--config")
    s.add_argument("--report")
    s.add_argument("--out")
    s.set_defaults(func=cmd_scale)

    s = sub.add_parser("report", help="aggregate trace CSVs into a cost/violation report")
    s.add_argument("--traces", required=True)
    s.add_argument("--out")
    s.set_defaults(func=cmd_report)

    s = sub.add_parser("pipeline", help="experiment grid + policy comparison + report files from one config")
    s.add_argument("--config")
    s.add_argument("--data")
    s.add_argument("--seed", type=int)
    s.add_argument("--out")
    s.set_defaults(func=cmd_pipeline)
    return p


DOMAIN_ERRORS = (ValueError, KeyError, IngestError, ConfigError, OSError, RuntimeError, ArithmeticError)


def dispatch(argv: Sequence[str]) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(list(argv))
    except UsageError as exc:
        _err(str(exc))
        return 2
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    if not getattr(args, "command", None):
        parser.print_usage(sys.stderr)
        _err("v2n: error: a command is required")
        return 2
    if args.jobs < 1:
        _err("v2n: error: --jobs must be >= 1")
        return 2
    try:
        return args.func(args)
    except DOMAIN_ERRORS as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        _err(f"v2n {args.command}: {msg}")
        return 1


def main(argv: Sequence[str] | None = None) -> int:
    return dispatch(sys.argv[1:] if argv is None else argv)


if __name__ == "__main__":
    sys.exit(main())
