"""Experiment runner CLI: config parsing, seed sweeps, comparison tables, probes.

Verbs:
  run <config> [--seeds a,b,c] [--out dir] [--jobs k] [--force]
  compare <dir...> --metric ter|asr|rmse [--csv path]
  probe <dir> [--window w]

Outputs per sweep: manifest.json, seed_<s>/metrics.csv, seed_<s>/trace.json,
summary.json; probe writes theory.json. AFLSIM_OUT sets the default output root.
"""

import argparse
import hashlib
import json
import math
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:
    import tomli as tomllib

from .orchestrator import ExperimentConfig, MetricsLog, run_experiment, theory_probe

SUMMARY_SCHEMA = 1
TRACE_SCHEMA = 1

EXIT_OK = 0
EXIT_RUN_FAILURE = 1
EXIT_CONFIG_ERROR = 2

_TUPLE_KEYS = ("trigger_indices", "trigger_values")


class ConfigError(ValueError):
    pass


def parse_config(path) -> ExperimentConfig:
    """Load and validate a TOML experiment config; unknown keys are rejected."""
    try:
        with open(path, "rb") as fh:
            raw = tomllib.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"malformed config {path}: {exc}")
    return config_from_dict(raw)


def config_from_dict(raw) -> ExperimentConfig:
    known = {f.name: f.type for f in fields(ExperimentConfig)}
    unknown = sorted(set(raw) - set(known))
    if unknown:
        raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
    data = {}
    for key, value in raw.items():
        expected = known[key]
        if key in _TUPLE_KEYS:
            if not isinstance(value, (list, tuple)):
                raise ConfigError(f"config key {key!r} must be an array")
            data[key] = tuple(value)
        elif isinstance(value, bool):
            if expected is not bool:
                raise ConfigError(f"config key {key!r} has wrong type (boolean)")
            data[key] = value
        elif isinstance(value, int) and expected is float:
            data[key] = float(value)
        elif isinstance(value, float) and expected is int:
            raise ConfigError(f"config key {key!r} must be an integer")
        elif expected in (int, float, str) and not isinstance(value, expected):
            raise ConfigError(f"config key {key!r} has wrong type")
        else:
            data[key] = value
    cfg = ExperimentConfig(**data)
    try:
        cfg.validate()
    except ValueError as exc:
        raise ConfigError(str(exc))
    return cfg


def serialize_config(cfg: ExperimentConfig) -> str:
    """Canonical TOML form; parse_config(serialize_config(cfg)) round-trips."""
    lines = []
    for f in fields(ExperimentConfig):
        value = getattr(cfg, f.name)
        lines.append(f"{f.name} = {_toml_value(value)}")
    return "\n".join(lines) + "\n"


def _toml_value(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, str):
        return json.dumps(v)
    if isinstance(v, (tuple, list)):
        return "[" + ", ".join(_toml_value(x) for x in v) + "]"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def config_hash(cfg: ExperimentConfig) -> str:
    base = {k: v for k, v in asdict(cfg).items() if k != "seed"}
    blob = json.dumps(base, sort_keys=True, default=list)
    return hashlib.sha256(blob.encode()).hexdigest()[:12]


def _write_trace(log: MetricsLog, path):
    state = {"schema": TRACE_SCHEMA, "config": log.config,
             "staleness": log.staleness, "selected": log.selected,
             "diverged": log.diverged}
    with open(path, "w") as fh:
        json.dump(state, fh, sort_keys=True, separators=(",", ":"))


def _run_one(cfg_dict, seed, run_dir):
    """Worker for one (config, seed) job; returns the final metrics row."""
    cfg = ExperimentConfig(**{**cfg_dict, "seed": seed})
    log = run_experiment(cfg)
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    log.to_csv(run_dir / "metrics.csv")
    _write_trace(log, run_dir / "trace.json")
    final = {k: v for k, v in log.final.items() if k != "wall_clock"}
    final["wall_clock"] = log.final.get("wall_clock")
    return final


def run_sweep(cfg: ExperimentConfig, seeds, out_dir, jobs=1, force=False):
    """Execute one run per seed, write per-run CSVs plus an aggregate summary.

    Returns (exit_status, summary_dict_or_None).
    """
    out = Path(out_dir)
    existing = [p for p in (out / "summary.json", out / "manifest.json") if p.exists()]
    existing += [out / f"seed_{s}" for s in seeds if (out / f"seed_{s}").exists()]
    if existing and not force:
        print(f"error: output already exists under {out} (use --force to overwrite)",
              file=sys.stderr)
        return EXIT_RUN_FAILURE, None
    out.mkdir(parents=True, exist_ok=True)

    cfg_dict = asdict(cfg)
    manifest = {"schema": SUMMARY_SCHEMA, "config_hash": config_hash(cfg),
                "config": cfg_dict, "seeds": list(seeds),
                "status": {str(s): "pending" for s in seeds}}
    _dump_json(manifest, out / "manifest.json")

    finals, failures = {}, {}
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            futs = {s: pool.submit(_run_one, cfg_dict, s, out / f"seed_{s}") for s in seeds}
            for s, fut in futs.items():
                try:
                    finals[s] = fut.result()
                except Exception as exc:   # noqa: BLE001 - report and continue
                    failures[s] = repr(exc)
    else:
        for s in seeds:
            try:
                finals[s] = _run_one(cfg_dict, s, out / f"seed_{s}")
            except Exception as exc:       # noqa: BLE001
                failures[s] = repr(exc)

    for s in seeds:
        manifest["status"][str(s)] = "failed" if s in failures else "done"
    if failures:
        manifest["failures"] = failures
    _dump_json(manifest, out / "manifest.json")

    if failures:
        for s, msg in sorted(failures.items()):
            print(f"seed {s} failed: {msg}", file=sys.stderr)
        return EXIT_RUN_FAILURE, None

    summary = _summarize(cfg, seeds, finals)
    _dump_json(summary, out / "summary.json")
    return EXIT_OK, summary


def _summarize(cfg, seeds, finals):
    metric_keys = sorted(k for k, v in finals[seeds[0]].items()
                         if k not in ("round", "wall_clock") and isinstance(v, (int, float)))
    metrics = {}
    for key in metric_keys:
        per_seed = [finals[s].get(key) for s in seeds]
        vals = [float(v) for v in per_seed if v is not None]
        if not vals:
            continue
        finite = [v for v in vals if math.isfinite(v)]
        metrics[key] = {
            "mean": float(np.mean(vals)) if len(finite) == len(vals) else math.inf,
            "std": float(np.std(vals)) if len(finite) == len(vals) else math.nan,
            "per_seed": vals,
        }
    return {"schema": SUMMARY_SCHEMA, "config_hash": config_hash(cfg),
            "task": cfg.task, "defense": cfg.defense, "attack": cfg.attack,
            "variant": cfg.variant, "seeds": list(seeds), "metrics": metrics}


def _dump_json(obj, path):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_summary(run_dir):
    path = Path(run_dir) / "summary.json"
    if not path.exists():
        raise FileNotFoundError(f"no summary.json under {run_dir}")
    with open(path) as fh:
        return json.load(fh)


def compare_table(run_dirs, metric):
    """Defense-by-attack table of final-round means across completed sweeps."""
    cells, defenses, attack_names = {}, [], []
    for d in run_dirs:
        s = load_summary(d)
        if metric not in s["metrics"]:
            raise ValueError(f"metric {metric!r} absent from run {d}")
        defense = s["defense"] if s.get("variant", "full") == "full" \
            else f"{s['defense']}[{s['variant']}]"
        attack = s["attack"]
        value = f"{s['metrics'][metric]['mean']:.3f}"
        if metric == "ter" and "asr" in s["metrics"]:
            value += f"/{s['metrics']['asr']['mean']:.3f}"
        if defense not in defenses:
            defenses.append(defense)
        if attack not in attack_names:
            attack_names.append(attack)
        cells[(defense, attack)] = value
    header = ["defense"] + attack_names
    rows = [[d] + [cells.get((d, a), "-") for a in attack_names] for d in defenses]
    return header, rows


def render_table(header, rows):
    widths = [max(len(str(r[j])) for r in [header] + rows) for j in range(len(header))]
    fmt = "  ".join(f"{{:<{w}}}" for w in widths)
    lines = [fmt.format(*header)]
    lines += [fmt.format(*row) for row in rows]
    return "\n".join(lines)


def read_metrics_csv(path):
    with open(path) as fh:
        lines = [ln.rstrip("\n") for ln in fh if ln.strip()]
    header = lines[0].split(",")
    rows = []
    for ln in lines[1:]:
        cells = ln.split(",")
        row = {}
        for key, cell in zip(header, cells):
            if cell == "":
                row[key] = None
            elif key == "round":
                row[key] = int(cell)
            else:
                row[key] = float(cell)
        rows.append(row)
    return rows


def load_run(run_dir) -> MetricsLog:
    run_dir = Path(run_dir)
    rows = read_metrics_csv(run_dir / "metrics.csv")
    with open(run_dir / "trace.json") as fh:
        trace = json.load(fh)
    return MetricsLog(config=trace["config"], rows=rows,
                      staleness=trace["staleness"], selected=trace["selected"],
                      diverged=trace["diverged"])


def probe_command(target_dir, window):
    target = Path(target_dir)
    if (target / "metrics.csv").exists():
        report = theory_probe(load_run(target), window=window)
    else:
        seed_dirs = sorted(target.glob("seed_*"))
        if not seed_dirs:
            raise FileNotFoundError(f"no run found under {target}")
        report = {p.name: theory_probe(load_run(p), window=window) for p in seed_dirs}
    _dump_json(report, target / "theory.json")
    return report


def _build_parser():
    parser = argparse.ArgumentParser(prog="aflsim",
                                     description="asynchronous FL robustness simulator")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run a config over one or more seeds")
    p_run.add_argument("config")
    p_run.add_argument("--seeds", default="0", help="comma-separated seed list")
    p_run.add_argument("--out", default=None, help="output directory")
    p_run.add_argument("--jobs", type=int, default=1)
    p_run.add_argument("--force", action="store_true")

    p_cmp = sub.add_parser("compare", help="tabulate finished sweeps")
    p_cmp.add_argument("dirs", nargs="+")
    p_cmp.add_argument("--metric", required=True, choices=["ter", "asr", "rmse"])
    p_cmp.add_argument("--csv", default=None, help="also write the table as CSV")

    p_probe = sub.add_parser("probe", help="theory probe report for a run")
    p_probe.add_argument("dir")
    p_probe.add_argument("--window", type=int, default=100)
    return parser


def main(argv=None):
    args = _build_parser().parse_args(argv)
    if args.command == "run":
        try:
            cfg = parse_config(args.config)
            seeds = [int(s) for s in args.seeds.split(",") if s.strip() != ""]
            if not seeds:
                raise ConfigError("empty seed list")
        except (ConfigError, ValueError) as exc:
            print(f"config error: {exc}", file=sys.stderr)
            return EXIT_CONFIG_ERROR
        out = args.out
        if out is None:
            root = os.environ.get("AFLSIM_OUT", "runs")
            out = Path(root) / f"{Path(args.config).stem}-{config_hash(cfg)}"
        status, summary = run_sweep(cfg, seeds, out, jobs=args.jobs, force=args.force)
        if summary is not None:
            print(f"wrote {out}/summary.json")
            for key, stats in summary["metrics"].items():
                print(f"  {key}: mean={stats['mean']:.6g} std={stats['std']:.6g}")
        return status
    if args.command == "compare":
        try:
            header, rows = compare_table(args.dirs, args.metric)
        except (ValueError, FileNotFoundError) as exc:
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_RUN_FAILURE
        print(render_table(header, rows))
        if args.csv:
            with open(args.csv, "w") as fh:
                fh.write(",".join(header) + "\n")
                for row in rows:
                    fh.write(",".join(str(c) for c in row) + "\n")
        return EXIT_OK
    if args.command == "probe":
        try:
            report = probe_command(args.dir, args.window)
        except (ValueError, FileNotFoundError) as exc:
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_RUN_FAILURE
        print(json.dumps(report, indent=2, sort_keys=True))
        return EXIT_OK
    return EXIT_CONFIG_ERROR


if __name__ == "__main__":
    sys.exit(main())
