"""Command-line entry points: run experiments, solve a bargaining instance,
write partitions, and summarize finished runs.

Configuration is flat `key = value` text in sections, strictly validated —
unknown sections or keys abort instead of being ignored. Precedence:
command-line flags beat file values, file values beat the FEDRANE_SEED
environment variable, and everything beats built-in defaults. Exit codes:
0 success, 1 runtime failure, 2 usage or parse error.
"""

from __future__ import annotations

import argparse
import configparser
import json
import os
import sys
from pathlib import Path

import numpy as np

from fedrane import data as data_mod
from fedrane import federation, gne
from fedrane.federation import RunConfig

_BOOL = {"true": True, "false": False, "1": True, "0": False, "yes": True, "no": False}

# section -> key -> converter
_SCHEMA = {
    "run": {
        "clients": int,
        "rounds": int,
        "local_epochs": int,
        "batch_size": int,
        "lr": float,
        "seed": int,
        "aggregator": str,
        "lra_enabled": "bool",
        "attention_softmax": "bool",
    },
    "data": {
        "classes": int,
        "dim": int,
        "per_class": int,
        "spread": float,
        "alpha": float,
        "csv_path": "path",
        "holdout_fraction": float,
    },
    "lra": {
        "lambda_r": float,
        "lambda_cd": float,
        "tau1": float,
        "mp_steps": int,
        "tau_edge": float,
        "slim_max_iter": int,
        "slim_tol": float,
    },
    "model": {
        "hidden": "dims",
        "embed_dim": int,
        "predictor_hidden": "dims",
    },
}


class ConfigError(Exception):
    pass


def _convert(section: str, key: str, raw: str, conv):
    raw = raw.strip()
    try:
        if conv == "bool":
            if raw.lower() not in _BOOL:
                raise ValueError(f"expected a boolean, got {raw!r}")
            return _BOOL[raw.lower()]
        if conv == "dims":
            return tuple(int(x) for x in raw.split(",") if x.strip())
        if conv == "path":
            return raw or None
        return conv(raw)
    except ValueError as exc:
        raise ConfigError(f"[{section}] {key}: {exc}") from None


def load_config_file(path: str) -> dict:
    """Parse and validate a config file into RunConfig keyword overrides."""
    parser = configparser.ConfigParser(interpolation=None)
    try:
        with open(path, "r", encoding="utf-8") as fh:
            parser.read_file(fh, source=path)
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from None
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from None
    values: dict = {}
    for section in parser.sections():
        if section not in _SCHEMA:
            raise ConfigError(f"unknown section [{section}] (known: {sorted(_SCHEMA)})")
        for key, raw in parser.items(section):
            if key not in _SCHEMA[section]:
                raise ConfigError(
                    f"unknown key {key!r} in [{section}] (known: {sorted(_SCHEMA[section])})"
                )
            values[key] = _convert(section, key, raw, _SCHEMA[section][key])
    return values


def resolve_config(args: argparse.Namespace) -> RunConfig:
    """defaults < FEDRANE_SEED < config file < command-line flags."""
    values: dict = {}
    env_seed = os.environ.get("FEDRANE_SEED")
    if env_seed is not None:
        try:
            values["seed"] = int(env_seed)
        except ValueError:
            raise ConfigError(f"FEDRANE_SEED must be an integer, got {env_seed!r}") from None
    if getattr(args, "config", None):
        values.update(load_config_file(args.config))
    overrides = {
        "seed": getattr(args, "seed", None),
        "aggregator": getattr(args, "aggregator", None),
        "alpha": getattr(args, "alpha", None),
        "clients": getattr(args, "clients", None),
        "rounds": getattr(args, "rounds", None),
        "local_epochs": getattr(args, "epochs", None),
    }
    for key, value in overrides.items():
        if value is not None:
            values[key] = value
    if getattr(args, "no_lra", False):
        values["lra_enabled"] = False
    if getattr(args, "attention_softmax", False):
        values["attention_softmax"] = True
    try:
        return RunConfig(**values)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None


def config_snapshot(config: RunConfig) -> str:
    """Resolved configuration rendered back as diff-friendly sections."""
    fields = {
        "run": [
            "clients", "rounds", "local_epochs", "batch_size", "lr", "seed",
            "aggregator", "lra_enabled", "attention_softmax",
        ],
        "data": [
            "classes", "dim", "per_class", "spread", "alpha", "csv_path",
            "holdout_fraction",
        ],
        "lra": [
            "lambda_r", "lambda_cd", "tau1", "mp_steps", "tau_edge",
            "slim_max_iter", "slim_tol",
        ],
        "model": ["hidden", "embed_dim", "predictor_hidden"],
    }
    lines = []
    for section, keys in fields.items():
        lines.append(f"[{section}]")
        for key in keys:
            value = getattr(config, key)
            if isinstance(value, tuple):
                value = ",".join(str(v) for v in value)
            elif isinstance(value, bool):
                value = "true" if value else "false"
            elif value is None:
                value = ""
            lines.append(f"{key} = {value}")
        lines.append("")
    return "\n".join(lines)


def _prepare_outdir(outdir: Path, targets: list[str], force: bool) -> None:
    outdir.mkdir(parents=True, exist_ok=True)
    existing = [t for t in targets if (outdir / t).exists()]
    if existing and not force:
        raise RuntimeError(
            f"refusing to overwrite {', '.join(existing)} in {outdir} (use --force)"
        )


def cmd_run(args: argparse.Namespace) -> int:
    try:
        config = resolve_config(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    outdir = Path(args.out)
    targets = ["metrics.csv", "metrics.json", "config_resolved.ini"]
    if args.dump_graphs:
        targets.append("graphs.jsonl")
    try:
        _prepare_outdir(outdir, targets, args.force)
        if args.dump_graphs:
            config.dump_graphs = str(outdir / "graphs.jsonl")
        output = federation.run(config)
    except (RuntimeError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    (outdir / "metrics.csv").write_text(federation.metrics_to_csv(output.metrics), encoding="utf-8")
    (outdir / "metrics.json").write_text(federation.metrics_to_json(output), encoding="utf-8")
    (outdir / "config_resolved.ini").write_text(config_snapshot(config), encoding="utf-8")
    final = output.metrics[-1]
    print(f"run complete: {config.rounds} rounds, aggregator={config.aggregator}, "
          f"lra={'on' if config.lra_enabled else 'off'}")
    print(f"final global accuracy {final.gfl_accuracy:.4f}, "
          f"personalized {final.pfl_accuracy:.4f} -> {outdir}")
    return 0


def cmd_solve_nash(args: argparse.Namespace) -> int:
    try:
        doc = json.loads(Path(args.input).read_text(encoding="utf-8"))
        d, k = int(doc["d"]), int(doc["k"])
        flat = np.asarray(doc["g"], dtype=np.float64).reshape(d, k)
    except (OSError, KeyError, ValueError, json.JSONDecodeError) as exc:
        print(f"bad input document: {exc}", file=sys.stderr)
        return 2
    try:
        result = gne.nash_solve(flat)
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    print(json.dumps({
        "p": result.p.tolist(),
        "residual": result.residual,
        "converged": result.converged,
        "utilities": result.utilities.tolist(),
        "iterations": result.iterations,
    }))
    return 0


def cmd_partition(args: argparse.Namespace) -> int:
    try:
        config = resolve_config(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    outdir = Path(args.out)
    try:
        _prepare_outdir(outdir, ["partitions.json", "label_histogram.csv"], args.force)
        if config.csv_path:
            dataset = data_mod.load_csv(config.csv_path)
        else:
            dataset = data_mod.generate_synthetic(
                config.classes, config.dim, config.per_class, config.spread, config.seed
            )
        partitions = data_mod.dirichlet_partition(
            dataset, config.clients, config.alpha, config.seed
        )
        partitions = [
            data_mod.split_local(p, 0.75, config.seed + p.client_id)
            if p.indices.size >= 4 else p
            for p in partitions
        ]
    except (RuntimeError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    data_mod.save_partitions(
        partitions, config.clients, config.alpha, config.seed, outdir / "partitions.json"
    )
    header = "client," + ",".join(f"class_{c}" for c in range(dataset.num_classes))
    lines = [header]
    for p in partitions:
        counts = np.bincount(dataset.labels[p.indices], minlength=dataset.num_classes)
        lines.append(str(p.client_id) + "," + ",".join(str(int(c)) for c in counts))
    (outdir / "label_histogram.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    print(f"wrote partitions for {config.clients} clients (alpha={config.alpha}) -> {outdir}")
    return 0


def _find_runs(run_dir: Path) -> list[Path]:
    if (run_dir / "metrics.json").exists():
        return [run_dir]
    return sorted(d for d in run_dir.iterdir() if d.is_dir() and (d / "metrics.json").exists())


def cmd_report(args: argparse.Namespace) -> int:
    run_dir = Path(args.run_dir)
    if not run_dir.is_dir():
        print(f"error: {run_dir} is not a directory", file=sys.stderr)
        return 1
    runs = _find_runs(run_dir)
    if not runs:
        print(f"error: no metrics.json found under {run_dir}", file=sys.stderr)
        return 1
    rows = []
    try:
        for rd in runs:
            doc = json.loads((rd / "metrics.json").read_text(encoding="utf-8"))
            cfg = doc["config"]
            rounds = doc["rounds"]
            variant = cfg["aggregator"] + ("+lra" if cfg["lra_enabled"] else "")
            gfl = [r["gfl_accuracy"] for r in rounds]
            pfl = [r["pfl_accuracy"] for r in rounds]
            rows.append((variant, rd.name, gfl[-1], max(gfl), pfl[-1], max(pfl)))
            grid_path = rd / "cosine_grid.csv"
            if grid_path.exists() and not args.force:
                raise RuntimeError(f"refusing to overwrite {grid_path} (use --force)")
            k = len(rounds[0]["cosine"])
            lines = ["round," + ",".join(f"client_{i}" for i in range(k))]
            for r in rounds:
                lines.append(str(r["round"]) + "," + ",".join(repr(c) for c in r["cosine"]))
            grid_path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    except (RuntimeError, KeyError, ValueError, OSError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    rows.sort(key=lambda r: -r[2])
    print(f"{'variant':<14} {'run':<24} {'final_gfl':>9} {'best_gfl':>9} "
          f"{'final_pfl':>9} {'best_pfl':>9}")
    for variant, name, fg, bg, fp, bp in rows:
        print(f"{variant:<14} {name:<24} {fg:>9.4f} {bg:>9.4f} {fp:>9.4f} {bp:>9.4f}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fedrane",
        description="Federated learning with relational augmentation and bargaining aggregation",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_config_flags(p, with_out=True):
        p.add_argument("--config", help="key = value configuration file")
        if with_out:
            p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--seed", type=int)
        p.add_argument("--aggregator", choices=list(federation.AGGREGATORS))
        p.add_argument("--no-lra", action="store_true", help="disable relational augmentation")
        p.add_argument("--attention-softmax", action="store_true",
                       help="row-normalize attention coefficients")
        p.add_argument("--alpha", type=float, help="heterogeneity concentration")
        p.add_argument("--clients", type=int)
        p.add_argument("--rounds", type=int)
        p.add_argument("--epochs", type=int, help="local epochs per round")
        p.add_argument("--force", action="store_true", help="overwrite existing outputs")

    p_run = sub.add_parser("run", help="execute a federated training run")
    add_config_flags(p_run)
    p_run.add_argument("--dump-graphs", action="store_true",
                       help="dump per-batch mined graphs to graphs.jsonl")
    p_run.set_defaults(func=cmd_run)

    p_nash = sub.add_parser("solve-nash", help="solve one bargaining instance from JSON")
    p_nash.add_argument("input", help="JSON file with row-major g values plus d and k")
    p_nash.set_defaults(func=cmd_solve_nash)

    p_part = sub.add_parser("partition", help="write client partitions and label histogram")
    add_config_flags(p_part)
    p_part.set_defaults(func=cmd_partition)

    p_rep = sub.add_parser("report", help="summarize finished runs in a directory")
    p_rep.add_argument("run_dir")
    p_rep.add_argument("--force", action="store_true", help="overwrite existing grids")
    p_rep.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
