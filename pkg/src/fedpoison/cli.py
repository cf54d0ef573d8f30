"""Command-line front end.

    fedpoison run --config <path> [--out <dir>] [--seed N]
    fedpoison scenario <name> [--out <dir>]
    fedpoison plotdata <run_dir>

Config files are flat key=value text with dotted section keys
(e.g. grmp.tau_edge=0.3); the JSON snapshot a run writes uses the same keys
and is accepted anywhere a config path is.

Exit codes: 0 success, 1 config error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys

from fedpoison import defense, sim


class ConfigError(Exception):
    pass


SCENARIOS = {
    "baseline_clean": [{"attack": "none"}],
    "naive_vs_each_defense": [
        {"attack": "naive_flip", "defense": d, "_name": d} for d in defense.DEFENSES
    ],
    "grmp_vs_cosine": [
        {"attack": "grmp", "defense": "cosine_filter", "data.alpha": "0.8", "grmp.gamma_blend": "2.0"}
    ],
    "grmp_vs_krum": [
        {"attack": "grmp", "defense": "krum", "defense.f": "2", "data.alpha": "0.8", "grmp.gamma_blend": "2.0"}
    ],
    "sweep_lambda": [
        {"attack": "grmp", "defense": "cosine_filter", "defense.lambda": str(v), "_name": f"lambda_{v}"}
        for v in (0.5, 1.0, 1.5, 2.0)
    ],
    "sweep_alpha": [
        {"attack": "grmp", "defense": "cosine_filter", "data.alpha": str(v), "_name": f"alpha_{v}"}
        for v in (0.1, 0.5, 1.0, 100.0)
    ],
}


def _read_flat_file(path: str) -> dict[str, object]:
    if not os.path.exists(path):
        raise ConfigError(f"config file not found: {path}")
    with open(path, encoding="utf-8") as fh:
        text = fh.read()
    stripped = text.lstrip()
    if stripped.startswith("{"):
        return json.loads(text)
    flat: dict[str, object] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key=value")
        key, val = line.split("=", 1)
        flat[key.strip()] = val.strip()
    return flat


def parse_config(path: str | None, overrides: dict[str, object] | None = None) -> sim.ExperimentConfig:
    """Resolve a config file plus overrides against the documented defaults."""
    flat = _read_flat_file(path) if path else {}
    if overrides:
        flat.update({k: v for k, v in overrides.items() if not k.startswith("_")})
    try:
        return sim.config_from_flat(flat)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def run_to_dir(cfg: sim.ExperimentConfig, out_dir: str) -> sim.ExperimentResult:
    result = sim.run_experiment(cfg)
    sim.write_run_dir(result, out_dir)
    final = result.records[-1]
    print(
        f"{out_dir}: rounds={cfg.rounds} defense={cfg.defense} attack={cfg.attack} "
        f"final_accuracy={final.accuracy:.4f} final_asr={final.asr:.4f}"
    )
    return result


def run_scenario(name: str, out_dir: str) -> None:
    if name not in SCENARIOS:
        raise ConfigError(f"unknown scenario {name!r}; choose from {', '.join(sorted(SCENARIOS))}")
    variants = SCENARIOS[name]
    if len(variants) == 1:
        cfg = parse_config(None, variants[0])
        run_to_dir(cfg, out_dir)
    else:
        for variant in variants:
            cfg = parse_config(None, variant)
            run_to_dir(cfg, os.path.join(out_dir, str(variant["_name"])))


def emit_plotdata(run_dir: str) -> None:
    """fig4_data.csv (round, accuracy, asr) and fig5_data.csv (round,
    per-client cosine, threshold) derived from rounds.csv."""
    src = os.path.join(run_dir, "rounds.csv")
    if not os.path.exists(src):
        raise FileNotFoundError(f"missing {src}")
    with open(src, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise ValueError(f"{src} has no data rows")
    cos_cols = sorted(
        (c for c in rows[0] if c.startswith("cosine_")), key=lambda c: int(c.split("_")[1])
    )
    with open(os.path.join(run_dir, "fig4_data.csv"), "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["round", "accuracy", "asr"])
        for r in rows:
            w.writerow([r["round"], r["accuracy"], r["asr"]])
    with open(os.path.join(run_dir, "fig5_data.csv"), "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["round"] + [f"client_{i}" for i in range(len(cos_cols))] + ["threshold"])
        for r in rows:
            w.writerow([r["round"]] + [r[c] for c in cos_cols] + [r["threshold"]])


def _build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fedpoison", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)
    run_p = sub.add_parser("run", help="run one experiment from a config file")
    run_p.add_argument("--config", required=True)
    run_p.add_argument("--out", default="runs/run")
    run_p.add_argument("--seed", type=int, default=None)
    sc_p = sub.add_parser("scenario", help="run a named preset scenario")
    sc_p.add_argument("name")
    sc_p.add_argument("--out", default=None)
    pd_p = sub.add_parser("plotdata", help="emit figure data CSVs from a run directory")
    pd_p.add_argument("run_dir")
    return p


def main(argv: list[str] | None = None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        if args.command == "run":
            overrides = {"seed": str(args.seed)} if args.seed is not None else {}
            cfg = parse_config(args.config, overrides)
            run_to_dir(cfg, args.out)
        elif args.command == "scenario":
            run_scenario(args.name, args.out or os.path.join("runs", args.name))
        else:
            emit_plotdata(args.run_dir)
        return 0
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
