"""Command-line experiment runner.

One experiment per invocation, selected by subcommand. Options come from an
optional JSON config file plus flag overrides; every run writes a manifest
sufficient to reproduce its outputs byte for byte. Exit status is 0 iff all
checks of the experiment passed.

Examples:
    qntk decay --out runs/decay
    qntk noise-sweep --runs 10 --jobs 4 --out runs/noise
    qntk kernel-ensemble --qubits 2 --layers 8 --samples 500 --out runs/kernel
    qntk decay --config runs/decay/manifest.json --out runs/decay-repro
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import fields
from pathlib import Path

from .experiments import EXPERIMENTS, ExperimentConfig, run_experiment


def _float_list(text: str) -> list[float]:
    return [float(v) for v in text.split(",") if v.strip()]


def _int_list(text: str) -> list[int]:
    return [int(v) for v in text.split(",") if v.strip()]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="qntk",
        description="Tangent-kernel experiments for layered variational circuits.")
    sub = parser.add_subparsers(dest="experiment", required=True,
                                metavar="{" + ",".join(EXPERIMENTS) + "}")
    for name in EXPERIMENTS:
        p = sub.add_parser(name, help=f"run the {name} experiment")
        p.add_argument("--config", type=Path, default=None,
                       help="JSON config file (raw config or a manifest.json)")
        p.add_argument("--out", type=Path, default=None,
                       help="output directory (default: runs/<experiment>)")
        p.add_argument("--no-out", action="store_true",
                       help="do not write output files")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--qubits", type=int, default=None, dest="n_qubits")
        p.add_argument("--layers", type=int, default=None, dest="n_layers")
        p.add_argument("--eta", type=float, default=None)
        p.add_argument("--steps", type=int, default=None)
        p.add_argument("--sigma-theta", type=float, default=None, dest="sigma_theta")
        p.add_argument("--target", type=float, default=None)
        p.add_argument("--obs-terms", type=int, default=None, dest="obs_terms")
        p.add_argument("--runs", type=int, default=None, dest="n_runs")
        p.add_argument("--samples", type=int, default=None, dest="n_samples")
        p.add_argument("--trials", type=int, default=None)
        p.add_argument("--jobs", type=int, default=None)
        p.add_argument("--k-max", type=float, default=None, dest="k_max",
                       help="drop ensemble runs whose last-step kernel exceeds this")
        p.add_argument("--sigma-sweep", type=_float_list, default=None,
                       dest="sigma_sweep", metavar="S1,S2,...")
        p.add_argument("--eta-sweep", type=_float_list, default=None,
                       dest="eta_sweep", metavar="E1,E2,...")
        p.add_argument("--layer-sweep", type=_int_list, default=None,
                       dest="layer_sweep", metavar="L1,L2,...")
        p.add_argument("--width-sweep", type=_int_list, default=None,
                       dest="width_sweep", metavar="W1,W2,...")
        p.add_argument("--ntk-width-sweep", type=_int_list, default=None,
                       dest="ntk_width_sweep", metavar="W1,W2,...")
    return parser


def load_config_file(path: Path, experiment: str) -> dict:
    """Read a config JSON; accepts both raw configs and run manifests."""
    data = json.loads(path.read_text())
    if "config" in data and isinstance(data["config"], dict):
        data = data["config"]
    declared = data.get("experiment")
    if declared is not None and declared != experiment:
        raise SystemExit(
            f"config file is for experiment {declared!r}, not {experiment!r}")
    known = {f.name for f in fields(ExperimentConfig)}
    unknown = set(data) - known
    if unknown:
        raise SystemExit(f"unknown config keys: {sorted(unknown)}")
    return data


def resolve_config(args: argparse.Namespace) -> ExperimentConfig:
    values: dict = {}
    if args.config is not None:
        values.update(load_config_file(args.config, args.experiment))
    values["experiment"] = args.experiment
    for f in fields(ExperimentConfig):
        if f.name in ("experiment", "out"):
            continue
        cli_value = getattr(args, f.name, None)
        if cli_value is not None:
            values[f.name] = cli_value
    if args.no_out:
        values["out"] = None
    elif args.out is not None:
        values["out"] = str(args.out)
    elif "out" not in values or values["out"] is None:
        values["out"] = str(Path("runs") / args.experiment)
    return ExperimentConfig(**values)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    cfg = resolve_config(args)
    report = run_experiment(cfg)
    for check in report.checks:
        status = "PASS" if check.passed else "FAIL"
        detail = json.dumps(check.to_json_dict()["detail"])
        print(f"[{status}] {cfg.experiment}: {check.name} {detail}")
    if cfg.out is not None:
        print(f"outputs written to {cfg.out}")
    if report.passed:
        print(f"{cfg.experiment}: all {len(report.checks)} checks passed")
        return 0
    print(f"{cfg.experiment}: FAILED checks: {', '.join(report.failures)}",
          file=sys.stderr)
    return 1


if __name__ == "__main__":
    sys.exit(main())
