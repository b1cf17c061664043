"""Command-line front end: run experiments, mu sweeps, the weight-norm
study, and heatmap exports.

Exit code 0 means every requested run completed; otherwise a
machine-readable error JSON is printed and the exit code is nonzero.
"""

import os

# Pin BLAS pools to one thread before numpy loads anywhere: results must be
# bit-identical regardless of how many client workers run concurrently.
for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, "1")

import argparse
import dataclasses
import json
import sys
from pathlib import Path

from .config import PRESETS, SWEEP_MU_VALUES, parse_config
from .errors import FedDWError
from .experiments import heatmap_export, norm_study, run_experiment


def _add_common_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", type=Path, help="JSON config file")
    parser.add_argument("--preset", choices=sorted(PRESETS), help="experiment preset")
    parser.add_argument("--seed", type=int)
    parser.add_argument("--out", type=Path, default=Path("runs"), help="output root directory")
    parser.add_argument("--force", action="store_true", help="overwrite existing run directories")
    parser.add_argument("--strategy", choices=("fedavg", "fedprox", "feddw", "local"))
    parser.add_argument("--mu", type=float)
    parser.add_argument("--beta", type=float)
    parser.add_argument("--clients", type=int)
    parser.add_argument("--rounds", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="feddw", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    run_p = sub.add_parser("run", help="execute a single experiment")
    _add_common_flags(run_p)

    sweep_p = sub.add_parser("sweep", help="execute one run per mu value")
    _add_common_flags(sweep_p)
    sweep_p.add_argument(
        "--values", type=str,
        help=f"comma-separated mu values (default {','.join(str(v) for v in SWEEP_MU_VALUES)})",
    )

    norm_p = sub.add_parser("norm-study", help="classifier weight norms vs class proportions")
    _add_common_flags(norm_p)
    norm_p.add_argument("--proportions", type=str,
                        help="comma-separated per-class fractions (default uniform)")

    heat_p = sub.add_parser("heatmap", help="export SL/CR grids from a completed run")
    heat_p.add_argument("--run", type=Path, required=True, help="run directory")
    heat_p.add_argument("--out", type=Path, help="output directory (default: run directory)")

    return parser


def _overrides(args: argparse.Namespace) -> dict:
    return {
        "seed": args.seed,
        "strategy": args.strategy,
        "mu": args.mu,
        "beta": args.beta,
        "clients": args.clients,
        "rounds": args.rounds,
    }


def _emit(payload: dict) -> None:
    print(json.dumps(payload, indent=2))


def _cmd_run(args) -> dict:
    config = parse_config(args.config, args.preset, _overrides(args))
    out_dir = run_experiment(config, args.out, force=args.force)
    return {"status": "ok", "outputs": [str(out_dir)]}


def _cmd_sweep(args) -> dict:
    values = (
        [float(v) for v in args.values.split(",")] if args.values else list(SWEEP_MU_VALUES)
    )
    preset = args.preset or "sweep-mu"
    outputs = []
    for value in values:
        overrides = _overrides(args)
        overrides["mu"] = value
        config = parse_config(args.config, preset, overrides)
        config = dataclasses.replace(config, name=f"{config.name}-mu{value:g}")
        outputs.append(str(run_experiment(config, args.out, force=args.force)))
    return {"status": "ok", "outputs": outputs}


def _cmd_norm_study(args) -> dict:
    config = parse_config(args.config, args.preset, _overrides(args))
    if args.proportions:
        proportions = [float(v) for v in args.proportions.split(",")]
    else:
        train_classes = config.dataset.classes if config.dataset.kind == "blobs" else 10
        proportions = [1.0 / train_classes] * train_classes
    args.out.mkdir(parents=True, exist_ok=True)
    report = norm_study(proportions, config, out_path=args.out / "norm_study.json")
    return {"status": "ok", "outputs": [str(args.out / "norm_study.json")],
            "spearman": report["spearman_proportion_vs_norm"]}


def _cmd_heatmap(args) -> dict:
    payload = heatmap_export(args.run, args.out)
    out = args.out if args.out is not None else args.run
    return {"status": "ok", "outputs": [str(Path(out) / "heatmap.json")],
            "distance": payload["distance"]}


_COMMANDS = {
    "run": _cmd_run,
    "sweep": _cmd_sweep,
    "norm-study": _cmd_norm_study,
    "heatmap": _cmd_heatmap,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        _emit(_COMMANDS[args.command](args))
        return 0
    except (FedDWError, FileExistsError, FileNotFoundError, ValueError) as exc:
        _emit({"status": "error", "type": type(exc).__name__, "message": str(exc)})
        return 1


if __name__ == "__main__":
    sys.exit(main())
