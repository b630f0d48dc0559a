"""Command-line front end.

Subcommands map one-to-one onto the harness pipeline stages:

    tilkit generate      --config c.toml --out data/
    tilkit tune-til      --config c.toml --data data/ --out tune/
    tilkit structure-opt --config c.toml --data data/ --out sdr/
    tilkit prune         --ranking sdr/ranking_0.csv --delta 0.1 --out mask.json
    tilkit tune-ekf      --config c.toml --data data/ --out ekf/
    tilkit validate      --config c.toml --data data/ --artifacts tune/k_*.json --out val/
    tilkit report        --rows val/rows.csv --out report/

Exit codes: 0 success, 2 config error, 3 optimizer failure,
4 simulation divergence.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

EXIT_CONFIG = 2
EXIT_OPTIMIZER = 3
EXIT_DIVERGENCE = 4


def _common(sub, data=True):
    sub.add_argument("--config", required=True, help="experiment TOML file")
    if data:
        sub.add_argument("--data", required=True,
                         help="directory with generated datasets")
    sub.add_argument("--out", required=True, help="output directory")
    sub.add_argument("--seed", type=int, default=None,
                     help="override the master seed")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="tilkit",
                                 description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sp = ap.add_subparsers(dest="command", required=True)

    _common(sp.add_parser("generate", help="synthesize datasets"), data=False)
    tune = sp.add_parser("tune-til", help="tune the observer gain")
    _common(tune)
    tune.add_argument("--mask", default=None,
                      help="sparsity mask JSON from the prune stage")
    tune.add_argument("--map", dest="reduction_map", default=None,
                      help="reduction map JSON for reduced-input tuning")
    _common(sp.add_parser("structure-opt",
                          help="l1 structure optimization + ranking"))
    pr = sp.add_parser("prune", help="threshold a ranking into a mask")
    pr.add_argument("--ranking", required=True)
    pr.add_argument("--delta", type=float, required=True)
    pr.add_argument("--out", required=True, help="mask JSON path")
    _common(sp.add_parser("tune-ekf", help="tune the EKF Q/R diagonals"))
    val = sp.add_parser("validate", help="run artifacts on validation data")
    _common(val)
    val.add_argument("--artifacts", required=True, nargs="+",
                     help="gain/EKF artifact JSON files")
    rep = sp.add_parser("report", help="aggregate validation rows")
    rep.add_argument("--rows", required=True)
    rep.add_argument("--out", required=True)
    return ap


def _load_config(args):
    from .harness import ExperimentConfig
    cfg = ExperimentConfig.from_toml(args.config)
    if getattr(args, "seed", None) is not None:
        cfg.master_seed = args.seed
    return cfg


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(name)s %(message)s")

    from .bo import NoFeasiblePointError
    from .harness import (ConfigError, pipeline_generate, pipeline_prune,
                          pipeline_report, pipeline_structure_opt,
                          pipeline_tune_ekf, pipeline_tune_til,
                          pipeline_validate, load_mask)
    from .reduction import ReductionMap
    from .scenarios import SimulationDivergence

    try:
        if args.command == "generate":
            cfg = _load_config(args)
            datasets = pipeline_generate(cfg, args.out)
            print(f"wrote {len(datasets)} datasets to {args.out}")
        elif args.command == "tune-til":
            cfg = _load_config(args)
            mask = load_mask(args.mask) if args.mask else None
            rmap = ReductionMap.from_json(args.reduction_map) \
                if args.reduction_map else None
            out = pipeline_tune_til(cfg, args.data, args.out, mask=mask,
                                    reduction_map=rmap)
            best = min(r["best_loss"] for r in out["rows"])
            print(f"tuned {cfg.repeats} repeats, best loss {best:.4f}")
        elif args.command == "structure-opt":
            cfg = _load_config(args)
            out = pipeline_structure_opt(cfg, args.data, args.out)
            print(f"structure optimization done "
                  f"({len(out['gains'])} repeats)")
        elif args.command == "prune":
            mask = pipeline_prune(args.ranking, args.delta, args.out)
            print(f"kept {int(mask.sum())} entries")
        elif args.command == "tune-ekf":
            cfg = _load_config(args)
            out = pipeline_tune_ekf(cfg, args.data, args.out)
            best = min(r["best_loss"] for r in out["rows"])
            print(f"tuned EKF, best loss {best:.4f}")
        elif args.command == "validate":
            cfg = _load_config(args)
            rows = pipeline_validate(cfg, args.data, args.artifacts, args.out)
            print(f"validated {len(rows)} artifact/dataset pairs")
        elif args.command == "report":
            report = pipeline_report(args.rows, args.out)
            print(f"aggregated {len(report)} datasets")
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except FileNotFoundError as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except (NoFeasiblePointError, RuntimeError) as err:
        if isinstance(err, SimulationDivergence):
            print(f"simulation divergence: {err}", file=sys.stderr)
            return EXIT_DIVERGENCE
        print(f"optimizer failure: {err}", file=sys.stderr)
        return EXIT_OPTIMIZER
    except ValueError as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    return 0


if __name__ == "__main__":
    sys.exit(main())
