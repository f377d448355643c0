"""``uad`` command line: generate | train | reconstruct | sweep | report."""

from __future__ import annotations

import argparse
import sys
from pathlib import Path
from typing import Optional, Sequence

from .checkpoint import CheckpointError
from .harness import (HarnessError, cmd_generate, cmd_reconstruct, cmd_report, cmd_sweep, cmd_train,
                      load_config)
from .inference import MAP_MODES


def _int_list(text: str) -> tuple:
    try:
        return tuple(int(s) for s in text.split(",") if s.strip())
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from exc


def _str_list(text: str) -> tuple:
    return tuple(s.strip() for s in text.split(",") if s.strip())


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="key = value config file")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", type=Path, default=Path("runs/default"), help="run directory")
    common.add_argument("--resolution", type=int, choices=(64, 128))
    common.add_argument("--methods", type=_str_list, help="comma list of anoddpm-gaussian,anoddpm-simplex,autoddpm")
    common.add_argument("--t-grid", type=_int_list, dest="t_grid", help="comma list of noise levels")
    common.add_argument("--map", choices=MAP_MODES, help="anomaly map shown in reports")

    parser = argparse.ArgumentParser(prog="uad", description="Diffusion-based anomaly detection on phantoms.")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("generate", parents=[common], help="write the phantom dataset")
    tr = sub.add_parser("train", parents=[common], help="train one model per noise kind")
    tr.add_argument("--epochs", type=int)
    rc = sub.add_parser("reconstruct", parents=[common], help="reconstruct one image and write a panel")
    rc.add_argument("image", type=Path)
    rc.add_argument("--method", default="anoddpm-gaussian")
    rc.add_argument("--t", type=int, default=250)
    rc.add_argument("--mask", type=Path, help="brain mask image restricting the anomaly map")
    sub.add_parser("sweep", parents=[common], help="evaluate every (method, t) cell on the test split")
    rp = sub.add_parser("report", parents=[common], help="tables and plots from a sweep CSV")
    rp.add_argument("--csv", type=Path, help="sweep CSV (default OUT/sweep/sweep.csv)")
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        config = args.config
        if config is None and args.command != "generate" and (args.out / "config.txt").exists():
            config = args.out / "config.txt"  # later stages reuse the settings the run was generated with
        cfg = load_config(config, seed=args.seed, resolution=args.resolution, methods=args.methods,
                          t_grid=args.t_grid, map=args.map, epochs=getattr(args, "epochs", None))
        if args.command == "generate":
            print(cmd_generate(cfg, args.out))
        elif args.command == "train":
            for kind, path in cmd_train(cfg, args.out).items():
                print(f"{kind}: {path}")
        elif args.command == "reconstruct":
            print(cmd_reconstruct(cfg, args.out, args.image, args.method, args.t, args.mask))
        elif args.command == "sweep":
            print(cmd_sweep(cfg, args.out))
        elif args.command == "report":
            print(cmd_report(args.csv or args.out / "sweep" / "sweep.csv", args.out, cfg.map), end="")
    except (HarnessError, CheckpointError, FileNotFoundError) as exc:
        print(f"uad {args.command}: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
