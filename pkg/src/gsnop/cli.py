from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Any, Optional, Sequence

import questionary

from ._utils import is_nonempty_dir
from .config import RunConfig, load_config
from .errors import GsnopError
from .experiments import cmd_ablate, cmd_bench, cmd_sparsity, cmd_stats
from .train import CHECKPOINT_NAME, cmd_eval, cmd_train

logger = logging.getLogger(__name__)

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"


def _floats(text: str) -> list[float]:
    return [float(part) for part in text.split(",") if part.strip()]


def _ints(text: str) -> list[int]:
    return [int(part) for part in text.split(",") if part.strip()]


def _names(text: str) -> list[str]:
    return [part.strip() for part in text.split(",") if part.strip()]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="gsnop",
        description="Link prediction on sparse dynamic graphs.",
    )
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="path of a JSON run config", default=None)
    common.add_argument(
        "--seed", type=int, help="override the config seed", default=None
    )
    common.add_argument(
        "--out", help="output directory (overrides out_dir)", default=None
    )
    common.add_argument(
        "--verbose", "-v", action="store_true", help="log at debug level"
    )
    common.add_argument(
        "--yes",
        "-y",
        action="store_true",
        help="write into a non-empty output directory without asking",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("train", parents=[common], help="train and save a checkpoint")
    evaluate = sub.add_parser(
        "eval", parents=[common], help="evaluate a checkpoint on the test split"
    )
    evaluate.add_argument(
        "--checkpoint",
        help=f"checkpoint to evaluate (default: <out>/{CHECKPOINT_NAME})",
        default=None,
    )
    ablate = sub.add_parser("ablate", parents=[common], help="compare model variants")
    ablate.add_argument(
        "--variants",
        type=_names,
        default=None,
        help="comma-separated variants (overrides variants)",
    )
    sparsity = sub.add_parser(
        "sparsity", parents=[common], help="sweep the training sample ratio"
    )
    sparsity.add_argument(
        "--ratios",
        type=_floats,
        default=None,
        help="comma-separated ratios (overrides sparsity_ratios)",
    )
    bench = sub.add_parser(
        "bench", parents=[common], help="time forward passes against graph size"
    )
    bench.add_argument(
        "--sizes",
        type=_ints,
        default=None,
        help="comma-separated event counts (overrides bench_sizes)",
    )
    stats = sub.add_parser("stats", parents=[common], help="print dataset statistics")
    stats.add_argument(
        "--ratios",
        type=_floats,
        default=None,
        help="training ratios to report density for (overrides stats_ratios)",
    )
    return parser


def _confirm_out_dir(out: Path, assume_yes: bool) -> bool:
    if assume_yes or not is_nonempty_dir(out) or not sys.stdin.isatty():
        return True
    return bool(
        questionary.confirm(f"{out} is not empty. Write results into it anyway?").ask()
    )


def _overrides(args: argparse.Namespace) -> dict[str, Any]:
    """Command-line values that replace config keys; None means not given."""
    ratios = getattr(args, "ratios", None)
    return {
        "seed": args.seed,
        "out_dir": args.out,
        "checkpoint": getattr(args, "checkpoint", None),
        "variants": getattr(args, "variants", None),
        "sparsity_ratios": ratios if args.command == "sparsity" else None,
        "stats_ratios": ratios if args.command == "stats" else None,
        "bench_sizes": getattr(args, "sizes", None),
    }


def run(args: argparse.Namespace) -> int:
    cfg: RunConfig = load_config(args.config, **_overrides(args))
    out = Path(cfg.out_dir)
    if args.command != "eval" and not _confirm_out_dir(out, args.yes):
        print("aborted")
        return 1
    if args.command == "train":
        result = cmd_train(cfg, out)
        print(f"checkpoint written to {result.checkpoint}")
    elif args.command == "eval":
        checkpoint = Path(cfg.checkpoint) if cfg.checkpoint else out / CHECKPOINT_NAME
        report = cmd_eval(cfg, checkpoint, out)
        print(json.dumps(report.to_dict(), indent=2))
    elif args.command == "ablate":
        for row in cmd_ablate(cfg, out_dir=out):
            print(f"{row['variant']:>8}  ap={row['ap']:.4f}  mrr={row['mrr']:.4f}")
    elif args.command == "sparsity":
        for row in cmd_sparsity(cfg, out_dir=out):
            ratio, ap, mrr = row["sample_ratio"], row["ap"], row["mrr"]
            print(f"{ratio:>6g}  ap={ap:.4f}  mrr={mrr:.4f}")
    elif args.command == "bench":
        fit = cmd_bench(cfg, out_dir=out)
        print(
            f"slope={fit['slope']:.3g}s/link "
            f"intercept={fit['intercept']:.3g}s r2={fit['r2']:.3f}"
        )
    elif args.command == "stats":
        print(json.dumps(cmd_stats(cfg, out_dir=out), indent=2))
    return 0


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO, format=LOG_FORMAT
    )
    try:
        return run(args)
    except GsnopError as exc:
        error = {"error": type(exc).__name__, "message": str(exc)}
        print(json.dumps(error), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
