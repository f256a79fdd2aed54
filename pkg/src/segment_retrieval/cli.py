"""``segretr`` command line: run the retrieval pipeline stage by stage.

Exit codes: 0 success, 1 invalid input, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

from . import pipeline
from .config import EvalConfig, PipelineConfig, load_config
from .encoder import TrainConfig
from .core import SamplingConfig
from .errors import (CaptioningFailure, CaptionValidationError, IncompleteJudgmentError,
                     IndexingError, InvalidInputError, SegmentRetrievalError)
from .synthetic import write_fixture

logger = logging.getLogger("segment_retrieval")

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2

COMMANDS = ("windows", "segment", "caption", "train", "index", "query", "eval", "run-all")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INVALID, f"{self.prog}: error: {message}\n")


def build_parser():
    parser = _Parser(prog="segretr", description="Language-driven time-series segment retrieval.")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    for name in COMMANDS:
        p = sub.add_parser(name, help=f"run the {name} stage")
        p.add_argument("--config", required=True, help="JSON or TOML pipeline config")
        p.add_argument("--seed", type=int, help="override the global seed")
        if name in ("query", "eval", "run-all"):
            p.add_argument("--pool-size", type=int, action="append", dest="pool_sizes",
                           help="candidate pool size in windows (repeatable)")
            p.add_argument("--method", choices=("lastr", "random"), action="append",
                           dest="methods", help="ranking method (repeatable)")
            p.add_argument("--k", type=int, action="append", dest="ks",
                           help="cutoff for Recall@K (repeatable; the largest sets top-K)")
        if name == "train":
            p.add_argument("--resume", action="store_true",
                           help="reuse an existing checkpoint trained with the same config")
        if name == "segment":
            p.add_argument("--svg", action="store_true", help="also write one SVG per window")

    fx = sub.add_parser("fixture", help="write the synthetic demo dataset and its config")
    fx.add_argument("directory")
    fx.add_argument("--seed", type=int, default=0)
    return parser


def fixture_config(root):
    """Desk-scale config for the synthetic fixture written by :func:`write_fixture`."""
    return {
        "data_dir": "data",
        "out_dir": "out",
        "seed": 0,
        "train_pairs": 500,
        "sampling": {"L_w": 1024, "N_target": 40, "initial_stride": 1024},
        "segmentation": {"M_max": 6, "L_min": 50},
        "training": dataclasses.asdict(TrainConfig.desk()),
        "eval": {"N_q": 100, "pool_sizes": [10, 50, 100], "methods": ["lastr", "random"],
                 "ks": [1, 5, 10]},
    }


def _cmd_fixture(args):
    root = Path(args.directory)
    splits = write_fixture(root / "data", seed=args.seed)
    doc = fixture_config(root)
    doc["seed"] = args.seed
    (root / "config.json").write_text(json.dumps(doc, indent=2) + "\n")
    print(root / "config.json")
    logger.info("fixture subsets: %s", {k: len(v) for k, v in splits.items()})
    return EXIT_OK


def _apply_overrides(cfg, args):
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    ev = {}
    if getattr(args, "pool_sizes", None):
        ev["pool_sizes"] = tuple(args.pool_sizes)
    if getattr(args, "methods", None):
        ev["methods"] = tuple(dict.fromkeys(args.methods))
    if getattr(args, "ks", None):
        ev["ks"] = tuple(sorted(set(args.ks)))
    if ev:
        cfg = dataclasses.replace(cfg, eval=dataclasses.replace(cfg.eval, **ev))
    if getattr(args, "svg", False):
        cfg = dataclasses.replace(cfg, plot_svg=True)
    return cfg


def _run(args):
    if args.command == "fixture":
        return _cmd_fixture(args)
    cfg = _apply_overrides(load_config(args.config), args)
    cmd = args.command
    if cmd == "windows":
        for path in pipeline.run_windows(cfg):
            print(path)
    elif cmd == "segment":
        res = pipeline.run_segment(cfg)
        print(json.dumps({s: len(r) for s, r in res.items()}))
    elif cmd == "caption":
        print(json.dumps(pipeline.run_caption(cfg)))
    elif cmd == "train":
        model, log = pipeline.run_train(cfg, resume=args.resume)
        for entry in log:
            print(json.dumps(entry))
    elif cmd == "index":
        index = pipeline.run_index(cfg)
        print(f"{pipeline.index_path(cfg)}\t{len(index)}")
    elif cmd == "query":
        for path in pipeline.run_query(cfg):
            print(path)
    elif cmd == "eval":
        for m in pipeline.run_eval(cfg):
            print(json.dumps(m, sort_keys=True))
    elif cmd == "run-all":
        for m in pipeline.run_all(cfg):
            print(json.dumps(m, sort_keys=True))
    return EXIT_OK


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return _run(args)
    except (InvalidInputError, IndexingError, CaptionValidationError,
            IncompleteJudgmentError) as exc:
        logger.error("%s", exc)
        return EXIT_INVALID
    except (CaptioningFailure, SegmentRetrievalError, ArithmeticError, RuntimeError,
            OSError) as exc:
        logger.error("%s: %s", type(exc).__name__, exc)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
