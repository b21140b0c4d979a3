"""Command line: ``cahfp run | summarize | oracle``."""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .config import parse_config
from .errors import ConfigError, IngestionError, PartitionError

OUTPUT_ENV = "CAHFP_OUTPUT_DIR"

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_ORACLE = 0, 1, 2, 3


def _load_config(path, seed=None):
    text = Path(path).read_text()
    cfg = parse_config(text)
    if seed is not None:
        cfg.seed = seed
    return cfg


def cmd_run(args):
    from .experiment import run_experiment

    cfg = _load_config(args.config, args.seed)
    out = args.out or os.environ.get(OUTPUT_ENV) or cfg.output_dir
    result = run_experiment(cfg, out)
    last = result.records[-1] if result.records else None
    if result.ok:
        acc = f"{last.test_acc:.4f}" if last else "n/a"
        print(f"{result.out_dir}: {len(result.records)} rounds, final test_acc={acc}")
        return EXIT_OK
    print(f"{result.out_dir}: numeric fault at round {result.failure_round}: {result.message}", file=sys.stderr)
    return EXIT_NUMERIC


def cmd_summarize(args):
    from .experiment import summarize

    dirs = []
    for d in map(Path, args.dirs):
        if (d / "manifest.json").exists():
            dirs.append(d)
        else:
            dirs.extend(sorted(p.parent for p in d.glob("**/manifest.json")))
    text, csv_text = summarize(dirs)
    print(text, end="")
    if args.csv:
        Path(args.csv).write_text(csv_text)
    return EXIT_OK


def cmd_oracle(args):
    from .experiment import run_oracle

    cfg = _load_config(args.config, args.seed)
    rep = run_oracle(cfg)
    flag = {True: "PASS", False: "FAIL"}
    print(f"[{flag[rep.ranking_ok]}] criterion ranking: mean Spearman {rep.ranking_mean:.3f} "
          f"(per seed {np.round(rep.ranking, 3).tolist()}), need >= {rep.ranking_threshold}")
    print(f"[{flag[rep.remainder_ok]}] remainder scaling: halving ratios {np.round(rep.remainder_ratios, 2).tolist()}, "
          f"need within {list(rep.ratio_band)}")
    return EXIT_OK if rep.ok else EXIT_ORACLE


def build_parser():
    parser = argparse.ArgumentParser(prog="cahfp", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run one experiment config")
    p.add_argument("config")
    p.add_argument("--out", help=f"output directory (overrides ${OUTPUT_ENV} and the config)")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("summarize", help="tabulate final accuracies of finished runs")
    p.add_argument("dirs", nargs="+")
    p.add_argument("--csv", help="also write the table as CSV")
    p.set_defaults(func=cmd_summarize)

    p = sub.add_parser("oracle", help="brute-force criterion ranking and Taylor remainder checks")
    p.add_argument("config")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_oracle)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, IngestionError, PartitionError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
