"""Run a criterion x reconstruction x alpha grid from a base config and tabulate it.

    python3 scripts/run_grid.py configs/bench.json --out runs/grid --seeds 0 1 2
"""

import argparse
import itertools
from pathlib import Path

from cahfp.config import config_from_dict, parse_config
from cahfp.experiment import run_experiment, summarize


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("config")
    ap.add_argument("--out", default="runs/grid")
    ap.add_argument("--seeds", type=int, nargs="+", default=[0])
    ap.add_argument("--criteria", nargs="+", default=["curvature", "curvature_approx", "l1", "delta_w", "random", "none"])
    ap.add_argument("--reconstruction", nargs="+", default=["on", "off"])
    ap.add_argument("--alphas", type=float, nargs="+", default=[0.1, 1.0, 10.0])
    args = ap.parse_args()

    base = parse_config(Path(args.config).read_text()).to_dict()
    dirs = []
    for crit, recon, alpha, seed in itertools.product(args.criteria, args.reconstruction, args.alphas, args.seeds):
        if crit == "none" and recon != args.reconstruction[0]:
            continue  # nothing is pruned, reconstruction is moot
        cfg = config_from_dict({**base, "criterion": crit, "reconstruction": recon, "alpha": alpha, "seed": seed})
        out = Path(args.out) / f"{crit}_{recon}_a{alpha:g}_s{seed}"
        res = run_experiment(cfg, out)
        last = res.records[-1].test_acc if res.records else float("nan")
        print(f"{out.name}: {res.status} test_acc={last:.4f}", flush=True)
        dirs.append(out)
    text, csv_text = summarize(dirs)
    print(text)
    (Path(args.out) / "summary.csv").write_text(csv_text)


if __name__ == "__main__":
    main()
