"""Per-seed ablation table: curvature with and without reconstruction against l1 and delta_w.

    python3 scripts/ablation_seeds.py configs/bench.json --seeds 10
"""

import argparse
from pathlib import Path

import numpy as np

from cahfp.config import config_from_dict, parse_config
from cahfp.experiment import build_simulation

COMBOS = [("curvature", "on"), ("curvature", "off"), ("l1", "on"), ("delta_w", "on")]


def final_acc(cfg):
    sim = build_simulation(cfg)
    sim.run()
    return sim.records[-1].test_acc


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("config")
    ap.add_argument("--seeds", type=int, default=10)
    args = ap.parse_args()
    base = parse_config(Path(args.config).read_text()).to_dict()
    base["diagnostics_interval"] = 0

    acc = np.zeros((len(COMBOS), args.seeds))
    print("seed  " + "  ".join(f"{c}/{r}".ljust(12) for c, r in COMBOS) + "  holds")
    for s in range(args.seeds):
        for i, (crit, recon) in enumerate(COMBOS):
            acc[i, s] = final_acc(config_from_dict({**base, "criterion": crit, "reconstruction": recon, "seed": s}))
        holds = acc[0, s] > acc[1, s] and acc[0, s] >= acc[2, s] and acc[0, s] >= acc[3, s]
        print(f"{s:<6}" + "  ".join(f"{a:<12.4f}" for a in acc[:, s]) + f"  {holds}", flush=True)
    wins = ((acc[0] > acc[1]) & (acc[0] >= acc[2]) & (acc[0] >= acc[3])).sum()
    print(f"mean  " + "  ".join(f"{a:<12.4f}" for a in acc.mean(1)) + f"  {wins}/{args.seeds}")


if __name__ == "__main__":
    main()
